/** Incremental parser for the server event stream (text/event-stream).
 *
 * Fed arbitrary text chunks, it yields complete events and remembers the
 * last event id so a reconnect can resume without gaps or duplicates.
 */

export interface StreamEvent {
  id: number;
  event: string;
  data: unknown;
}

export class EventStream {
  lastEventId = 0;
  private buffer = "";

  /** Feed a chunk of stream text; returns any events completed by it. */
  feed(chunk: string): StreamEvent[] {
    this.buffer += chunk;
    const events: StreamEvent[] = [];
    let boundary: number;
    while ((boundary = this.buffer.indexOf("\n\n")) >= 0) {
      const block = this.buffer.slice(0, boundary);
      this.buffer = this.buffer.slice(boundary + 2);
      const parsed = this.parseBlock(block);
      if (parsed) events.push(parsed);
    }
    return events;
  }

  private parseBlock(block: string): StreamEvent | null {
    let id: number | null = null;
    let event = "";
    let data = "";
    for (const line of block.split("\n")) {
      if (line.startsWith(":")) continue; // keepalive comment
      const sep = line.indexOf(": ");
      if (sep < 0) continue;
      const field = line.slice(0, sep);
      const value = line.slice(sep + 2);
      if (field === "id") id = Number(value);
      else if (field === "event") event = value;
      else if (field === "data") data = value;
    }
    if (id === null || !event) return null;
    if (id <= this.lastEventId) return null; // replayed duplicate
    this.lastEventId = id;
    return { id, event, data: data ? JSON.parse(data) : null };
  }

  /** URL for (re)connecting, resuming after the last event seen. */
  streamUrl(base = ""): string {
    return `${base}/api/events?last_event_id=${this.lastEventId}`;
  }
}

/** Browser-side pump: reads the fetch body and dispatches parsed events.
 * Reconnects from lastEventId if the stream drops. */
export async function pumpEvents(
  stream: EventStream,
  onEvent: (event: StreamEvent) => void,
  base = "",
  fetchFn: typeof fetch = fetch,
): Promise<void> {
  for (;;) {
    try {
      const response = await fetchFn(stream.streamUrl(base));
      const reader = response.body?.getReader();
      if (!reader) return;
      const decoder = new TextDecoder();
      for (;;) {
        const { done, value } = await reader.read();
        if (done) break;
        for (const event of stream.feed(decoder.decode(value, { stream: true }))) {
          onEvent(event);
        }
      }
    } catch {
      /* connection dropped; fall through to reconnect */
    }
    await new Promise((resolve) => setTimeout(resolve, 1000));
  }
}
