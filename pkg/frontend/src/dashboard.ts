/** Session dashboard logic: which actions each session state allows, and
 * the tooltip shown on disabled controls. Mirrors the server's transition
 * table — the server remains authoritative and still rejects illegal calls. */

import type { SessionView } from "./api.js";

export const SESSION_ACTIONS = ["start", "pause", "resume", "abort", "delete"] as const;
export type SessionAction = (typeof SESSION_ACTIONS)[number];

const ALLOWED: Record<string, SessionAction[]> = {
  WAITING: ["start", "delete"],
  RUNNING: ["pause", "abort"],
  PAUSED: ["resume", "delete"],
  FINISHED: ["delete"],
  FAILED: ["delete"],
};

export function enabledActions(state: string): SessionAction[] {
  return ALLOWED[state] ?? [];
}

export function isEnabled(state: string, action: SessionAction): boolean {
  return enabledActions(state).includes(action);
}

/** Tooltip for a disabled control, derived from the session state. */
export function disabledTooltip(state: string, action: SessionAction): string | null {
  if (isEnabled(state, action)) return null;
  return `cannot ${action} a ${state} session`;
}

export function stateBadge(session: SessionView): string {
  if (session.state === "FAILED" && session.failureReason) {
    return `FAILED (${session.failureReason})`;
  }
  return session.state;
}

/** Restore (copy frozen net/solver back to the project) is offered whenever
 * the session is not actively training. */
export function canRestore(state: string): boolean {
  return state !== "RUNNING";
}
