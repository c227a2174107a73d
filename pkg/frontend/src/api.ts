/** Typed client for the workbench HTTP API. Every mutating UI control goes
 * through exactly one method here; nothing is updated optimistically. */

export interface LayerView {
  name: string;
  typeName: string;
  bottoms: string[];
  tops: string[];
  phases: string[];
  position: [number, number];
  paramsText: string;
}

export interface EdgeEndpoint {
  layer: string;
  topIndex?: number;
  bottomIndex?: number;
}

export interface EdgeView {
  producer: EdgeEndpoint;
  consumer: EdgeEndpoint;
  blobName: string;
  isInPlace: boolean;
}

export interface NetView {
  name: string;
  layers: LayerView[];
  edges: EdgeView[];
  uiState: { hiddenEdgeBlobs: string[]; zoom: number; pan: number[] };
}

export interface CatalogEntry {
  typeName: string;
  parameterMessage: string | null;
  category: string;
  commonFields: string[];
}

export interface SessionView {
  id: number;
  state: string;
  iteration: number;
  maxIter: number;
  createdAt: number | null;
  endedAt: number | null;
  failureReason: string | null;
  snapshots: number[];
}

export interface DatasetView {
  id: string;
  format: string;
  path: string;
  hostId: string;
  stats: { itemCount: number; dims: number[] } | null;
}

export interface Diagnostic {
  kind: string;
  subjects: string[];
  message: string;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    public detail: string,
  ) {
    super(`${code}: ${detail}`);
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private fetchFn: FetchLike = (url, init) => fetch(url, init),
    private base: string = "",
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.body = JSON.stringify(body);
      init.headers = { "Content-Type": "application/json" };
    }
    const response = await this.fetchFn(this.base + path, init);
    if (!response.ok) {
      let code = `HTTP_${response.status}`;
      let detail = response.statusText;
      try {
        const payload = await response.json();
        code = payload.code ?? code;
        detail = payload.detail ?? detail;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(response.status, code, detail);
    }
    return (await response.json()) as T;
  }

  getNet(): Promise<NetView> {
    return this.request("GET", "/api/net");
  }

  putNet(body: {
    text?: string;
    positions?: Record<string, [number, number]>;
    hiddenEdgeBlobs?: string[];
  }): Promise<NetView> {
    return this.request("PUT", "/api/net", body);
  }

  addLayer(typeName: string, name?: string, position?: [number, number]): Promise<NetView> {
    return this.request("POST", "/api/net/layers", { typeName, name, position });
  }

  removeLayer(name: string): Promise<NetView> {
    return this.request("DELETE", `/api/net/layers/${encodeURIComponent(name)}`);
  }

  connect(
    producerLayer: string,
    topIndex: number,
    consumerLayer: string,
    bottomIndex: number,
  ): Promise<NetView> {
    return this.request("POST", "/api/net/connect", {
      producerLayer,
      topIndex,
      consumerLayer,
      bottomIndex,
    });
  }

  validate(phase: string): Promise<{ diagnostics: Diagnostic[] }> {
    return this.request("GET", `/api/net/validate?phase=${phase}`);
  }

  getSolver(): Promise<{ text: string }> {
    return this.request("GET", "/api/solver");
  }

  putSolver(text: string): Promise<{ text: string; warnings: string[] }> {
    return this.request("PUT", "/api/solver", { text });
  }

  catalogLayers(): Promise<CatalogEntry[]> {
    return this.request("GET", "/api/catalog/layers");
  }

  catalogChoices(message: string, field: string): Promise<{ choices: string[] }> {
    return this.request(
      "GET",
      `/api/catalog/choices?message=${encodeURIComponent(message)}&field=${encodeURIComponent(field)}`,
    );
  }

  datasets(): Promise<DatasetView[]> {
    return this.request("GET", "/api/datasets");
  }

  addDataset(format: string, path: string, hostId = "local"): Promise<DatasetView> {
    return this.request("POST", "/api/datasets", { format, path, hostId });
  }

  probeDataset(id: string): Promise<{ itemCount: number; dims: number[] }> {
    return this.request("POST", `/api/datasets/${encodeURIComponent(id)}/probe`);
  }

  bind(datasetId: string, layerName: string, phase: string): Promise<unknown> {
    return this.request("POST", "/api/bindings", { datasetId, layerName, phase });
  }

  sessions(): Promise<SessionView[]> {
    return this.request("GET", "/api/sessions");
  }

  createSession(): Promise<SessionView> {
    return this.request("POST", "/api/sessions");
  }

  sessionAction(id: number, action: "start" | "pause" | "resume" | "abort" | "restore"): Promise<SessionView> {
    return this.request("POST", `/api/sessions/${id}/${action}`);
  }

  deleteSession(id: number): Promise<unknown> {
    return this.request("DELETE", `/api/sessions/${id}`);
  }

  sessionMetrics(id: number, keys: string[]): Promise<{ series: Record<string, [number, number][]> }> {
    return this.request("GET", `/api/sessions/${id}/metrics?keys=${keys.join(",")}`);
  }

  exportCsvUrl(sessionIds: number[], keys: string[]): string {
    return `${this.base}/api/export/csv?sessions=${sessionIds.join(",")}&keys=${encodeURIComponent(keys.join(","))}`;
  }
}
