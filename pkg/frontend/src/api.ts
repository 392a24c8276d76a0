// Typed client for the annotation service. All state lives on the server;
// the UI only reads snapshots and posts commands.

export interface StatusBody {
  phase: "idle" | "selecting" | "awaiting_annotations" | "training";
  error: { round: number; message: string } | null;
  round?: number;
  labeled?: number;
  unlabeled?: number;
  candidates?: number;
  annotated?: number;
  revealed?: number;
}

export interface CandidateBody {
  image_id: string;
  annotated: boolean;
  attention: number[][];
  regions: number[][];
  region_count: number;
  image_url: string;
  attention_url: string;
}

export interface CandidatesBody {
  revealed: number;
  total: number;
  candidates: CandidateBody[];
}

export interface AnnotationPayload {
  image_id: string;
  positive_points: [number, number][];
  negative_regions: number[];
  cleared: boolean;
  display_size: [number, number];
  timestamp: number;
}

export interface MetricRow {
  round: number;
  accuracy_biased: number;
  accuracy_decorrelated: number;
  attention_in_target?: number;
  attention_in_distractor?: number;
  [key: string]: number | undefined;
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const resp = await fetch(url, init);
  if (!resp.ok) {
    let detail = `${resp.status}`;
    try {
      detail = JSON.stringify(await resp.json());
    } catch {
      /* non-JSON error body */
    }
    throw new Error(`${url}: ${detail}`);
  }
  return resp.json() as Promise<T>;
}

function post<T>(url: string, body: unknown, method = "POST"): Promise<T> {
  return request<T>(url, {
    method,
    headers: { "Content-Type": "application/json" },
    body: body === undefined ? undefined : JSON.stringify(body),
  });
}

export const api = {
  status: () => request<StatusBody>("/api/status"),
  startSession: (overrides: Record<string, unknown> | null) =>
    post<{ session_id: string }>("/api/session", overrides),
  stopSession: () => request<{ phase: string }>("/api/session", { method: "DELETE" }),
  candidates: () => request<CandidatesBody>("/api/candidates"),
  next: () => post<{ revealed: number; total: number }>("/api/next", undefined),
  annotations: (payloads: AnnotationPayload[]) =>
    post<{ accepted: string[]; rejected: unknown[] }>("/api/annotations", payloads),
  finetune: () => post<{ phase: string }>("/api/finetune", undefined),
  metrics: () => request<{ metric_history: MetricRow[] }>("/api/metrics"),
  getConfig: () => request<Record<string, unknown>>("/api/config"),
  patchConfig: (overrides: Record<string, unknown>) =>
    post<Record<string, unknown>>("/api/config", overrides, "PATCH"),
  palette: () => request<{ palette: [number, number, number][] }>("/api/palette"),
};
