// Wire types for the inference service endpoints.

export interface ChatMessage {
  role: "user" | "assistant";
  text: string;
}

export interface DecodeSettings {
  mode: "greedy" | "sample";
  temperature: number;
  seed: number;
  max_new: number;
}

export interface ChatRequestBody {
  session_id?: string;
  messages: ChatMessage[];
  image?: string; // base64 binary PPM
  decode: Partial<DecodeSettings>;
}

export interface TelemetrySnapshot {
  timestamp_ms: number;
  rss_bytes: number;
  tokens_generated: number;
  tokens_per_second: number;
  last_token_latency_ms?: number;
  power_w?: number;
  utilization_pct?: number;
  sensor_warning?: boolean;
}

export interface BudgetEnvelope {
  power_min_w: number;
  power_max_w: number;
  memory_budget_bytes: number;
  utilization_target_pct: number;
}

export interface RunReport {
  n_snapshots: number;
  tokens_total: number;
  tokens_per_second_mean: number;
  peak_memory_bytes: number;
  power_mean_w?: number;
  power_max_w?: number;
  utilization_mean_pct?: number;
  verdicts: string[];
  envelope: BudgetEnvelope;
}

export interface MetricsResponse {
  snapshot: TelemetrySnapshot | null;
  report: RunReport | null;
}

export interface ChatResponseBody {
  session_id: string | null;
  answer: string;
  token_count: number;
  latency_ms: number;
  telemetry: TelemetrySnapshot;
}

export interface TokenEvent {
  id: number | null;
  text: string;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}
