// Chat and metrics view state as pure data plus transition functions.
// Rendering and the network layer live elsewhere; everything here is
// synchronous, deterministic, and directly unit-testable.
//
// Invariants: at most one in-flight request (pending flag), the transcript
// is append-only within a session, and an attachment rides along on exactly
// one turn.

import type { DecodeSettings, MetricsResponse, RunReport, TelemetrySnapshot } from "./types.js";

export interface TranscriptTurn {
  role: "user" | "assistant" | "system";
  text: string;
  imagePreviewUrl?: string;
}

export interface AttachedImage {
  base64: string;
  previewUrl: string;
}

export interface ChatViewState {
  transcript: TranscriptTurn[];
  pending: boolean;
  attached: AttachedImage | null;
  decode: DecodeSettings;
}

export const initialChatState: ChatViewState = {
  transcript: [],
  pending: false,
  attached: null,
  decode: { mode: "greedy", temperature: 0.8, seed: 0, max_new: 64 },
};

export function canSubmit(state: ChatViewState, text: string): boolean {
  return !state.pending && text.trim().length > 0;
}

/** Stage an attachment for the next turn; a second attach replaces the first. */
export function attachImage(state: ChatViewState, image: AttachedImage): ChatViewState {
  return { ...state, attached: image };
}

export function clearAttachment(state: ChatViewState): ChatViewState {
  return { ...state, attached: null };
}

/**
 * Begin a turn: append the user turn plus an empty assistant turn that
 * streamed tokens extend. The attachment is consumed by this turn.
 */
export function beginTurn(state: ChatViewState, text: string): ChatViewState {
  if (!canSubmit(state, text)) return state;
  const userTurn: TranscriptTurn = { role: "user", text: text.trim() };
  if (state.attached) userTurn.imagePreviewUrl = state.attached.previewUrl;
  return {
    ...state,
    pending: true,
    attached: null,
    transcript: [...state.transcript, userTurn, { role: "assistant", text: "" }],
  };
}

export function appendToken(state: ChatViewState, text: string): ChatViewState {
  if (!state.pending || text.length === 0) return state;
  const transcript = state.transcript.slice();
  const last = transcript[transcript.length - 1];
  if (!last || last.role !== "assistant") return state;
  transcript[transcript.length - 1] = { ...last, text: last.text + text };
  return { ...state, transcript };
}

/** Final answer from the done event; authoritative over streamed fragments. */
export function completeTurn(state: ChatViewState, answer: string): ChatViewState {
  const transcript = state.transcript.slice();
  const last = transcript[transcript.length - 1];
  if (last && last.role === "assistant") {
    transcript[transcript.length - 1] = { ...last, text: answer };
  }
  return { ...state, pending: false, transcript };
}

/** Server or transport error rendered inline as a system turn. */
export function failTurn(state: ChatViewState, message: string): ChatViewState {
  return {
    ...state,
    pending: false,
    transcript: [...state.transcript, { role: "system", text: message }],
  };
}

/** User abort: back to idle, transcript intact. */
export function abortTurn(state: ChatViewState): ChatViewState {
  return {
    ...state,
    pending: false,
    transcript: [...state.transcript, { role: "system", text: "(request aborted)" }],
  };
}

// ---------------------------------------------------------------------------
// metrics panel state
// ---------------------------------------------------------------------------

export interface MetricsViewState {
  snapshot: TelemetrySnapshot | null;
  report: RunReport | null;
  offline: boolean;
  pollIntervalMs: number;
}

export const initialMetricsState: MetricsViewState = {
  snapshot: null,
  report: null,
  offline: false,
  pollIntervalMs: 1000,
};

export function applyMetrics(state: MetricsViewState, payload: MetricsResponse): MetricsViewState {
  return { ...state, snapshot: payload.snapshot, report: payload.report, offline: false };
}

/** Polling continues across failures; the panel just shows an offline badge. */
export function metricsFetchFailed(state: MetricsViewState): MetricsViewState {
  return { ...state, offline: true };
}
