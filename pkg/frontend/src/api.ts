// Typed client for the three service endpoints. streamChat speaks the SSE
// token protocol and resolves with the terminal done payload; its streamed
// token concatenation equals the done answer by server contract.

import { SseParser } from "./sse.js";
import {
  ApiError,
  type ChatRequestBody,
  type ChatResponseBody,
  type MetricsResponse,
  type TokenEvent,
} from "./types.js";

async function raiseForStatus(response: Response): Promise<void> {
  if (response.ok) return;
  let code = `HTTP_${response.status}`;
  let message = response.statusText;
  try {
    const body = (await response.json()) as { error?: { code?: string; message?: string } };
    if (body.error) {
      code = body.error.code ?? code;
      message = body.error.message ?? message;
    }
  } catch {
    // non-JSON error body: keep the status text
  }
  throw new ApiError(response.status, code, message);
}

export async function checkHealth(base: string): Promise<boolean> {
  try {
    const response = await fetch(`${base}/healthz`);
    return response.status === 200;
  } catch {
    return false;
  }
}

export async function fetchMetrics(base: string): Promise<MetricsResponse> {
  const response = await fetch(`${base}/v1/metrics`);
  await raiseForStatus(response);
  return (await response.json()) as MetricsResponse;
}

export async function postChat(base: string, body: ChatRequestBody): Promise<ChatResponseBody> {
  const response = await fetch(`${base}/v1/chat`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(body),
  });
  await raiseForStatus(response);
  return (await response.json()) as ChatResponseBody;
}

export async function streamChat(
  base: string,
  body: ChatRequestBody,
  onToken: (token: TokenEvent) => void,
  signal?: AbortSignal,
): Promise<ChatResponseBody> {
  const response = await fetch(`${base}/v1/chat`, {
    method: "POST",
    headers: { "Content-Type": "application/json", Accept: "text/event-stream" },
    body: JSON.stringify(body),
    signal: signal ?? null,
  });
  await raiseForStatus(response);
  if (!response.body) throw new ApiError(0, "NO_BODY", "response had no stream body");
  const reader = response.body.getReader();
  const decoder = new TextDecoder();
  const parser = new SseParser();
  let done: ChatResponseBody | null = null;
  for (;;) {
    const { value, done: eof } = await reader.read();
    if (eof) break;
    for (const event of parser.push(decoder.decode(value, { stream: true }))) {
      if (event.event === "token") onToken(event.data as TokenEvent);
      else if (event.event === "done") done = event.data as ChatResponseBody;
    }
  }
  if (!done) throw new ApiError(0, "STREAM_TRUNCATED", "stream ended without a done event");
  return done;
}
