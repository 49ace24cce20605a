// Browser bootstrap: wires DOM events to the pure state/render modules.
// Everything interesting is testable elsewhere; this file only touches DOM.

import { checkHealth, fetchMetrics, streamChat } from "./api.js";
import { bytesToBase64, decodePpm, rgbaToPpm } from "./ppm.js";
import {
  renderAttachment,
  renderMetricsPanel,
  renderTranscript,
} from "./render.js";
import {
  abortTurn,
  appendToken,
  attachImage,
  beginTurn,
  canSubmit,
  completeTurn,
  failTurn,
  initialChatState,
  initialMetricsState,
  metricsFetchFailed,
  applyMetrics,
  type ChatViewState,
  type MetricsViewState,
} from "./state.js";
import type { ChatMessage } from "./types.js";

const base = (window as { MICROVLM_BASE?: string }).MICROVLM_BASE ?? "http://127.0.0.1:8080";

let chat: ChatViewState = initialChatState;
let metrics: MetricsViewState = initialMetricsState;
let controller: AbortController | null = null;

const el = (id: string) => document.getElementById(id)!;

function redraw(): void {
  el("transcript").innerHTML = renderTranscript(chat);
  el("attachment").innerHTML = renderAttachment(chat);
  el("metrics").innerHTML = renderMetricsPanel(metrics);
  (el("send") as HTMLButtonElement).disabled =
    !canSubmit(chat, (el("input") as HTMLTextAreaElement).value);
  (el("abort") as HTMLButtonElement).disabled = !chat.pending;
  el("transcript").scrollTop = el("transcript").scrollHeight;
}

function transcriptMessages(): ChatMessage[] {
  return chat.transcript
    .filter((t) => t.role !== "system")
    .map((t) => ({ role: t.role as "user" | "assistant", text: t.text }));
}

async function send(): Promise<void> {
  const input = el("input") as HTMLTextAreaElement;
  if (!canSubmit(chat, input.value)) return;
  const attachment = chat.attached;
  chat = beginTurn(chat, input.value);
  input.value = "";
  redraw();
  controller = new AbortController();
  try {
    const done = await streamChat(
      base,
      {
        messages: transcriptMessages().slice(0, -1), // drop the empty assistant turn
        image: attachment?.base64,
        decode: { mode: "greedy", max_new: chat.decode.max_new },
      },
      (token) => {
        chat = appendToken(chat, token.text);
        redraw();
      },
      controller.signal,
    );
    chat = completeTurn(chat, done.answer);
  } catch (err) {
    if (controller?.signal.aborted) chat = abortTurn(chat);
    else chat = failTurn(chat, String(err instanceof Error ? err.message : err));
  } finally {
    controller = null;
    redraw();
  }
}

async function attach(file: File): Promise<void> {
  try {
    const bytes = new Uint8Array(await file.arrayBuffer());
    let ppm: Uint8Array;
    let previewUrl: string;
    if (bytes[0] === 0x50 && bytes[1] === 0x36) {
      const decoded = decodePpm(bytes);
      ppm = bytes;
      previewUrl = rgbaToDataUrl(decoded.rgba, decoded.width, decoded.height);
    } else {
      // any other format: draw through a canvas and re-encode as PPM
      const bitmap = await createImageBitmap(new Blob([bytes]));
      const canvas = document.createElement("canvas");
      canvas.width = bitmap.width;
      canvas.height = bitmap.height;
      const ctx = canvas.getContext("2d")!;
      ctx.drawImage(bitmap, 0, 0);
      const data = ctx.getImageData(0, 0, bitmap.width, bitmap.height);
      ppm = rgbaToPpm(data.data, bitmap.width, bitmap.height);
      previewUrl = canvas.toDataURL();
    }
    chat = attachImage(chat, { base64: bytesToBase64(ppm), previewUrl });
  } catch (err) {
    chat = failTurn(chat, `cannot attach image: ${String(err)}`);
  }
  redraw();
}

function rgbaToDataUrl(rgba: Uint8ClampedArray, width: number, height: number): string {
  const canvas = document.createElement("canvas");
  canvas.width = width;
  canvas.height = height;
  const ctx = canvas.getContext("2d")!;
  const pixels = new Uint8ClampedArray(rgba.length); // plain ArrayBuffer backing
  pixels.set(rgba);
  ctx.putImageData(new ImageData(pixels, width, height), 0, 0);
  return canvas.toDataURL();
}

async function pollMetrics(): Promise<void> {
  try {
    metrics = applyMetrics(metrics, await fetchMetrics(base));
  } catch {
    metrics = metricsFetchFailed(metrics);
  }
  redraw();
  setTimeout(pollMetrics, metrics.pollIntervalMs);
}

window.addEventListener("DOMContentLoaded", () => {
  el("send").addEventListener("click", () => void send());
  el("abort").addEventListener("click", () => controller?.abort());
  el("input").addEventListener("input", redraw);
  el("input").addEventListener("keydown", (ev) => {
    const key = ev as KeyboardEvent;
    if (key.key === "Enter" && !key.shiftKey) {
      key.preventDefault();
      void send();
    }
  });
  el("file").addEventListener("change", (ev) => {
    const files = (ev.target as HTMLInputElement).files;
    if (files && files[0]) void attach(files[0]);
  });
  void checkHealth(base).then((ok) => {
    if (!ok) chat = failTurn(chat, "model not loaded (server /healthz is not ok)");
    redraw();
  });
  void pollMetrics();
  redraw();
});
