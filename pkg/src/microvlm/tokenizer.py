"""Byte-level tokenizer, special tokens, and chat-template rendering.

The vocabulary is the 256 byte values plus six special tokens (V = 262), so
encoding is lossless UTF-8 with no trained merges. Conversations render to a
fixed layout:

    BOS [IMAGE] ROLE_USER <bytes> ROLE_ASSISTANT <bytes> EOS ...

with the loss mask true exactly on assistant text bytes and each assistant
turn's terminating EOS.
"""

from __future__ import annotations

import codecs
from dataclasses import dataclass
from typing import Iterable, NamedTuple

N_BYTE_TOKENS = 256
BOS = 256
EOS = 257
IMAGE = 258
ROLE_USER = 259
ROLE_ASSISTANT = 260
PAD = 261
VOCAB_SIZE = 262

SPECIAL_TOKENS = {
    "BOS": BOS,
    "EOS": EOS,
    "IMAGE": IMAGE,
    "ROLE_USER": ROLE_USER,
    "ROLE_ASSISTANT": ROLE_ASSISTANT,
    "PAD": PAD,
}

USER = "user"
ASSISTANT = "assistant"


class InvalidTokenError(ValueError):
    """A token id outside [0, VOCAB_SIZE)."""


class ConversationFormatError(ValueError):
    """Turn roles do not alternate user/assistant starting with user."""


class Turn(NamedTuple):
    role: str
    text: str


@dataclass
class RenderedSequence:
    """Token ids plus the per-token loss mask and the image slot, if any."""
    ids: list[int]
    loss_mask: list[bool]
    image_slot: int | None = None

    def __len__(self) -> int:
        return len(self.ids)


def encode(text: str) -> list[int]:
    """UTF-8 bytes to byte tokens; lossless."""
    return list(text.encode("utf-8"))


def decode(ids: Iterable[int]) -> str:
    """Inverse of encode on byte tokens; special tokens are dropped."""
    out = bytearray()
    for i in ids:
        i = int(i)
        if i < 0 or i >= VOCAB_SIZE:
            raise InvalidTokenError(f"token id {i} outside [0, {VOCAB_SIZE})")
        if i < N_BYTE_TOKENS:
            out.append(i)
    return out.decode("utf-8", errors="replace")


class IncrementalDecoder:
    """Streams byte tokens into text, holding back incomplete UTF-8 tails.

    Concatenated push() outputs plus the final flush() equal a one-shot
    decode of the same tokens, malformed sequences included.
    """

    def __init__(self):
        self._decoder = codecs.getincrementaldecoder("utf-8")(errors="replace")

    def push(self, token_id: int) -> str:
        token_id = int(token_id)
        if token_id < 0 or token_id >= VOCAB_SIZE:
            raise InvalidTokenError(f"token id {token_id} outside [0, {VOCAB_SIZE})")
        if token_id >= N_BYTE_TOKENS:
            return ""
        return self._decoder.decode(bytes([token_id]))

    def flush(self) -> str:
        return self._decoder.decode(b"", final=True)


def _check_alternation(turns: list[Turn]) -> None:
    if not turns:
        raise ConversationFormatError("conversation has no turns")
    for i, turn in enumerate(turns):
        expected = USER if i % 2 == 0 else ASSISTANT
        if turn.role != expected:
            raise ConversationFormatError(
                f"turn {i} has role '{turn.role}', expected '{expected}' "
                "(conversations alternate user/assistant starting with user)")


def render_conversation(
    turns: list[Turn],
    include_image: bool,
    add_generation_prompt: bool = False,
) -> RenderedSequence:
    """Render alternating turns to token ids with the assistant-only loss mask.

    With `add_generation_prompt`, a trailing ROLE_ASSISTANT cues the model to
    answer; the conversation must then end on a user turn.
    """
    _check_alternation(turns)
    if add_generation_prompt and turns[-1].role != USER:
        raise ConversationFormatError("generation prompt requires the last turn to be user")

    ids = [BOS]
    mask = [False]
    image_slot = None
    if include_image:
        image_slot = len(ids)
        ids.append(IMAGE)
        mask.append(False)
    for turn in turns:
        if turn.role == USER:
            ids.append(ROLE_USER)
            mask.append(False)
            body = encode(turn.text)
            ids.extend(body)
            mask.extend([False] * len(body))
        else:
            ids.append(ROLE_ASSISTANT)
            mask.append(False)
            body = encode(turn.text)
            ids.extend(body)
            mask.extend([True] * len(body))
            ids.append(EOS)
            mask.append(True)
    if add_generation_prompt:
        ids.append(ROLE_ASSISTANT)
        mask.append(False)
    return RenderedSequence(ids=ids, loss_mask=mask, image_slot=image_slot)


def truncate(seq: RenderedSequence, max_len: int) -> RenderedSequence:
    """Keep the prefix of at most `max_len` tokens; refuse to cut the image."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if len(seq.ids) <= max_len:
        return seq
    if seq.image_slot is not None and seq.image_slot >= max_len:
        raise ValueError(
            f"cannot truncate to {max_len}: IMAGE token at index {seq.image_slot} would be cut "
            "while later tokens were kept")
    return RenderedSequence(
        ids=seq.ids[:max_len],
        loss_mask=seq.loss_mask[:max_len],
        image_slot=seq.image_slot,
    )
