"""The multimodal architecture at desk scale.

Three parameter families: a patch-based vision encoder (VISION) turning a
64x64 image into 64 patch features, a two-layer MLP connector (CONNECTOR)
projecting them into the LM embedding space, and a pre-norm decoder-only
transformer (LM) with learned absolute positions and an untied output head.

Training-time forwards go through the autodiff ops in :mod:`microvlm.tensor`;
generation uses a plain-numpy incremental path with a per-session KV cache,
cross-checked against the full forward by test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import tokenizer as tok
from .images import IMAGE_SIDE
from .tensor import (
    Tensor, add, concat_rows, embedding, gelu, layer_norm, matmul, reshape,
    scale, softmax, transpose,
)

FAMILIES = ("VISION", "CONNECTOR", "LM")
N_VISUAL_TOKENS = 64
_NEG_INF = -1e30


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = tok.VOCAB_SIZE
    max_seq_len: int = 512
    patch_size: int = 8
    d_vision: int = 96
    n_vision_layers: int = 2
    n_vision_heads: int = 4
    d_vision_ff: int = 384
    connector_hidden: int = 128
    seed: int = 0

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_vision % self.n_vision_heads != 0:
            raise ValueError(
                f"d_vision {self.d_vision} not divisible by n_vision_heads {self.n_vision_heads}")
        if IMAGE_SIDE % self.patch_size != 0:
            raise ValueError(f"patch_size {self.patch_size} does not divide {IMAGE_SIDE}")
        n_patches = (IMAGE_SIDE // self.patch_size) ** 2
        if n_patches != N_VISUAL_TOKENS:
            raise ValueError(
                f"(image side / patch_size)^2 = {n_patches}, must equal {N_VISUAL_TOKENS}")
        if self.vocab_size != tok.VOCAB_SIZE:
            raise ValueError(f"vocab_size must be {tok.VOCAB_SIZE}, got {self.vocab_size}")
        for name in ("d_model", "n_layers", "d_ff", "max_seq_len", "d_vision",
                     "n_vision_layers", "d_vision_ff", "connector_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class ModelBundle:
    """Config plus the named parameter map, each name owned by one family."""
    config: ModelConfig
    params: dict[str, Tensor]
    lineage: list[dict] = field(default_factory=list)

    def family_of(self, name: str) -> str:
        head = name.split(".", 1)[0]
        fam = {"vision": "VISION", "connector": "CONNECTOR", "lm": "LM"}.get(head)
        if fam is None:
            raise KeyError(f"parameter '{name}' belongs to no family")
        return fam

    def names_in_family(self, family: str) -> list[str]:
        if family not in FAMILIES:
            raise KeyError(f"unknown family '{family}', expected one of {FAMILIES}")
        return [n for n in self.params if self.family_of(n) == family]

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass
class MergedSequence:
    """LM-ready embedding rows with aligned token ids and loss mask.

    Visual splice positions carry PAD ids and a false mask, so they are never
    scored as targets.
    """
    embedded: Tensor
    ids: np.ndarray
    loss_mask: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.shape[0])


@dataclass
class DecodePolicy:
    mode: str = "greedy"  # "greedy" | "temperature"
    temperature: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("greedy", "temperature"):
            raise ValueError(f"unknown decode mode '{self.mode}'")
        if self.mode == "temperature" and self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass
class GenerationResult:
    token_ids: list[int]
    text: str
    prompt_length: int


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _param_spec(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Every parameter name with shape and init kind, in creation order."""
    spec: list[tuple[str, tuple[int, ...], str]] = []
    patch_dim = cfg.patch_size * cfg.patch_size * 3

    def block(prefix: str, d: int, d_ff: int):
        spec.extend([
            (f"{prefix}.ln1.g", (d,), "ones"),
            (f"{prefix}.ln1.b", (d,), "zeros"),
            (f"{prefix}.attn.wq", (d, d), "fan_in"),
            (f"{prefix}.attn.bq", (d,), "zeros"),
            (f"{prefix}.attn.wk", (d, d), "fan_in"),
            (f"{prefix}.attn.bk", (d,), "zeros"),
            (f"{prefix}.attn.wv", (d, d), "fan_in"),
            (f"{prefix}.attn.bv", (d,), "zeros"),
            (f"{prefix}.attn.wo", (d, d), "fan_in"),
            (f"{prefix}.attn.bo", (d,), "zeros"),
            (f"{prefix}.ln2.g", (d,), "ones"),
            (f"{prefix}.ln2.b", (d,), "zeros"),
            (f"{prefix}.mlp.w1", (d, d_ff), "fan_in"),
            (f"{prefix}.mlp.b1", (d_ff,), "zeros"),
            (f"{prefix}.mlp.w2", (d_ff, d), "fan_in"),
            (f"{prefix}.mlp.b2", (d,), "zeros"),
        ])

    spec.append(("vision.patch_embed.w", (patch_dim, cfg.d_vision), "fan_in"))
    spec.append(("vision.patch_embed.b", (cfg.d_vision,), "zeros"))
    spec.append(("vision.pos_emb", (N_VISUAL_TOKENS, cfg.d_vision), "embed"))
    for i in range(cfg.n_vision_layers):
        block(f"vision.layers.{i}", cfg.d_vision, cfg.d_vision_ff)
    spec.append(("vision.ln_out.g", (cfg.d_vision,), "ones"))
    spec.append(("vision.ln_out.b", (cfg.d_vision,), "zeros"))

    spec.append(("connector.w1", (cfg.d_vision, cfg.connector_hidden), "fan_in"))
    spec.append(("connector.b1", (cfg.connector_hidden,), "zeros"))
    spec.append(("connector.w2", (cfg.connector_hidden, cfg.d_model), "fan_in"))
    spec.append(("connector.b2", (cfg.d_model,), "zeros"))

    spec.append(("lm.tok_emb", (cfg.vocab_size, cfg.d_model), "embed"))
    spec.append(("lm.pos_emb", (cfg.max_seq_len, cfg.d_model), "embed"))
    for i in range(cfg.n_layers):
        block(f"lm.layers.{i}", cfg.d_model, cfg.d_ff)
    spec.append(("lm.ln_out.g", (cfg.d_model,), "ones"))
    spec.append(("lm.ln_out.b", (cfg.d_model,), "zeros"))
    spec.append(("lm.head.w", (cfg.d_model, cfg.vocab_size), "fan_in"))
    spec.append(("lm.head.b", (cfg.vocab_size,), "zeros"))
    return spec


def init_model(config: ModelConfig, seed: int | None = None) -> ModelBundle:
    """Deterministic scaled-uniform init; same (config, seed) gives identical bytes."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in _param_spec(config):
        if kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            # fan_in scaling: matrices by input dim, embeddings by their width
            fan = shape[0] if kind == "fan_in" else shape[-1]
            bound = 1.0 / math.sqrt(fan)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return ModelBundle(config=config, params=params)


# ---------------------------------------------------------------------------
# taped forward path
# ---------------------------------------------------------------------------

def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b over the last axis, any leading shape."""
    lead = x.shape[:-1]
    flat = reshape(x, (int(np.prod(lead)), x.shape[-1]))
    out = add(matmul(flat, w), b)
    return reshape(out, lead + (w.shape[1],))


def _attention(p: dict[str, Tensor], prefix: str, x: Tensor, n_heads: int,
               causal: bool) -> Tensor:
    b, l, d = x.shape
    dh = d // n_heads
    q = _linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k = _linear(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v = _linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    q = transpose(reshape(q, (b, l, n_heads, dh)), (0, 2, 1, 3))
    k = transpose(reshape(k, (b, l, n_heads, dh)), (0, 2, 1, 3))
    v = transpose(reshape(v, (b, l, n_heads, dh)), (0, 2, 1, 3))
    # scale q rather than the L x L score matrix: same math, smaller arrays
    scores = matmul(scale(q, 1.0 / math.sqrt(dh)), transpose(k, (0, 1, 3, 2)))
    if causal:
        mask = np.triu(np.full((l, l), _NEG_INF), k=1)
        scores = add(scores, Tensor(np.broadcast_to(mask, scores.shape)))
    ctx = matmul(softmax(scores), v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, l, d))
    return _linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _transformer_block(p: dict[str, Tensor], prefix: str, x: Tensor,
                       n_heads: int, causal: bool) -> Tensor:
    h = layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    x = add(x, _attention(p, f"{prefix}.attn", h, n_heads, causal))
    h = layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = _linear(gelu(_linear(h, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"])),
                p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])
    return add(x, h)


def patchify(img: np.ndarray, patch_size: int) -> np.ndarray:
    """Split [64, 64, 3] (or a leading-batch variant) into row-major flat patches."""
    single = img.ndim == 3
    arr = img[None] if single else img
    b, h, w, c = arr.shape
    g = h // patch_size
    out = (arr.reshape(b, g, patch_size, g, patch_size, c)
              .transpose(0, 1, 3, 2, 4, 5)
              .reshape(b, g * g, patch_size * patch_size * c))
    return out[0] if single else out


def encode_image(bundle: ModelBundle, img: np.ndarray) -> Tensor:
    """64 patch features [64 x d_vision] from a normalized 64x64x3 image."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.shape != (IMAGE_SIDE, IMAGE_SIDE, 3):
        raise ValueError(f"expected a ({IMAGE_SIDE}, {IMAGE_SIDE}, 3) image, got {arr.shape}")
    return reshape(encode_images(bundle, arr[None]), (N_VISUAL_TOKENS, bundle.config.d_vision))


def encode_images(bundle: ModelBundle, imgs: np.ndarray) -> Tensor:
    """Batched encoder: [B, 64, 64, 3] -> [B, 64, d_vision]."""
    cfg, p = bundle.config, bundle.params
    patches = Tensor(patchify(np.asarray(imgs, dtype=np.float64), cfg.patch_size))
    x = _linear(patches, p["vision.patch_embed.w"], p["vision.patch_embed.b"])
    x = add(x, p["vision.pos_emb"])
    for i in range(cfg.n_vision_layers):
        x = _transformer_block(p, f"vision.layers.{i}", x, cfg.n_vision_heads, causal=False)
    return layer_norm(x, p["vision.ln_out.g"], p["vision.ln_out.b"])


def project_features(bundle: ModelBundle, features: Tensor) -> Tensor:
    """Per-row connector MLP: [..., 64, d_vision] -> [..., 64, d_model]."""
    p = bundle.params
    if features.shape[-1] != bundle.config.d_vision:
        raise ValueError(
            f"connector expects feature width {bundle.config.d_vision}, "
            f"got {features.shape[-1]}")
    h = gelu(_linear(features, p["connector.w1"], p["connector.b1"]))
    return _linear(h, p["connector.w2"], p["connector.b2"])


def merge_sequence(bundle: ModelBundle, rendered: tok.RenderedSequence,
                   visual: Tensor | None) -> MergedSequence:
    """Embed text tokens and splice the 64 visual rows at the IMAGE slot."""
    p = bundle.params
    ids = np.asarray(rendered.ids, dtype=np.int64)
    mask = np.asarray(rendered.loss_mask, dtype=bool)
    if rendered.image_slot is None:
        if visual is not None:
            raise ValueError("visual tokens supplied but the sequence has no IMAGE slot")
        return MergedSequence(embedded=embedding(p["lm.tok_emb"], ids), ids=ids, loss_mask=mask)
    if visual is None:
        raise ValueError("sequence has an IMAGE slot but no visual tokens were supplied")
    if visual.shape != (N_VISUAL_TOKENS, bundle.config.d_model):
        raise ValueError(
            f"visual tokens must be ({N_VISUAL_TOKENS}, {bundle.config.d_model}), "
            f"got {visual.shape}")
    slot = rendered.image_slot
    parts = []
    if slot > 0:
        parts.append(embedding(p["lm.tok_emb"], ids[:slot]))
    parts.append(visual)
    if slot + 1 < len(ids):
        parts.append(embedding(p["lm.tok_emb"], ids[slot + 1:]))
    filler = np.full(N_VISUAL_TOKENS, tok.PAD, dtype=np.int64)
    merged_ids = np.concatenate([ids[:slot], filler, ids[slot + 1:]])
    merged_mask = np.concatenate([mask[:slot], np.zeros(N_VISUAL_TOKENS, dtype=bool),
                                  mask[slot + 1:]])
    return MergedSequence(embedded=concat_rows(parts), ids=merged_ids, loss_mask=merged_mask)


def forward_lm(bundle: ModelBundle, embedded: Tensor, cache: "KVCache | None" = None) -> Tensor:
    """Decoder logits for an embedded sequence.

    Accepts [L, d] or [B, L, d]. With a cache, rows are treated as the next
    positions of an incremental decode and the taped path is bypassed.
    """
    if cache is not None:
        if embedded.ndim != 2:
            raise ValueError("cached forward expects a 2-D [n, d_model] slab of new rows")
        return Tensor(_forward_incremental(bundle, embedded.data, cache))
    cfg, p = bundle.config, bundle.params
    squeeze = embedded.ndim == 2
    x = reshape(embedded, (1,) + embedded.shape) if squeeze else embedded
    b, l, d = x.shape
    if l > cfg.max_seq_len:
        raise ValueError(f"sequence length {l} exceeds max_seq_len {cfg.max_seq_len}")
    pos = embedding(p["lm.pos_emb"], np.arange(l))
    x = add(x, pos)
    for i in range(cfg.n_layers):
        x = _transformer_block(p, f"lm.layers.{i}", x, cfg.n_heads, causal=True)
    x = layer_norm(x, p["lm.ln_out.g"], p["lm.ln_out.b"])
    logits = _linear(x, p["lm.head.w"], p["lm.head.b"])
    return reshape(logits, (l, cfg.vocab_size)) if squeeze else logits


# ---------------------------------------------------------------------------
# incremental decode path (plain numpy, no tape)
# ---------------------------------------------------------------------------

class KVCache:
    """Per-layer key/value rows, grown one decoded position at a time."""

    def __init__(self, config: ModelConfig):
        dh = config.d_model // config.n_heads
        shape = (config.max_seq_len, config.n_heads, dh)
        self.k = [np.empty(shape) for _ in range(config.n_layers)]
        self.v = [np.empty(shape) for _ in range(config.n_layers)]
        self.length = 0


def _np_ln(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * g + b


def _np_gelu(x: np.ndarray) -> np.ndarray:
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def _np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _forward_incremental(bundle: ModelBundle, x: np.ndarray, cache: KVCache) -> np.ndarray:
    """Append `x` rows ([n, d]) to the cache and return their logits [n, V]."""
    cfg = bundle.config
    p = {name: t.data for name, t in bundle.params.items()}
    n = x.shape[0]
    start = cache.length
    total = start + n
    if total > cfg.max_seq_len:
        raise ValueError(f"sequence length {total} exceeds max_seq_len {cfg.max_seq_len}")
    n_heads = cfg.n_heads
    dh = cfg.d_model // n_heads
    x = x + p["lm.pos_emb"][start:total]
    # mask among the new rows: row i attends to absolute positions <= start + i
    causal = np.triu(np.full((n, n), _NEG_INF), k=1)
    for i in range(cfg.n_layers):
        pre = f"lm.layers.{i}"
        h = _np_ln(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        q = (h @ p[f"{pre}.attn.wq"] + p[f"{pre}.attn.bq"]).reshape(n, n_heads, dh)
        k = (h @ p[f"{pre}.attn.wk"] + p[f"{pre}.attn.bk"]).reshape(n, n_heads, dh)
        v = (h @ p[f"{pre}.attn.wv"] + p[f"{pre}.attn.bv"]).reshape(n, n_heads, dh)
        cache.k[i][start:total] = k
        cache.v[i][start:total] = v
        keys = cache.k[i][:total]
        vals = cache.v[i][:total]
        scores = np.einsum("nhd,thd->hnt", q * (1.0 / math.sqrt(dh)), keys)
        scores[:, :, start:total] += causal
        w = _np_softmax(scores)
        ctx = np.einsum("hnt,thd->nhd", w, vals).reshape(n, cfg.d_model)
        x = x + ctx @ p[f"{pre}.attn.wo"] + p[f"{pre}.attn.bo"]
        h = _np_ln(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        h = _np_gelu(h @ p[f"{pre}.mlp.w1"] + p[f"{pre}.mlp.b1"])
        x = x + h @ p[f"{pre}.mlp.w2"] + p[f"{pre}.mlp.b2"]
    cache.length = total
    x = _np_ln(x, p["lm.ln_out.g"], p["lm.ln_out.b"])
    return x @ p["lm.head.w"] + p["lm.head.b"]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def generate(
    bundle: ModelBundle,
    prompt: tok.RenderedSequence,
    image: np.ndarray | None = None,
    policy: DecodePolicy | None = None,
    max_new: int = 64,
    on_token: Callable[[int], None] | None = None,
) -> GenerationResult:
    """Autoregressive decode until EOS, max_new tokens, or the context fills.

    Greedy ties break toward the lowest token id; temperature sampling is
    seeded and reproducible.
    """
    policy = policy or DecodePolicy()
    policy.validate()
    if max_new < 1:
        raise ValueError(f"max_new must be >= 1, got {max_new}")
    visual = None
    if prompt.image_slot is not None:
        if image is None:
            raise ValueError("prompt contains an IMAGE slot but no image was supplied")
        visual = project_features(bundle, encode_image(bundle, image))
    merged = merge_sequence(bundle, prompt, visual)
    cfg = bundle.config
    if len(merged) >= cfg.max_seq_len:
        raise ValueError(
            f"prompt occupies {len(merged)} positions, needs to be below "
            f"max_seq_len {cfg.max_seq_len} to decode")
    rng = np.random.default_rng(policy.seed) if policy.mode == "temperature" else None
    cache = KVCache(cfg)
    logits = _forward_incremental(bundle, merged.embedded.data, cache)[-1]
    tok_emb = bundle.params["lm.tok_emb"].data
    new_ids: list[int] = []
    for _ in range(max_new):
        if policy.mode == "greedy":
            next_id = int(np.argmax(logits))
        else:
            probs = _np_softmax(logits / policy.temperature)
            next_id = int(rng.choice(cfg.vocab_size, p=probs))
        new_ids.append(next_id)
        if on_token is not None:
            on_token(next_id)
        if next_id == tok.EOS or cache.length >= cfg.max_seq_len:
            break
        logits = _forward_incremental(bundle, tok_emb[next_id][None], cache)[-1]
    return GenerationResult(token_ids=new_ids, text=tok.decode(new_ids),
                           prompt_length=len(merged))
