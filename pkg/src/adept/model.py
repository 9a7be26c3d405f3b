"""Frozen base LLM: a small pre-norm decoder-only transformer in float64 numpy.

Layers are addressed by 0-based ``layer_idx`` in this module; the early-exit
code talks about 1-based layer numbers (layer ``i`` is ``layer_idx = i - 1``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, Sequence

import numpy as np

from .cost_model import CostLedger, attention_flops, head_flops, projection_flops
from .errors import CacheGap, CacheOverwrite, ContextOverflow, EmptyInput, ShapeError

NORM_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_hidden: int
    d_qkv: int
    n_heads: int
    vocab_size: int = 256
    max_seq: int = 128
    ffn_mult: int = 4

    def __post_init__(self) -> None:
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2")
        if self.d_qkv % self.n_heads:
            raise ValueError("d_qkv must be divisible by n_heads")
        if self.max_seq < 1 or self.d_hidden < 1 or self.vocab_size < 1 or self.ffn_mult < 1:
            raise ValueError("dimensions must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_qkv // self.n_heads

    def as_dict(self) -> dict[str, int]:
        return {
            "n_layers": self.n_layers,
            "d_hidden": self.d_hidden,
            "d_qkv": self.d_qkv,
            "n_heads": self.n_heads,
            "vocab_size": self.vocab_size,
            "max_seq": self.max_seq,
            "ffn_mult": self.ffn_mult,
        }


LAYER_FIELDS = (
    "ln1_g",
    "w_q", "b_q",
    "w_k", "b_k",
    "w_v", "b_v",
    "w_o", "b_o",
    "ln2_g",
    "w_ffn1", "b_ffn1",
    "w_ffn2", "b_ffn2",
)


@dataclass
class LayerWeights:
    ln1_g: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln2_g: np.ndarray
    w_ffn1: np.ndarray
    b_ffn1: np.ndarray
    w_ffn2: np.ndarray
    b_ffn2: np.ndarray

    @property
    def w_kv(self) -> np.ndarray:
        """Joint key/value projection, ``D_h x 2 D_q``."""
        return np.concatenate([self.w_k, self.w_v], axis=1)

    @property
    def b_kv(self) -> np.ndarray:
        return np.concatenate([self.b_k, self.b_v])


@dataclass
class Model:
    config: ModelConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list[LayerWeights]
    lnf_g: np.ndarray
    w_head: np.ndarray
    b_head: np.ndarray

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every weight in the fixed checkpoint order."""
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for i, layer in enumerate(self.layers):
            for name in LAYER_FIELDS:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "lnf_g", self.lnf_g
        yield "w_head", self.w_head
        yield "b_head", self.b_head

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.named_arrays())

    def freeze(self) -> "Model":
        for _, a in self.named_arrays():
            a.flags.writeable = False
        return self


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dq, f = config.d_hidden, config.d_qkv, config.ffn_mult * config.d_hidden
    layer = {
        "ln1_g": (d,),
        "w_q": (d, dq), "b_q": (dq,),
        "w_k": (d, dq), "b_k": (dq,),
        "w_v": (d, dq), "b_v": (dq,),
        "w_o": (dq, d), "b_o": (d,),
        "ln2_g": (d,),
        "w_ffn1": (d, f), "b_ffn1": (f,),
        "w_ffn2": (f, d), "b_ffn2": (d,),
    }
    shapes = {"tok_emb": (config.vocab_size, d), "pos_emb": (config.max_seq, d)}
    for i in range(config.n_layers):
        for name in LAYER_FIELDS:
            shapes[f"layers.{i}.{name}"] = layer[name]
    shapes.update({"lnf_g": (d,), "w_head": (d, config.vocab_size), "b_head": (config.vocab_size,)})
    return shapes


def model_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray]) -> Model:
    shapes = expected_shapes(config)
    for name, shape in shapes.items():
        if name not in arrays:
            raise ShapeError(f"missing weight {name}")
        if arrays[name].shape != shape:
            raise ShapeError(f"{name}: expected {shape}, got {arrays[name].shape}")
    layers = [
        LayerWeights(**{n: arrays[f"layers.{i}.{n}"] for n in LAYER_FIELDS})
        for i in range(config.n_layers)
    ]
    return Model(
        config=config,
        tok_emb=arrays["tok_emb"],
        pos_emb=arrays["pos_emb"],
        layers=layers,
        lnf_g=arrays["lnf_g"],
        w_head=arrays["w_head"],
        b_head=arrays["b_head"],
    )


def init_model(config: ModelConfig, seed: int) -> Model:
    """Scaled-normal init (std 0.02; residual projections scaled by 1/sqrt(2N))."""
    rng = np.random.default_rng(seed)
    resid_std = INIT_STD / math.sqrt(2 * config.n_layers)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arrays[name] = np.ones(shape)
        elif leaf.startswith("b_"):
            arrays[name] = np.zeros(shape)
        elif leaf in ("w_o", "w_ffn2"):
            arrays[name] = rng.normal(0.0, resid_std, size=shape)
        else:
            arrays[name] = rng.normal(0.0, INIT_STD, size=shape)
    return model_from_arrays(config, arrays).freeze()


# --------------------------------------------------------------------------
# tokenizer
# --------------------------------------------------------------------------


def tokenize(text: bytes | str) -> list[int]:
    """Byte-level tokenizer: every byte is its own token id."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    if not text:
        raise EmptyInput("cannot tokenize empty input")
    return list(text)


def detokenize(ids: Sequence[int]) -> str:
    return bytes(int(i) % 256 for i in ids).decode("utf-8", errors="replace")


# --------------------------------------------------------------------------
# dense numerics
# --------------------------------------------------------------------------


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """``gain * x / sqrt(mean(x**2) + eps)`` along the last axis.

    With ``eps == 0`` an all-zero row maps to zeros instead of NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"rms_norm: x has length {x.shape[-1]}, gain has {gain.shape[-1]}")
    ms = np.mean(x * x, axis=-1, keepdims=True) + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(ms > 0, 1.0 / np.sqrt(np.where(ms > 0, ms, 1.0)), 0.0)
    return gain * x * inv


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation, as in GPT-2
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# KV cache
# --------------------------------------------------------------------------


class Provenance(IntEnum):
    EMPTY = 0
    REAL = 1
    SYNTHESIZED = 2


@dataclass
class KVCache:
    """Per-layer key/value rows with a provenance flag per (layer, position).

    Every slot is written at most once. With ``trace=True`` each attention
    read appends ``(layer_idx, reader_position, max_slot_read)`` to
    :attr:`reads`, which tests use to check causality.
    """

    n_layers: int
    max_seq: int
    d_qkv: int
    trace: bool = False
    keys: np.ndarray = field(init=False)
    values: np.ndarray = field(init=False)
    provenance: np.ndarray = field(init=False)
    reads: list[tuple[int, int, int]] = field(init=False, default_factory=list)

    def __post_init__(self) -> None:
        self.keys = np.zeros((self.n_layers, self.max_seq, self.d_qkv))
        self.values = np.zeros((self.n_layers, self.max_seq, self.d_qkv))
        self.provenance = np.zeros((self.n_layers, self.max_seq), dtype=np.int8)

    @classmethod
    def for_model(cls, config: ModelConfig, trace: bool = False) -> "KVCache":
        return cls(config.n_layers, config.max_seq, config.d_qkv, trace=trace)

    def write(
        self,
        layer_idx: int,
        positions: np.ndarray | int,
        k: np.ndarray,
        v: np.ndarray,
        provenance: Provenance = Provenance.REAL,
    ) -> None:
        pos = np.atleast_1d(np.asarray(positions, dtype=np.int64))
        if np.any(self.provenance[layer_idx, pos] != Provenance.EMPTY):
            raise CacheOverwrite(f"layer {layer_idx}: slot already written at {pos.tolist()}")
        self.keys[layer_idx, pos] = np.reshape(k, (len(pos), self.d_qkv))
        self.values[layer_idx, pos] = np.reshape(v, (len(pos), self.d_qkv))
        self.provenance[layer_idx, pos] = provenance

    def read(
        self, layer_idx: int, upto: int, readers: Sequence[int] | None = None, allow_gaps: bool = False
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Keys, values and a validity mask for slots ``0 .. upto``."""
        prov = self.provenance[layer_idx, : upto + 1]
        valid = prov != Provenance.EMPTY
        if not allow_gaps and not np.all(valid):
            missing = np.flatnonzero(~valid).tolist()
            raise CacheGap(f"layer {layer_idx}: empty slots {missing} read at position <= {upto}")
        if self.trace:
            for r in (readers if readers is not None else [upto]):
                self.reads.append((layer_idx, int(r), int(r)))
        return self.keys[layer_idx, : upto + 1], self.values[layer_idx, : upto + 1], valid

    def count(self, provenance: Provenance) -> int:
        return int(np.sum(self.provenance == provenance))

    def length(self) -> int:
        filled = np.flatnonzero(np.any(self.provenance != Provenance.EMPTY, axis=0))
        return int(filled[-1]) + 1 if filled.size else 0

    def copy(self) -> "KVCache":
        out = KVCache(self.n_layers, self.max_seq, self.d_qkv, trace=self.trace)
        out.keys[...] = self.keys
        out.values[...] = self.values
        out.provenance[...] = self.provenance
        out.reads = list(self.reads)
        return out


# --------------------------------------------------------------------------
# attention and decoder layers
# --------------------------------------------------------------------------


def causal_attention(
    q: np.ndarray,
    k_cache: np.ndarray,
    v_cache: np.ndarray,
    position: int,
    n_heads: int,
    valid: np.ndarray | None = None,
) -> np.ndarray:
    """Scaled dot-product attention of one query over cached slots ``<= position``."""
    if k_cache.shape[0] <= position or v_cache.shape[0] <= position:
        raise CacheGap(f"cache holds {k_cache.shape[0]} slots; position {position} needs {position + 1}")
    d = q.shape[-1]
    hd = d // n_heads
    keys = k_cache[: position + 1]
    vals = v_cache[: position + 1]
    keep = np.ones(position + 1, dtype=bool) if valid is None else np.asarray(valid[: position + 1], bool)
    out = np.empty(d)
    for h in range(n_heads):
        sl = slice(h * hd, (h + 1) * hd)
        logits = keys[keep, sl] @ q[sl] / math.sqrt(hd)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        out[sl] = w @ vals[keep, sl]
    return out


def _attend_rows(
    q: np.ndarray, keys: np.ndarray, vals: np.ndarray, positions: np.ndarray, valid: np.ndarray, n_heads: int
) -> np.ndarray:
    n, d = q.shape
    t = keys.shape[0]
    hd = d // n_heads
    qh = q.reshape(n, n_heads, hd)
    kh = keys.reshape(t, n_heads, hd)
    vh = vals.reshape(t, n_heads, hd)
    scores = np.einsum("nhd,thd->hnt", qh, kh) / math.sqrt(hd)
    mask = (np.arange(t)[None, :] <= positions[:, None]) & valid[None, :]
    scores = np.where(mask[None], scores, -np.inf)
    w = softmax(scores, axis=-1)
    return np.einsum("hnt,thd->nhd", w, vh).reshape(n, d)


def kv_project(layer: LayerWeights, x_normed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return x_normed @ layer.w_k + layer.b_k, x_normed @ layer.w_v + layer.b_v


def _ffn(layer: LayerWeights, x: np.ndarray) -> np.ndarray:
    return gelu(x @ layer.w_ffn1 + layer.b_ffn1) @ layer.w_ffn2 + layer.b_ffn2


def decoder_layer_forward(
    model: Model,
    layer_idx: int,
    h: np.ndarray,
    cache: KVCache,
    position: int,
    ledger: CostLedger | None = None,
    allow_gaps: bool = False,
) -> np.ndarray:
    """One token through one pre-norm block; writes its REAL k/v to ``cache``."""
    cfg = model.config
    if h.shape != (cfg.d_hidden,):
        raise ShapeError(f"hidden state must have shape ({cfg.d_hidden},)")
    layer = model.layers[layer_idx]
    x = rms_norm(h, layer.ln1_g)
    q = x @ layer.w_q + layer.b_q
    k, v = kv_project(layer, x)
    cache.write(layer_idx, position, k, v, Provenance.REAL)
    keys, vals, valid = cache.read(layer_idx, position, allow_gaps=allow_gaps)
    a = causal_attention(q, keys, vals, position, cfg.n_heads, valid)
    h1 = h + (a @ layer.w_o + layer.b_o)
    out = h1 + _ffn(layer, rms_norm(h1, layer.ln2_g))
    if ledger is not None:
        ledger.add_counts(projection_flops(cfg))
        ledger.add_counts(attention_flops(cfg, int(valid.sum())))
    return out


def decoder_layer_batch(
    model: Model,
    layer_idx: int,
    h: np.ndarray,
    positions: np.ndarray,
    cache: KVCache,
    ledger: CostLedger | None = None,
    allow_gaps: bool = False,
) -> np.ndarray:
    """Rows of ``h`` (tokens at ``positions``, strictly increasing) through one block.

    All REAL k/v rows of this layer are written before any attention read, so
    every active row sees a complete causal prefix.
    """
    cfg = model.config
    layer = model.layers[layer_idx]
    positions = np.asarray(positions, dtype=np.int64)
    x = rms_norm(h, layer.ln1_g)
    q = x @ layer.w_q + layer.b_q
    k, v = kv_project(layer, x)
    cache.write(layer_idx, positions, k, v, Provenance.REAL)
    upto = int(positions[-1])
    keys, vals, valid = cache.read(layer_idx, upto, readers=positions.tolist(), allow_gaps=allow_gaps)
    a = _attend_rows(q, keys, vals, positions, valid, cfg.n_heads)
    h1 = h + (a @ layer.w_o + layer.b_o)
    out = h1 + _ffn(layer, rms_norm(h1, layer.ln2_g))
    if ledger is not None:
        ledger.add_counts(projection_flops(cfg), times=len(positions))
        csum = np.cumsum(valid)
        ledger.add_counts(attention_flops(cfg, int(csum[positions].sum())))
    return out


def lm_head(model: Model, h: np.ndarray) -> np.ndarray:
    """``h @ W_head + b_head`` (``h`` is already final-normed)."""
    if h.shape[-1] != model.config.d_hidden:
        raise ShapeError("lm_head input has wrong width")
    return h @ model.w_head + model.b_head


def final_logits(model: Model, h: np.ndarray, ledger: CostLedger | None = None) -> np.ndarray:
    out = lm_head(model, rms_norm(h, model.lnf_g))
    if ledger is not None:
        rows = 1 if h.ndim == 1 else h.shape[0]
        ledger.add("head", head_flops(model.config) * rows)
    return out


def embed(model: Model, token_ids: Sequence[int], start: int = 0) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        raise EmptyInput("empty token sequence")
    if start + ids.size > model.config.max_seq:
        raise ContextOverflow(f"{start + ids.size} tokens exceed max_seq={model.config.max_seq}")
    if np.any(ids < 0) or np.any(ids >= model.config.vocab_size):
        raise ShapeError("token id outside vocabulary")
    return model.tok_emb[ids] + model.pos_emb[start : start + ids.size]


@dataclass
class VanillaResult:
    hidden: np.ndarray  # (T, D) final hidden states before the final norm
    logits: np.ndarray  # (T, V)
    cache: KVCache
    ledger: CostLedger
    layer_states: np.ndarray | None = None  # (N + 1, T, D) when requested


def vanilla_prefill(
    model: Model, token_ids: Sequence[int], keep_layer_states: bool = False, trace: bool = False
) -> VanillaResult:
    """Full-depth forward with no early-exit code involved."""
    cfg = model.config
    ledger = CostLedger()
    cache = KVCache.for_model(cfg, trace=trace)
    h = embed(model, token_ids)
    positions = np.arange(h.shape[0])
    states = [h] if keep_layer_states else None
    for li in range(cfg.n_layers):
        h = decoder_layer_batch(model, li, h, positions, cache, ledger)
        if states is not None:
            states.append(h)
    logits = final_logits(model, h, ledger)
    return VanillaResult(h, logits, cache, ledger, None if states is None else np.stack(states))


def vanilla_generate(model: Model, prompt_ids: Sequence[int], max_new: int) -> tuple[list[int], CostLedger]:
    """Greedy decoding at full depth."""
    cfg = model.config
    if len(prompt_ids) + max_new > cfg.max_seq:
        raise ContextOverflow("prompt + generated tokens exceed max_seq")
    res = vanilla_prefill(model, prompt_ids)
    cache, ledger = res.cache, res.ledger
    out: list[int] = []
    nxt = int(np.argmax(res.logits[-1]))
    for step in range(max_new):
        out.append(nxt)
        if step == max_new - 1:
            break
        pos = len(prompt_ids) + step
        h = embed(model, [nxt], start=pos)[0]
        for li in range(cfg.n_layers):
            h = decoder_layer_forward(model, li, h, cache, pos, ledger)
        nxt = int(np.argmax(final_logits(model, h, ledger)))
    return out, ledger
