"""Transformer encoder with Houlsby adapters, freezing and ablation.

Layer layout (post-LN, DistilBERT style)::

    x = LN(tok_emb + pos_emb [+ seg_emb])
    for each layer:
        h = MHA(x);  h = adapter_attn(h);  x = LN(x + h)
        h = FFN(x);  h = adapter_ffn(h);   x = LN(x + h)

An adapter maps a sublayer output ``h`` to ``h + gelu(h W_down + b_down) W_up + b_up``
and is skipped entirely for layers outside ``AdapterConfig.active_layers``.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .numeric import MASK_VALUE
from .params import ParameterStore

ADAPTER_SETS = ("shared", "query", "document")
SITES = ("attention", "ffn")
MODES = ("finetune-all", "adapter-tune", "head-only")


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    hidden_dim: int = 32
    num_heads: int = 2
    ffn_dim: int = 64
    vocab_size: int = 100
    max_seq_len: int = 64
    num_segments: int = 0
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"EncoderConfig.{name} must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AdapterConfig:
    reduction_factor: int = 16
    placement: tuple[str, ...] = SITES
    active_layers: tuple[int, ...] | None = None  # None: every layer
    adapter_sets: tuple[str, ...] = ("shared",)
    train_layernorms: bool = True
    train_lm_head: bool = True
    split_head: bool = False

    def __post_init__(self):
        if self.reduction_factor < 1:
            raise ValueError("reduction_factor must be >= 1")
        bad = set(self.placement) - set(SITES)
        if bad:
            raise ValueError(f"unknown adapter placement {sorted(bad)}")
        bad = set(self.adapter_sets) - set(ADAPTER_SETS)
        if bad:
            raise ValueError(f"unknown adapter sets {sorted(bad)}")
        if set(self.adapter_sets) not in ({"shared"}, {"query", "document"}):
            raise ValueError("adapter_sets must be ('shared',) or ('query', 'document')")
        object.__setattr__(self, "placement", tuple(s for s in SITES if s in self.placement))
        if self.active_layers is not None:
            object.__setattr__(self, "active_layers", tuple(sorted(set(self.active_layers))))

    @classmethod
    def bi(cls, **kw) -> "AdapterConfig":
        return cls(adapter_sets=("query", "document"), **kw)

    @property
    def bi_adapter(self) -> bool:
        return "query" in self.adapter_sets

    def bottleneck(self, hidden_dim: int) -> int:
        r = hidden_dim // self.reduction_factor
        if r < 1:
            raise ValueError(
                f"reduction factor {self.reduction_factor} leaves no bottleneck for d={hidden_dim}"
            )
        return r

    def layers(self, num_layers: int) -> tuple[int, ...]:
        if self.active_layers is None:
            return tuple(range(num_layers))
        for i in self.active_layers:
            if not 0 <= i < num_layers:
                raise ValueError(f"active layer {i} outside [0, {num_layers})")
        return self.active_layers

    def set_for(self, side: str) -> str:
        """Adapter set used to encode ``side`` ('query' or 'document')."""
        return side if self.bi_adapter else "shared"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["placement"] = list(self.placement)
        d["adapter_sets"] = list(self.adapter_sets)
        d["active_layers"] = None if self.active_layers is None else list(self.active_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        d = dict(d)
        d["placement"] = tuple(d["placement"])
        d["adapter_sets"] = tuple(d["adapter_sets"])
        if d.get("active_layers") is not None:
            d["active_layers"] = tuple(d["active_layers"])
        return cls(**d)


@dataclass
class TokenSequence:
    ids: np.ndarray
    mask: np.ndarray = field(default=None)
    segments: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.ones(len(self.ids), dtype=np.int64) if self.mask is None else np.asarray(self.mask, dtype=np.int64)
        if self.mask.shape != self.ids.shape:
            raise ValueError("mask length must equal ids length")
        if self.segments is not None:
            self.segments = np.asarray(self.segments, dtype=np.int64)

    def __len__(self):
        return len(self.ids)

    def truncate(self, n: int) -> "TokenSequence":
        if len(self) <= n:
            return self
        seg = None if self.segments is None else self.segments[:n]
        return TokenSequence(self.ids[:n], self.mask[:n], seg)


def collate(seqs: Sequence[TokenSequence], max_len: int):
    """Pad sequences into ``(ids, mask, segments)`` arrays of shape (B, n).

    Over-long sequences are truncated to ``max_len``; ``n`` is at least 1 so
    empty inputs still produce a (fully masked) position.
    """
    seqs = [s.truncate(max_len) for s in seqs]
    n = max([1] + [len(s) for s in seqs])
    ids = np.zeros((len(seqs), n), dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=np.int64)
    segs = np.zeros((len(seqs), n), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.ids
        mask[i, : len(s)] = s.mask
        if s.segments is not None:
            segs[i, : len(s)] = s.segments
    return ids, mask, segs


# -- parameter inventory ----------------------------------------------------


def backbone_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.hidden_dim, config.ffn_dim
    shapes = {
        "embeddings.token": (config.vocab_size, d),
        "embeddings.position": (config.max_seq_len, d),
    }
    if config.num_segments:
        shapes["embeddings.segment"] = (config.num_segments, d)
    shapes["embeddings.ln.gain"] = (d,)
    shapes["embeddings.ln.bias"] = (d,)
    for i in range(config.num_layers):
        p = f"layers.{i}"
        for m in ("q", "k", "v", "out"):
            shapes[f"{p}.attn.{m}.weight"] = (d, d)
            shapes[f"{p}.attn.{m}.bias"] = (d,)
        shapes[f"{p}.attn.ln.gain"] = (d,)
        shapes[f"{p}.attn.ln.bias"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, f)
        shapes[f"{p}.ffn.b1"] = (f,)
        shapes[f"{p}.ffn.w2"] = (f, d)
        shapes[f"{p}.ffn.b2"] = (d,)
        shapes[f"{p}.ffn.ln.gain"] = (d,)
        shapes[f"{p}.ffn.ln.bias"] = (d,)
    return shapes


def adapter_prefix(adapter_set: str, layer: int, site: str) -> str:
    return f"adapters.{adapter_set}.{layer}.{site}"


def adapter_shapes(config: EncoderConfig, adapters: AdapterConfig) -> dict[str, tuple[int, ...]]:
    d = config.hidden_dim
    r = adapters.bottleneck(d)
    shapes = {}
    for s in adapters.adapter_sets:
        for i in adapters.layers(config.num_layers):
            for site in adapters.placement:
                p = adapter_prefix(s, i, site)
                shapes[f"{p}.down.weight"] = (d, r)
                shapes[f"{p}.down.bias"] = (r,)
                shapes[f"{p}.up.weight"] = (r, d)
                shapes[f"{p}.up.bias"] = (d,)
    return shapes


def init_backbone(config: EncoderConfig, seed: int = 0, init_std: float = 0.02,
                  embedding_std: float | None = None) -> ParameterStore:
    """Randomly initialised backbone standing in for a pretrained PLM.

    Weight matrices ~ N(0, init_std^2); token embeddings ~ N(0, embedding_std^2)
    with ``embedding_std`` defaulting to 1/sqrt(d), so token vectors have
    roughly unit norm and dominate the position embeddings; biases 0;
    layer-norm gains 1.  All parameters start trainable.
    """
    if embedding_std is None:
        embedding_std = 1.0 / math.sqrt(config.hidden_dim)
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for name, shape in backbone_shapes(config).items():
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif name == "embeddings.token":
            value = rng.normal(0.0, embedding_std, shape)
        elif len(shape) == 2:
            value = rng.normal(0.0, init_std, shape)
        else:
            value = np.zeros(shape)
        store.add(name, value)
    return store


def init_adapters(store: ParameterStore, config: EncoderConfig, adapters: AdapterConfig,
                  seed: int = 0) -> None:
    """Add adapters in their identity state: W_down ~ N(0, 0.01^2), W_up = 0, biases = 0.

    Existing adapter parameters are replaced.
    """
    rng = np.random.default_rng(seed)
    for name in [n for n in store.names() if n.startswith("adapters.")]:
        store.remove(name)
    for name, shape in adapter_shapes(config, adapters).items():
        if name.endswith("down.weight"):
            value = rng.normal(0.0, 0.01, shape)
        else:
            value = np.zeros(shape)
        store.add(name, value)


# -- freezing / accounting --------------------------------------------------

_LAYER_RE = re.compile(r"^(?:layers|adapters\.\w+)\.(\d+)\.")


def _layer_of(name: str) -> int | None:
    m = _LAYER_RE.match(name)
    return int(m.group(1)) if m else None


def is_head_param(name: str) -> bool:
    return name.startswith("head.") or name.startswith("cls.")


def select_trainable(names, adapters: AdapterConfig, mode: str, num_layers: int) -> set[str]:
    if mode not in MODES:
        raise ValueError(f"unknown training mode {mode!r}; expected one of {MODES}")
    names = list(names)
    if mode == "finetune-all":
        return set(names)
    if mode == "head-only":
        return {n for n in names if is_head_param(n)}
    active = set(adapters.layers(num_layers))
    chosen = set()
    for n in names:
        layer = _layer_of(n)
        if n.startswith("adapters."):
            if layer in active:
                chosen.add(n)
        elif adapters.train_layernorms and n.startswith("layers.") and ".ln." in n:
            if layer in active:
                chosen.add(n)
        elif adapters.train_lm_head and is_head_param(n):
            chosen.add(n)
    return chosen


def set_trainable(store: ParameterStore, adapters: AdapterConfig, mode: str, num_layers: int) -> None:
    chosen = select_trainable(store.names(), adapters, mode, num_layers)
    for n in store.names():
        store.trainable[n] = n in chosen


class ParamCount(NamedTuple):
    trainable: int
    total: int

    @property
    def fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    @property
    def percent(self) -> float:
        return 100.0 * self.fraction


def count_shapes(shapes: dict[str, tuple[int, ...]], trainable) -> ParamCount:
    trainable = set(trainable)
    total = sum(math.prod(s) for s in shapes.values())
    tr = sum(math.prod(s) for n, s in shapes.items() if n in trainable)
    return ParamCount(tr, total)


def count_params(store: ParameterStore) -> ParamCount:
    shapes = {n: store[n].shape for n in store.names()}
    return count_shapes(shapes, store.trainable_names())


def ablate(adapters: AdapterConfig, remove_prefix: int, num_layers: int) -> AdapterConfig:
    """Drop adapters from layers ``0 .. remove_prefix-1``."""
    if not 0 <= remove_prefix <= num_layers:
        raise ValueError(f"remove_prefix {remove_prefix} outside [0, {num_layers}]")
    return replace(adapters, active_layers=tuple(range(remove_prefix, num_layers)))


# -- forward ----------------------------------------------------------------


class Encoder:
    """Forward pass over a :class:`ParameterStore`.

    Methods accept batched hidden states of shape (B, n, d); ``mask`` is a
    (B, n) array of 0/1.
    """

    def __init__(self, config: EncoderConfig, adapters: AdapterConfig | None, store: ParameterStore):
        self.config = config
        self.adapters = adapters
        self.store = store

    def p(self, name: str) -> Tensor:
        return self.store.tensor(name)

    def _check_layer(self, layer: int):
        if not 0 <= layer < self.config.num_layers:
            raise IndexError(f"layer {layer} outside [0, {self.config.num_layers})")

    def _adapter_active(self, layer: int, site: str) -> bool:
        a = self.adapters
        return (
            a is not None
            and site in a.placement
            and layer in a.layers(self.config.num_layers)
        )

    def embed(self, ids: np.ndarray, segments: np.ndarray | None = None) -> Tensor:
        n = ids.shape[-1]
        x = ad.embedding(self.p("embeddings.token"), ids) + self.p("embeddings.position")[:n]
        if self.config.num_segments:
            seg = np.zeros_like(ids) if segments is None else segments
            x = x + ad.embedding(self.p("embeddings.segment"), seg)
        return ad.layer_norm(x, self.p("embeddings.ln.gain"), self.p("embeddings.ln.bias"),
                             self.config.layer_norm_eps)

    def adapter_forward(self, h: Tensor, layer: int, adapter_set: str, site: str = "attention") -> Tensor:
        if adapter_set not in ADAPTER_SETS or (
            self.adapters is not None and adapter_set not in self.adapters.adapter_sets
        ):
            raise KeyError(f"unknown adapter set {adapter_set!r}")
        if not self._adapter_active(layer, site):
            return ad.as_tensor(h)
        p = adapter_prefix(adapter_set, layer, site)
        z = ad.gelu(ad.matmul(h, self.p(f"{p}.down.weight")) + self.p(f"{p}.down.bias"))
        return h + (ad.matmul(z, self.p(f"{p}.up.weight")) + self.p(f"{p}.up.bias"))

    def attention_sublayer(self, x: Tensor, layer: int, mask: np.ndarray | None = None) -> Tensor:
        """Multi-head self-attention followed by the output projection (no residual)."""
        self._check_layer(layer)
        x = ad.as_tensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
            mask = None if mask is None else np.asarray(mask)[None]
        B, n, d = x.shape
        H, dk = self.config.num_heads, self.config.head_dim
        pre = f"layers.{layer}.attn"

        def heads(t):
            return t.reshape(B, n, H, dk).transpose(0, 2, 1, 3)

        q = heads(ad.matmul(x, self.p(f"{pre}.q.weight")) + self.p(f"{pre}.q.bias"))
        k = heads(ad.matmul(x, self.p(f"{pre}.k.weight")) + self.p(f"{pre}.k.bias"))
        v = heads(ad.matmul(x, self.p(f"{pre}.v.weight")) + self.p(f"{pre}.v.bias"))
        logits = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
        additive = None
        if mask is not None:
            additive = np.where(np.asarray(mask)[:, None, None, :] > 0, 0.0, MASK_VALUE)
        attn = ad.softmax(logits, additive)
        ctx = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, n, d)
        out = ad.matmul(ctx, self.p(f"{pre}.out.weight")) + self.p(f"{pre}.out.bias")
        return out.reshape(n, d) if squeeze else out

    def ffn_sublayer(self, x: Tensor, layer: int) -> Tensor:
        self._check_layer(layer)
        pre = f"layers.{layer}.ffn"
        h = ad.gelu(ad.matmul(x, self.p(f"{pre}.w1")) + self.p(f"{pre}.b1"))
        return ad.matmul(h, self.p(f"{pre}.w2")) + self.p(f"{pre}.b2")

    def _residual_norm(self, x, h, name):
        return ad.layer_norm(x + h, self.p(f"{name}.ln.gain"), self.p(f"{name}.ln.bias"),
                             self.config.layer_norm_eps)

    def attention_layer(self, x, layer: int, mask=None, adapter_set: str | None = None) -> Tensor:
        h = self.attention_sublayer(x, layer, mask)
        if adapter_set is not None:
            h = self.adapter_forward(h, layer, adapter_set, "attention")
        return self._residual_norm(x, h, f"layers.{layer}.attn")

    def ffn_layer(self, x, layer: int, adapter_set: str | None = None) -> Tensor:
        h = self.ffn_sublayer(x, layer)
        if adapter_set is not None:
            h = self.adapter_forward(h, layer, adapter_set, "ffn")
        return self._residual_norm(x, h, f"layers.{layer}.ffn")

    def encode_batch(self, ids, mask, adapter_set: str | None = "shared", segments=None) -> Tensor:
        ids = np.asarray(ids)
        mask = np.asarray(mask)
        if adapter_set is not None and self.adapters is not None and adapter_set not in self.adapters.adapter_sets:
            raise KeyError(f"unknown adapter set {adapter_set!r}")
        if self.adapters is None:
            adapter_set = None
        n = self.config.max_seq_len
        ids, mask = ids[:, :n], mask[:, :n]
        segments = None if segments is None else np.asarray(segments)[:, :n]
        x = self.embed(ids, segments)
        for layer in range(self.config.num_layers):
            x = self.attention_layer(x, layer, mask, adapter_set)
            x = self.ffn_layer(x, layer, adapter_set)
        return x

    def encode(self, seq: TokenSequence, adapter_set: str | None = "shared") -> Tensor:
        """Hidden states (n, d) for one sequence; truncated to ``max_seq_len``."""
        ids, mask, seg = collate([seq], self.config.max_seq_len)
        out = self.encode_batch(ids, mask, adapter_set, seg if seq.segments is not None else None)
        return out.reshape(out.shape[1], out.shape[2])
