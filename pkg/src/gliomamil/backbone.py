"""Hierarchical multi-task MIL network over bags of patch features.

Topology: shared stem and attention blocks, then a molecular branch (three
marker heads coupled through the label graph) and a histology branch (NMP
head). The glioma head reads the concatenated branch features.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError, FormatError, IngestionError
from .graph import CooccurrenceMatrix, GraphParams, gcn_forward
from .who import MarkerLabels

MARKER_TASKS = ("idh", "1p19q", "cdkn")
TASKS = MARKER_TASKS + ("nmp",)

ModelParams = dict  # ordered name -> Tensor


@dataclass
class PatchBag:
    patch_features: np.ndarray
    labels: MarkerLabels
    case_id: str

    def __post_init__(self):
        f = np.asarray(self.patch_features, dtype=np.float64)
        if f.ndim != 2:
            raise IngestionError(f"patch features must be 2-D, got shape {f.shape}")
        self.patch_features = f

    @property
    def n_patches(self) -> int:
        return self.patch_features.shape[0]


@dataclass(frozen=True)
class BackboneConfig:
    """Network sizes. Defaults are desk scale; see :meth:`full_scale`."""

    N: int = 64
    d_in: int = 16
    d_model: int = 32
    n_blocks_shared: int = 2
    n_blocks_branch: int = 1
    n_heads: int = 4
    d_ff: int | None = None
    d_attn: int | None = None
    alpha: float = 0.1
    init_seed: int = 0

    def __post_init__(self):
        if self.N < 1 or self.d_in < 1 or self.d_model < 1:
            raise ConfigError("N, d_in and d_model must be positive")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.n_blocks_shared < 0 or self.n_blocks_branch < 0:
            raise ConfigError("block counts must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")

    @classmethod
    def full_scale(cls, d_in: int = 1024, **kw) -> "BackboneConfig":
        return cls(N=2500, d_in=d_in, d_model=512, **kw)

    @property
    def ff_width(self) -> int:
        return self.d_ff or 2 * self.d_model

    @property
    def attn_width(self) -> int:
        return self.d_attn or self.d_model


@dataclass
class ModelOutputs:
    logits_idh: Tensor
    logits_1p19q: Tensor
    logits_cdkn: Tensor
    logits_nmp: Tensor
    logits_glioma: Tensor
    decision_weights: dict[str, Tensor]
    f_in: Tensor
    f_out: Tensor
    pooled: dict[str, Tensor] = field(default_factory=dict)

    def logits(self, task: str) -> Tensor:
        return getattr(self, f"logits_{task}")


# ---------------------------------------------------------------- padding


def pad_bag(bag: PatchBag | np.ndarray, N: int, seed: int = 0) -> np.ndarray:
    """Align a bag to exactly N rows.

    Short bags repeat their patches cyclically; long bags are shuffled with
    a seeded permutation and truncated to the first N.
    """
    feats = bag.patch_features if isinstance(bag, PatchBag) else np.asarray(bag, dtype=np.float64)
    return feats[pad_indices(feats.shape[0], N, seed)]


def pad_indices(n: int, N: int, seed: int = 0) -> np.ndarray:
    """Source row for each of the N padded rows."""
    if n < 1:
        raise IngestionError("cannot pad an empty bag")
    if n >= N:
        return np.random.default_rng(seed).permutation(n)[:N]
    return np.arange(N) % n


def bag_seed(case_id: str, seed: int) -> int:
    return (zlib.crc32(case_id.encode("utf-8")) ^ (seed * 0x9E3779B1)) & 0xFFFFFFFF


# ---------------------------------------------------------------- parameters


def init_params(config: BackboneConfig) -> ModelParams:
    rng = np.random.default_rng(config.init_seed)
    d, h, ff = config.d_model, config.attn_width, config.ff_width
    params: ModelParams = {}

    def dense(name, fan_in, fan_out):
        params[f"{name}.W"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)), True, f"{name}.W")
        params[f"{name}.b"] = Tensor(np.zeros(fan_out), True, f"{name}.b")

    def norm(name, width):
        params[f"{name}.g"] = Tensor(np.ones(width), True, f"{name}.g")
        params[f"{name}.b"] = Tensor(np.zeros(width), True, f"{name}.b")

    def block(prefix):
        norm(f"{prefix}.ln1", d)
        dense(f"{prefix}.qkv", d, 3 * d)
        dense(f"{prefix}.proj", d, d)
        norm(f"{prefix}.ln2", d)
        dense(f"{prefix}.ff1", d, ff)
        dense(f"{prefix}.ff2", ff, d)

    dense("stem", config.d_in, d)
    for i in range(config.n_blocks_shared):
        block(f"shared.{i}")
    for branch in ("mol", "hist"):
        for i in range(config.n_blocks_branch):
            block(f"{branch}.{i}")
    for task in TASKS:
        dense(f"pool.{task}.V", d, h)
        dense(f"pool.{task}.U", d, h)
        dense(f"pool.{task}.w", h, 1)
    params["graph.W_g"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)), True, "graph.W_g")
    for task in TASKS:
        dense(f"head.{task}", d, 2)
    dense("head.glioma.hidden", 4 * d, d)
    dense("head.glioma.out", d, 4)
    return params


def _need(params: Mapping[str, Tensor], name: str) -> Tensor:
    try:
        return params[name]
    except KeyError:
        raise ContractError(f"parameter '{name}' is not initialized") from None


def linear(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    """Row-wise affine map of a 2-D tensor."""
    return ad.add_bias(ad.matmul(x, _need(params, f"{name}.W")), _need(params, f"{name}.b"))


# ---------------------------------------------------------------- layers
#
# Layers take either a single bag (N, d) or a batch (B, N, d). Row-wise maps
# run on the folded (B*N, d) view; attention uses stacked 3-D products.


def _fold(x: Tensor) -> tuple[Tensor, int, int]:
    if x.data.ndim == 2:
        return x, 1, x.shape[0]
    b, n, d = x.shape
    return ad.reshape(x, (b * n, d)), b, n


def embed_patches(padded, params: Mapping[str, Tensor]) -> Tensor:
    """Shared stem: ReLU(X W + b)."""
    x = padded if isinstance(padded, Tensor) else Tensor(padded)
    w = _need(params, "stem.W")
    if x.data.ndim not in (2, 3) or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"embed_patches: input {x.shape} vs stem weight {w.shape}")
    flat, b, n = _fold(x)
    out = ad.relu(linear(flat, params, "stem"))
    return out if x.data.ndim == 2 else ad.reshape(out, (b, n, w.shape[1]))


def attention_block(x: Tensor, params: Mapping[str, Tensor], prefix: str, n_heads: int) -> Tensor:
    """Pre-norm multi-head self-attention and feed-forward, each with a residual."""
    flat, b, n = _fold(x)
    d = flat.shape[1]
    if d % n_heads:
        raise DimensionError(f"d_model={d} not divisible by n_heads={n_heads}")
    dh = d // n_heads
    h = ad.layer_norm(flat, _need(params, f"{prefix}.ln1.g"), _need(params, f"{prefix}.ln1.b"))
    qkv = ad.reshape(linear(h, params, f"{prefix}.qkv"), (b, n, 3, n_heads, dh))
    qkv = ad.reshape(ad.transpose(qkv, (2, 0, 3, 1, 4)), (3, b * n_heads, n, dh))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dh))
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
    ctx = ad.reshape(ad.transpose(ad.reshape(ctx, (b, n_heads, n, dh)), (0, 2, 1, 3)), (b * n, d))
    flat = flat + linear(ctx, params, f"{prefix}.proj")
    h = ad.layer_norm(flat, _need(params, f"{prefix}.ln2.g"), _need(params, f"{prefix}.ln2.b"))
    flat = flat + linear(ad.relu(linear(h, params, f"{prefix}.ff1")), params, f"{prefix}.ff2")
    return flat if x.data.ndim == 2 else ad.reshape(flat, (b, n, d))


def attention_pool(x: Tensor, params: Mapping[str, Tensor], task: str) -> tuple[Tensor, Tensor]:
    """Gated-attention pooling; returns (pooled feature, decision weights).

    For a batch the results are ``(B, d)`` and ``(B, N)``.
    """
    flat, b, n = _fold(x)
    d = flat.shape[1]
    gate = ad.tanh(linear(flat, params, f"pool.{task}.V")) * ad.sigmoid(linear(flat, params, f"pool.{task}.U"))
    scores = ad.reshape(linear(gate, params, f"pool.{task}.w"), (b, n))
    weights = ad.softmax(scores, axis=-1)
    pooled = ad.matmul(ad.reshape(weights, (b, 1, n)), ad.reshape(flat, (b, n, d)))
    if x.data.ndim == 2:
        return ad.reshape(pooled, (d,)), ad.reshape(weights, (n,))
    return ad.reshape(pooled, (b, d)), weights


@dataclass
class BatchOutputs:
    """Forward results for a batch; row ``i`` of every tensor belongs to bag ``i``."""

    logits: dict[str, Tensor]
    decision_weights: dict[str, Tensor]
    f_in: Tensor
    f_out: Tensor
    pooled: dict[str, Tensor]

    def __len__(self) -> int:
        return self.f_out.shape[0]

    def bag(self, i: int) -> ModelOutputs:
        lg = {t: self.logits[t][i] for t in TASKS + ("glioma",)}
        return ModelOutputs(
            lg["idh"], lg["1p19q"], lg["cdkn"], lg["nmp"], lg["glioma"],
            {t: w[i] for t, w in self.decision_weights.items()},
            self.f_in[i], self.f_out[i],
            {t: p[i] for t, p in self.pooled.items()},
        )


def forward_batch(padded, params: Mapping[str, Tensor], config: BackboneConfig, cooc: CooccurrenceMatrix) -> BatchOutputs:
    """Run the network on a stack of padded bags, shape (B, N, d_in)."""
    x = padded if isinstance(padded, Tensor) else Tensor(padded)
    if x.data.ndim != 3:
        raise DimensionError(f"forward_batch expects (B, N, d_in), got {x.shape}")
    if x.shape[1] != config.N:
        raise DimensionError(f"bag has {x.shape[1]} rows, config expects N={config.N}")
    b, d = x.shape[0], config.d_model
    x = embed_patches(x, params)
    for i in range(config.n_blocks_shared):
        x = attention_block(x, params, f"shared.{i}", config.n_heads)
    mol, hist = x, x
    for i in range(config.n_blocks_branch):
        mol = attention_block(mol, params, f"mol.{i}", config.n_heads)
        hist = attention_block(hist, params, f"hist.{i}", config.n_heads)

    pooled, weights = {}, {}
    for task in MARKER_TASKS:
        pooled[task], weights[task] = attention_pool(mol, params, task)
    pooled["nmp"], weights["nmp"] = attention_pool(hist, params, "nmp")

    f_in = ad.transpose(ad.stack([pooled[t] for t in MARKER_TASKS]), (1, 0, 2))
    f_out = gcn_forward(f_in, cooc, GraphParams(_need(params, "graph.W_g"), config.alpha))
    logits = {t: linear(f_out[:, i, :], params, f"head.{t}") for i, t in enumerate(MARKER_TASKS)}
    logits["nmp"] = linear(pooled["nmp"], params, "head.nmp")
    fused = ad.concat([ad.reshape(f_out, (b, 3 * d)), pooled["nmp"]], axis=1)
    hidden = ad.relu(linear(fused, params, "head.glioma.hidden"))
    logits["glioma"] = linear(hidden, params, "head.glioma.out")
    return BatchOutputs(logits, weights, f_in, f_out, pooled)


def forward(padded, params: Mapping[str, Tensor], config: BackboneConfig, cooc: CooccurrenceMatrix) -> ModelOutputs:
    """Run the full network on one padded bag of shape (N, d_in)."""
    x = padded if isinstance(padded, Tensor) else Tensor(padded)
    if x.data.ndim != 2:
        raise DimensionError(f"forward expects one (N, d_in) bag, got {x.shape}")
    return forward_batch(ad.reshape(x, (1,) + x.shape), params, config, cooc).bag(0)


def pad_batch(bags, config: BackboneConfig, seed: int = 0) -> np.ndarray:
    return np.stack([pad_bag(bag, config.N, bag_seed(bag.case_id, seed)) for bag in bags])


def forward_bag(bag: PatchBag, params, config: BackboneConfig, cooc: CooccurrenceMatrix, seed: int = 0) -> ModelOutputs:
    return forward(pad_bag(bag, config.N, bag_seed(bag.case_id, seed)), params, config, cooc)


# ---------------------------------------------------------------- checkpoints
#
# Flat sequence of entries, each: u32 name length, UTF-8 name, u32 rank,
# rank x u64 dims, then prod(dims) little-endian float64 values.


def dump_params(params: Mapping[str, Tensor | np.ndarray]) -> bytes:
    out = bytearray()
    for name, t in params.items():
        arr = np.ascontiguousarray(getattr(t, "data", t), dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def parse_params(buf: bytes) -> dict[str, np.ndarray]:
    result: dict[str, np.ndarray] = {}
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"checkpoint truncated while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        start = pos
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("checkpoint entry name is not UTF-8", start + 4) from None
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > 8:
            raise FormatError(f"implausible tensor rank {rank}", pos - 4)
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * count, f"payload of '{name}'"), dtype="<f8").astype(np.float64)
        if name in result:
            raise FormatError(f"duplicate checkpoint entry '{name}'", start)
        result[name] = data.reshape(dims)
    return result


def save_params(path, params: Mapping[str, Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_params(params))


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        arrays = parse_params(fh.read())
    return {name: Tensor(arr, True, name) for name, arr in arrays.items()}
