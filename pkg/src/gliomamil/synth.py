"""Synthetic patch bags with planted marker signals and copula-correlated labels.

Labels come from thresholding a correlated Gaussian vector (one latent per
marker). Each bag hides a minority of "diagnostic" patches that carry fixed
orthogonal signal directions for the markers present; the rest is noise.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize, stats

from .backbone import PatchBag
from .errors import ConfigError, FormatError, IngestionError, ValidationError
from .graph import CooccurrenceMatrix
from .who import GliomaClass, MarkerLabels, classify

LABELS = ("idh", "codel", "cdkn", "nmp")
# Signal direction index per planted state. IDH is planted for the wildtype
# state, the one paired with NMP by the confidence constraint.
SIGNAL_AXES = {"idh_wt": 0, "codel": 1, "cdkn": 2, "nmp": 3}
SPLITS = {"train": 0, "val": 1, "test": 2}

MAGIC = b"MILB"
VERSION = 1


def _default_correlation() -> dict[str, float]:
    return {"idh-codel": 0.6, "idh-cdkn": -0.3, "idh-nmp": -0.5, "codel-cdkn": -0.2, "codel-nmp": -0.2, "cdkn-nmp": 0.3}


@dataclass(frozen=True)
class SynthConfig:
    n_cases: int = 600
    bag_size_range: tuple[int, int] = (16, 96)
    d_in: int = 16
    marginals: dict[str, float] = field(default_factory=lambda: {"idh": 0.5, "codel": 0.3, "cdkn": 0.35, "nmp": 0.5})
    correlation: dict[str, float] = field(default_factory=_default_correlation)
    signal_strength: float = 2.0
    noise_sigma: float = 1.0
    planted_fraction: tuple[float, float] = (0.1, 0.3)
    co_plant: float = 1.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.bag_size_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"bag size range {self.bag_size_range} invalid")
        if self.d_in < len(SIGNAL_AXES):
            raise ConfigError(f"d_in must be at least {len(SIGNAL_AXES)} to hold the signal directions")
        if set(self.marginals) != set(LABELS):
            raise ConfigError(f"marginals must cover exactly {LABELS}")
        for k, p in self.marginals.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"marginal {k}={p} outside [0, 1]")
        if self.signal_strength < 0 or self.noise_sigma < 0:
            raise ConfigError("signal_strength and noise_sigma must be non-negative")
        flo, fhi = self.planted_fraction
        if not 0.0 <= flo <= fhi <= 1.0:
            raise ConfigError("planted fraction range must satisfy 0 <= lo <= hi <= 1")
        if not 0.0 <= self.co_plant <= 1.0:
            raise ConfigError("co_plant must lie in [0, 1]")
        if self.n_cases < 0:
            raise ConfigError("n_cases must be non-negative")
        r = self.correlation_matrix()
        if np.linalg.eigvalsh(r).min() < -1e-10:
            raise ConfigError("latent correlation matrix is not positive semi-definite")

    def correlation_matrix(self) -> np.ndarray:
        r = np.eye(4)
        for key, rho in self.correlation.items():
            try:
                a, b = key.split("-")
                i, j = LABELS.index(a), LABELS.index(b)
            except ValueError:
                raise ConfigError(f"bad correlation key {key!r}; use e.g. 'idh-codel'") from None
            if i == j or not -1.0 <= rho <= 1.0:
                raise ConfigError(f"correlation {key}={rho} invalid")
            r[i, j] = r[j, i] = rho
        return r

    def echo(self) -> list[str]:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, dict):
                for k, v in sorted(value.items()):
                    lines.append(f"{key}.{k}={v!r}")
            else:
                lines.append(f"{key}={value!r}")
        return lines


# ---------------------------------------------------------------- label model


def psd_cholesky(r: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Lower Cholesky factor that tolerates singular PSD matrices (zero pivots)."""
    n = r.shape[0]
    L = np.zeros_like(r, dtype=np.float64)
    for j in range(n):
        s = r[j, j] - L[j, :j] @ L[j, :j]
        if s < -1e-10:
            raise ConfigError("correlation matrix is not positive semi-definite")
        if s <= tol:
            continue
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            L[i, j] = (r[i, j] - L[i, :j] @ L[j, :j]) / L[j, j]
    return L


def sample_label_matrix(config: SynthConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws of the four label bits, shape (n, 4), columns in LABELS order."""
    L = psd_cholesky(config.correlation_matrix())
    z = rng.standard_normal((n, 4)) @ L.T
    thresholds = np.array([stats.norm.ppf(config.marginals[k]) for k in LABELS])
    return (z < thresholds).astype(np.int64)


def sample_labels(config: SynthConfig, rng: np.random.Generator) -> MarkerLabels:
    bits = sample_label_matrix(config, 1, rng)[0]
    return MarkerLabels.from_markers(*bits)


def joint_positive(p_i: float, p_j: float, rho: float) -> float:
    """P(label_i = 1 and label_j = 1) under the Gaussian copula."""
    if p_i in (0.0, 1.0) or p_j in (0.0, 1.0):
        return p_i * p_j
    qi, qj = stats.norm.ppf(p_i), stats.norm.ppf(p_j)
    if rho >= 1.0:
        return min(p_i, p_j)
    if rho <= -1.0:
        return max(0.0, p_i + p_j - 1.0)
    return float(stats.multivariate_normal.cdf([qi, qj], mean=[0.0, 0.0], cov=[[1.0, rho], [rho, 1.0]], allow_singular=True))


def pair_cooccurrence(p_i: float, p_j: float, rho: float) -> float:
    """The symmetrized conditional ``0.5 * (P(i|j) + P(j|i))`` implied by the copula."""
    both = joint_positive(p_i, p_j, rho)
    return 0.5 * (both / p_j + both / p_i)


def implied_cooccurrence(config: SynthConfig) -> CooccurrenceMatrix:
    """Population co-occurrence matrix of (idh, codel, cdkn) under ``config``."""
    r = config.correlation_matrix()
    a = np.eye(3)
    for i in range(3):
        for j in range(i + 1, 3):
            pi, pj = config.marginals[LABELS[i]], config.marginals[LABELS[j]]
            if pi == 0.0 or pj == 0.0:
                raise ConfigError("co-occurrence is undefined for a marker that is never altered")
            a[i, j] = a[j, i] = pair_cooccurrence(pi, pj, r[i, j])
    return CooccurrenceMatrix(a)


def solve_correlation(p_i: float, p_j: float, target: float) -> float:
    """Latent correlation that makes the pair's co-occurrence equal ``target``."""
    lo, hi = pair_cooccurrence(p_i, p_j, -1.0), pair_cooccurrence(p_i, p_j, 1.0)
    if not lo - 1e-12 <= target <= hi + 1e-12:
        raise ConfigError(f"co-occurrence target {target} infeasible; achievable range [{lo:.4f}, {hi:.4f}]")
    if target >= hi:
        return 1.0
    if target <= lo:
        return -1.0
    return float(optimize.brentq(lambda r: pair_cooccurrence(p_i, p_j, r) - target, -1.0 + 1e-9, 1.0 - 1e-9, xtol=1e-12))


# ---------------------------------------------------------------- bags


def signal_directions(d_in: int) -> dict[str, np.ndarray]:
    eye = np.eye(d_in)
    return {name: eye[axis] for name, axis in SIGNAL_AXES.items()}


def planted_states(labels: MarkerLabels) -> list[str]:
    states = []
    if not labels.idh:
        states.append("idh_wt")
    if labels.codel_1p19q:
        states.append("codel")
    if labels.cdkn_homdel:
        states.append("cdkn")
    if labels.nmp:
        states.append("nmp")
    return states


def generate_bag(labels: MarkerLabels, config: SynthConfig, rng: np.random.Generator, case_id: str = "case") -> PatchBag:
    lo, hi = config.bag_size_range
    n = int(rng.integers(lo, hi + 1))
    frac = float(rng.uniform(*config.planted_fraction))
    n_sig = min(n, max(1, int(np.floor(frac * n + 0.5))))
    feats = rng.normal(0.0, config.noise_sigma, (n, config.d_in))
    shared = rng.choice(n, size=n_sig, replace=False)
    separate = rng.choice(n, size=n_sig, replace=False)
    co_planted = rng.random() < config.co_plant
    dirs = signal_directions(config.d_in)
    for state in planted_states(labels):
        rows = separate if state == "nmp" and not co_planted else shared
        feats[rows] += config.signal_strength * dirs[state]
    return PatchBag(feats, labels, case_id)


def case_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS[split], index])


def generate_split(config: SynthConfig, split: str = "train", n_cases: int | None = None) -> list[PatchBag]:
    """Pure function of (config, split): case ``i`` draws from its own RNG stream."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    count = config.n_cases if n_cases is None else n_cases
    bags = []
    for i in range(count):
        rng = case_rng(config.seed, split, i)
        labels = sample_labels(config, rng)
        bags.append(generate_bag(labels, config, rng, f"{split}-{i:05d}"))
    return bags


# ---------------------------------------------------------------- file format
#
# Header: b"MILB", u16 version, u32 n_cases, u32 d_in. Per case: u32 id
# length, UTF-8 id, u32 n_patches, u8 label bits (idh, codel, cdkn, nmp from
# bit 0), u8 class, n_patches * d_in little-endian float64.


def encode_dataset(bags: Sequence[PatchBag], d_in: int | None = None) -> bytes:
    if d_in is None:
        if not bags:
            raise ConfigError("d_in is required for an empty dataset")
        d_in = bags[0].patch_features.shape[1]
    out = bytearray(MAGIC + struct.pack("<HII", VERSION, len(bags), d_in))
    for bag in bags:
        if bag.patch_features.shape[1] != d_in:
            raise IngestionError(f"case {bag.case_id} has width {bag.patch_features.shape[1]}, expected {d_in}")
        raw = bag.case_id.encode("utf-8")
        bits = sum(int(b) << k for k, b in enumerate(bag.labels.bits()))
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<IBB", bag.n_patches, bits, int(bag.labels.glioma_class))
        out += np.ascontiguousarray(bag.patch_features, dtype="<f8").tobytes()
    return bytes(out)


def decode_dataset(buf: bytes) -> tuple[int, list[PatchBag]]:
    """Parse a dataset buffer; returns (d_in, bags)."""
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"file truncated while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes, not a MILB dataset", 0)
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    n_cases, d_in = struct.unpack("<II", take(8, "header"))
    bags = []
    for _ in range(n_cases):
        (id_len,) = struct.unpack("<I", take(4, "case id length"))
        id_at = pos
        try:
            case_id = take(id_len, "case id").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("case id is not valid UTF-8", id_at) from None
        n, bits, cls = struct.unpack("<IBB", take(6, "case header"))
        class_at = pos - 1
        if bits > 0b1111:
            raise ValidationError(f"case {case_id}: label byte {bits:#x} has stray bits", pos - 2)
        if n < 1:
            raise ValidationError(f"case {case_id}: empty bag", pos - 6)
        marks = [(bits >> k) & 1 for k in range(4)]
        try:
            labels = MarkerLabels(*marks, GliomaClass(cls))
        except (ValueError, IngestionError) as exc:
            expected = classify(*map(bool, marks))
            raise ValidationError(
                f"case {case_id}: class byte {cls} violates diagnosis rules (expected {int(expected)}): {exc}", class_at
            ) from None
        payload = take(8 * n * d_in, f"patch features of {case_id}")
        feats = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(n, d_in)
        bags.append(PatchBag(feats, labels, case_id))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last case", pos)
    return d_in, bags


def write_dataset(path, bags: Sequence[PatchBag], d_in: int | None = None) -> None:
    Path(path).write_bytes(encode_dataset(bags, d_in))


def read_dataset(path) -> list[PatchBag]:
    return decode_dataset(Path(path).read_bytes())[1]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, config: SynthConfig, files: Iterable) -> None:
    lines = ["# synthetic dataset manifest"] + config.echo()
    lines += [f"sha256.{Path(f).name}={file_hash(f)}" for f in files]
    Path(path).write_text("\n".join(lines) + "\n")


def bags_equal(a: Sequence[PatchBag], b: Sequence[PatchBag]) -> bool:
    if len(a) != len(b):
        return False
    return all(
        x.case_id == y.case_id
        and x.labels == y.labels
        and x.patch_features.shape == y.patch_features.shape
        and x.patch_features.tobytes() == y.patch_features.tobytes()
        for x, y in zip(a, b)
    )
