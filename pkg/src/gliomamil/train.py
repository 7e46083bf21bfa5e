"""Composite loss, Adam with decoupled weight decay, training and evaluation loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import (
    TASKS,
    BackboneConfig,
    BatchOutputs,
    PatchBag,
    forward_batch,
    init_params,
    pad_batch,
)
from .curriculum import CurriculumSchedule, dcc_loss_batch, format_epoch_line, schedule_k
from .errors import ConfigError, DimensionError, NumericalError
from .graph import CooccurrenceMatrix, estimate_cooccurrence, lc_loss
from .metrics import MetricsReport, compute_metrics
from .who import consistency

log = logging.getLogger(__name__)

LABEL_FIELDS = {"idh": "idh", "1p19q": "codel_1p19q", "cdkn": "cdkn_homdel", "nmp": "nmp", "glioma": "glioma_class"}


class DivergenceError(NumericalError):
    """Training produced a non-finite value."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 70
    batch_size: int = 8
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    lambda_lc: float = 1.0
    lambda_dcc: float = 1.0
    K0: int | None = None  # None: 1250 rescaled to the bag size N
    m0: int = 10
    beta: float = 0.85
    tau: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0 or self.eps <= 0 or self.tau <= 0:
            raise ConfigError("lr, eps and tau must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.lambda_lc < 0 or self.lambda_dcc < 0:
            raise ConfigError("weight decay and loss weights must be non-negative")

    def schedule(self, n_patches: int) -> CurriculumSchedule:
        if self.K0 is None:
            return CurriculumSchedule(m0=self.m0, beta=self.beta).scaled_to(n_patches)
        return CurriculumSchedule(self.K0, self.m0, self.beta)


# ---------------------------------------------------------------- loss


class LossParts(NamedTuple):
    total: Tensor
    ce: float
    lc: float
    dcc_surrogate: float
    dcc_overlap: float


def label_arrays(bags: Sequence[PatchBag]) -> dict[str, np.ndarray]:
    return {t: np.array([int(getattr(b.labels, f)) for b in bags]) for t, f in LABEL_FIELDS.items()}


def total_loss(
    outputs: BatchOutputs,
    labels: dict[str, np.ndarray],
    cooc: CooccurrenceMatrix,
    k: int,
    lambda_lc: float = 1.0,
    lambda_dcc: float = 1.0,
    tau: float = 0.05,
    dcc_thresholds=None,
) -> LossParts:
    """Sum of the five heads' batch-mean cross-entropies plus weighted LC and DCC terms.

    ``dcc_thresholds`` optionally pins the DCC membership cuts; see
    :func:`dcc_loss_batch`.
    """
    ce = None
    for task in TASKS + ("glioma",):
        term = ad.cross_entropy(outputs.logits[task], labels[task])
        ce = term if ce is None else ce + term
    lc = lc_loss(outputs.f_out, cooc)
    dcc = dcc_loss_batch(outputs.decision_weights["idh"], outputs.decision_weights["nmp"], k, tau, dcc_thresholds)
    total = ce
    if lambda_lc:
        total = total + lc * lambda_lc
    if lambda_dcc:
        total = total + dcc.surrogate * lambda_dcc
    return LossParts(total, ce.item(), lc.item(), dcc.surrogate.item(), dcc.overlap)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update in place, preceded by decoupled weight decay."""
    state.step += 1
    t = state.step
    c1 = 1.0 - config.beta1 ** t
    c2 = 1.0 - config.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if config.weight_decay:
            p.data -= config.lr * config.weight_decay * p.data
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        p.data -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


# ---------------------------------------------------------------- evaluation


@dataclass
class Evaluation:
    report: MetricsReport
    scores: dict[str, np.ndarray]
    predictions: dict[str, np.ndarray]
    weights: dict[str, np.ndarray]


def predict(
    bags: Sequence[PatchBag],
    params,
    config: BackboneConfig,
    cooc: CooccurrenceMatrix,
    chunk: int = 32,
    pad_seed: int = 0,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict[str, np.ndarray], float]:
    """Scores, argmax predictions, decision weights and consistency rate over ``bags``."""
    scores = {t: [] for t in TASKS}
    preds = {t: [] for t in TASKS + ("glioma",)}
    weights = {t: [] for t in TASKS}
    agree = 0
    with ad.no_grad():
        for start in range(0, len(bags), chunk):
            batch = bags[start:start + chunk]
            out = forward_batch(pad_batch(batch, config, pad_seed), params, config, cooc)
            for t in TASKS:
                z = out.logits[t].data
                p1 = 1.0 / (1.0 + np.exp(z[:, 0] - z[:, 1]))
                scores[t].append(p1)
                preds[t].append(np.argmax(z, axis=1))
                weights[t].append(out.decision_weights[t].data)
            preds["glioma"].append(np.argmax(out.logits["glioma"].data, axis=1))
            agree += sum(consistency(out.bag(i)).consistent for i in range(len(batch)))
    cat = lambda d: {k: np.concatenate(v) for k, v in d.items()}  # noqa: E731
    return cat(scores), cat(preds), cat(weights), agree / len(bags)


def evaluate(bags: Sequence[PatchBag], params, config: BackboneConfig, cooc: CooccurrenceMatrix) -> Evaluation:
    if not bags:
        raise ValueError("evaluation set is empty")
    scores, preds, weights, rate = predict(bags, params, config, cooc)
    report = compute_metrics(preds, scores, label_arrays(bags), rate)
    return Evaluation(report, scores, preds, weights)


# ---------------------------------------------------------------- training


LOG_HEADER = f"{'epoch':>5} {'K_m':>6} {'hard_overlap':>12} {'surrogate':>14} {'total':>12} {'ce':>12} {'lc':>12} {'val_auc':>10}"


@dataclass
class EpochRecord:
    epoch: int
    k: int
    overlap: float
    surrogate: float
    total: float
    ce: float
    lc: float
    val_auc: float | None

    def line(self) -> str:
        va = "NA" if self.val_auc is None else f"{self.val_auc:.6f}"
        return (
            format_epoch_line(self.epoch, self.k, self.overlap, self.surrogate)
            + f" {self.total:>12.6f} {self.ce:>12.6f} {self.lc:>12.6f} {va:>10}"
        )


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    cooc: CooccurrenceMatrix
    backbone: BackboneConfig
    config: TrainConfig
    history: list[EpochRecord]
    best_epoch: int
    best_val_auc: float | None

    def log_text(self) -> str:
        return "\n".join([LOG_HEADER] + [r.line() for r in self.history]) + "\n"


def train(
    train_bags: Sequence[PatchBag],
    val_bags: Sequence[PatchBag],
    backbone: BackboneConfig,
    config: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train from scratch; keeps the parameters with the best validation macro-AUC.

    With an empty validation set the final-epoch parameters are returned.
    """
    if not train_bags:
        raise ValueError("training set is empty")
    backbone = replace(backbone, init_seed=config.seed)
    cooc = estimate_cooccurrence([b.labels for b in train_bags])
    params = init_params(backbone)
    state = AdamState()
    sched = config.schedule(backbone.N)
    x_all = pad_batch(train_bags, backbone, config.seed)
    y_all = label_arrays(train_bags)
    order_rng = np.random.default_rng([config.seed, 7])
    history: list[EpochRecord] = []
    best_auc, best_epoch = None, -1
    best = {k: p.data.copy() for k, p in params.items()}

    for epoch in range(config.epochs):
        k = schedule_k(epoch, sched, backbone.N)
        perm = order_rng.permutation(len(train_bags))
        sums = np.zeros(5)
        n_batches = 0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            try:
                out = forward_batch(x_all[idx], params, backbone, cooc)
                parts = total_loss(
                    out, {t: y[idx] for t, y in y_all.items()}, cooc, k,
                    config.lambda_lc, config.lambda_dcc, config.tau,
                )
                for p in params.values():
                    p.grad = None
                grads = ad.backward(parts.total)
            except NumericalError as exc:
                raise DivergenceError(f"divergence at epoch {epoch}, batch {n_batches}: {exc}") from exc
            adam_step(params, {n: grads[p] for n, p in params.items() if p in grads}, state, config)
            sums += (parts.dcc_overlap, parts.dcc_surrogate, parts.total.item(), parts.ce, parts.lc)
            n_batches += 1
        means = sums / n_batches
        val_auc = None
        if val_bags:
            val_auc = evaluate(val_bags, params, backbone, cooc).report.macro_auc()
        rec = EpochRecord(epoch, k, *means, val_auc)
        history.append(rec)
        log.info(rec.line())
        if on_epoch:
            on_epoch(rec)
        # without a validation set the last epoch wins
        if not val_bags or best_epoch < 0 or (val_auc is not None and (best_auc is None or val_auc > best_auc)):
            best_auc, best_epoch = val_auc, epoch
            best = {k_: p.data.copy() for k_, p in params.items()}

    final = {name: Tensor(arr, True, name) for name, arr in best.items()}
    return TrainResult(final, cooc, backbone, config, history, best_epoch, best_auc)
