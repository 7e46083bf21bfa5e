"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
they are also written to the terminal when output is captured.
"""

import itertools
import time

import numpy as np
import pytest

from gliomamil import autodiff as ad
from gliomamil.autodiff import Tensor
from gliomamil.backbone import BackboneConfig, dump_params, forward_batch, init_params, pad_batch, parse_params
from gliomamil.curriculum import (
    CurriculumSchedule,
    batch_thresholds,
    dcc_loss,
    dcc_overlap,
    rank_weights,
    schedule_k,
)
from gliomamil.errors import FormatError
from gliomamil.graph import GraphParams, estimate_cooccurrence, gcn_forward, lc_loss
from gliomamil.metrics import binary_metrics, format_report
from gliomamil.synth import (
    SynthConfig,
    decode_dataset,
    encode_dataset,
    generate_split,
    implied_cooccurrence,
    sample_label_matrix,
)
from gliomamil.train import TrainConfig, evaluate, label_arrays, total_loss, train
from gliomamil.who import GliomaClass, classify

from conftest import central_diff, max_rel_err


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail

    return emit


# ---------------------------------------------------------------- 1


def _op_cases(rng):
    """(name, function of one array, input) for every differentiable op."""
    w34 = rng.normal(size=(3, 4))
    w4 = rng.normal(size=4)
    m45 = rng.normal(size=(4, 5))
    w35 = rng.normal(size=(3, 5))
    other = rng.normal(size=(3, 4))
    vec = rng.normal(size=5)
    tgt = np.eye(3, 4)
    b3 = rng.normal(size=(2, 4, 3))
    pick = lambda t: ad.sum(t * Tensor(w34))  # noqa: E731
    return [
        ("add", lambda t: pick(t + Tensor(other)), rng.normal(size=(3, 4))),
        ("neg", lambda t: pick(-t), rng.normal(size=(3, 4))),
        ("mul", lambda t: pick(t * Tensor(other)), rng.normal(size=(3, 4))),
        ("div_scalar", lambda t: pick(t / 3.0), rng.normal(size=(3, 4))),
        ("add_bias", lambda t: pick(ad.add_bias(Tensor(other), t)), rng.normal(size=4)),
        ("relu", lambda t: pick(ad.relu(t)), rng.normal(size=(3, 4)) + 0.01),
        ("leaky_relu", lambda t: pick(ad.leaky_relu(t)), rng.normal(size=(3, 4)) + 0.01),
        ("sigmoid", lambda t: pick(ad.sigmoid(t)), rng.normal(size=(3, 4))),
        ("tanh", lambda t: pick(ad.tanh(t)), rng.normal(size=(3, 4))),
        ("exp", lambda t: pick(ad.exp(t)), rng.normal(size=(3, 4))),
        ("log", lambda t: pick(ad.log(t)), rng.uniform(0.5, 2.0, size=(3, 4))),
        ("sum_axis", lambda t: ad.sum(ad.sum(t, axis=1) * Tensor(w34[:, 0])), rng.normal(size=(3, 4))),
        ("mean", lambda t: ad.mean(t * t), rng.normal(size=(3, 4))),
        ("reshape", lambda t: pick(ad.reshape(ad.reshape(t, (2, 6)) * 2.0, (3, 4))), rng.normal(size=(3, 4))),
        ("transpose", lambda t: ad.sum(ad.transpose(t) * Tensor(w34.T)), rng.normal(size=(3, 4))),
        ("index", lambda t: ad.sum(t[1:, [0, 2, 2]] * Tensor(w34[1:, :3])), rng.normal(size=(3, 4))),
        ("concat", lambda t: ad.sum(ad.concat([t, t * t], axis=0) * Tensor(np.vstack([w34, w34]))), rng.normal(size=(3, 4))),
        ("stack", lambda t: ad.sum(ad.stack([t, t * 2.0]) * Tensor(np.stack([w4, w4]))), rng.normal(size=4)),
        ("matmul", lambda t: ad.sum(ad.matmul(t, Tensor(m45)) * Tensor(w35)), rng.normal(size=(3, 4))),
        ("matmul_batched", lambda t: ad.sum(ad.matmul(t, Tensor(np.ones((2, 3, 2))))), b3),
        ("softmax", lambda t: pick(ad.softmax(t, axis=-1)), rng.normal(size=(3, 4))),
        ("layer_norm", lambda t: pick(ad.layer_norm(t, Tensor(w4), Tensor(w4))), rng.normal(size=(3, 4))),
        ("mse", lambda t: ad.mse(t, Tensor(tgt)), rng.normal(size=(3, 4))),
        ("cross_entropy", lambda t: ad.cross_entropy(t, [1, 0, 3]), rng.normal(size=(3, 4))),
        ("normalize_rows", lambda t: pick(ad.normalize_rows(t)), rng.normal(size=(3, 4))),
        ("cosine_similarity", lambda t: ad.cosine_similarity(t, Tensor(vec)), rng.normal(size=5)),
        ("gcn_forward", lambda t: pick(gcn_forward(t, np.full((3, 3), 0.4), GraphParams(Tensor(np.eye(4) + 0.1), 0.1))),
         rng.normal(size=(3, 4))),
        ("lc_loss", lambda t: lc_loss(t, np.full((3, 3), 0.5)), rng.normal(size=(3, 4))),
    ]


def _grad(build, x):
    t = Tensor(x, True)
    return ad.backward(build(t))[t]


def _value(build):
    def f(x):
        with ad.no_grad():
            return build(Tensor(x)).item()

    return f


def _composite_error(rng):
    """Autodiff vs central differences over every parameter of a tiny model."""
    cfg = BackboneConfig(N=4, d_in=4, d_model=8, n_heads=2)
    synth = SynthConfig(bag_size_range=(3, 6), d_in=4)
    bags = generate_split(synth, "train", 3)
    cooc = estimate_cooccurrence([b.labels for b in bags])
    params = init_params(cfg)
    for p in params.values():
        p.data += rng.normal(0.0, 0.05, p.shape)
    x = pad_batch(bags, cfg)
    labels = label_arrays(bags)

    def loss(thresholds=None):
        out = forward_batch(x, params, cfg, cooc)
        return out, total_loss(out, labels, cooc, 2, 1.0, 1.0, 0.5, thresholds).total

    out, total = loss()
    # the DCC cut is a constant of differentiation, so pin it for the numeric side
    pinned = batch_thresholds(out.decision_weights["idh"], out.decision_weights["nmp"], 2)
    grads = ad.backward(total)
    worst, h = 0.0, 1e-6
    with ad.no_grad():
        for p in params.values():
            analytic = grads.get(p, np.zeros(p.shape)).reshape(-1)
            flat = p.data.reshape(-1)
            numeric = np.empty_like(analytic)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                fp = loss(pinned)[1].item()
                flat[i] = keep - h
                fm = loss(pinned)[1].item()
                flat[i] = keep
                numeric[i] = (fp - fm) / (2 * h)
            worst = max(worst, max_rel_err(analytic, numeric))
    return worst, sum(p.size for p in params.values())


def test_criterion_1_gradient_integrity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    op_errors = {}
    for trial in range(3):
        for name, build, x in _op_cases(rng):
            err = max_rel_err(_grad(build, x), central_diff(_value(build), x))
            op_errors[name] = max(op_errors.get(name, 0.0), err)
    composite, n_params = _composite_error(rng)
    elapsed = time.perf_counter() - start
    worst_op = max(op_errors, key=op_errors.get)
    ok = max(op_errors.values()) < 1e-3 and composite < 1e-3 and elapsed < 60
    verdict(1, "gradient integrity", ok,
            f"{len(op_errors)} ops, worst {worst_op} {op_errors[worst_op]:.2e}; "
            f"composite over {n_params} params {composite:.2e}; {elapsed:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_graph_exactness(verdict):
    rng = np.random.default_rng(7)
    checks = []
    f_pos = np.abs(rng.normal(size=(3, 6)))
    for alpha in (0.0, 0.1, 0.5, 1.0):
        out = gcn_forward(Tensor(f_pos), np.eye(3), GraphParams(Tensor(np.eye(6)), alpha))
        checks.append(np.array_equal(out.data, f_pos))
    f_any = rng.normal(size=(3, 6))
    out = gcn_forward(Tensor(f_any), rng.uniform(size=(3, 3)), GraphParams(Tensor(rng.normal(size=(6, 6))), 0.0))
    checks.append(np.array_equal(out.data, f_any))

    rows = np.array([[2.0, 0.0, 0.0], [1.0, np.sqrt(3.0), 0.0], [0.0, 0.0, 5.0]])
    unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    half = np.full((3, 3), 0.5)
    np.fill_diagonal(half, 1.0)
    cases = [
        (rows, unit @ unit.T, 0.0),
        (np.diag([1.0, 2.0, 3.0]), half, 1 / 6),
        (np.tile([[1.0, 2.0, -1.0]], (3, 1)), np.eye(3), 6 / 9),
    ]
    diffs = [abs(lc_loss(Tensor(f), a).item() - want) for f, a, want in cases]
    ok = all(checks) and max(diffs) <= 1e-12
    verdict(2, "graph layer and LC loss exactness", ok,
            f"identity cases bitwise {sum(checks)}/{len(checks)}; lc diffs {', '.join(f'{d:.1e}' for d in diffs)}")


# ---------------------------------------------------------------- 3


def test_criterion_3_dcc_exactness(verdict):
    sched = CurriculumSchedule()
    ks = [schedule_k(m, sched) for m in range(11)]
    schedule_ok = ks[:10] == [1250] * 10 and ks[10] == 1062

    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        k = int(rng.integers(1, n + 1))
        # coarse values so ties occur and exercise the tie rule
        wa = rng.integers(0, 6, n) / 5.0
        wb = rng.uniform(size=n)
        top = lambda w: set(sorted(range(n), key=lambda i: (-w[i], i))[:k])  # noqa: E731
        brute = len(top(wa) & top(wb)) / k
        mismatches += dcc_overlap(rank_weights(wa), rank_weights(wb), k) != brute

    grid = np.linspace(0.0, 1.0, 20)
    surrogate_gaps = []
    for seed in range(5):
        r = np.random.default_rng(seed)
        wa, wb = Tensor(r.permutation(grid)), Tensor(r.permutation(grid))
        hard = dcc_loss(wa, wb, 6).hard
        surrogate_gaps.append(abs(dcc_loss(wa, wb, 6, tau=1e-3).surrogate.item() - hard))
    ok = schedule_ok and mismatches == 0 and max(surrogate_gaps) < 0.01
    verdict(3, "curriculum schedule and top-K overlap", ok,
            f"K(0..9)={set(ks[:10])}, K(10)={ks[10]}; {mismatches}/1000 overlap mismatches; "
            f"max |surrogate-hard| at tau=1e-3 {max(surrogate_gaps):.1e}")


# ---------------------------------------------------------------- 4


def test_criterion_4_rules_truth_table(verdict):
    expected = {}
    for idh, codel, cdkn, nmp in itertools.product((0, 1), repeat=4):
        if not idh:
            expected[(idh, codel, cdkn, nmp)] = GliomaClass.Glioblastoma_G4
        elif codel:
            expected[(idh, codel, cdkn, nmp)] = GliomaClass.Oligodendroglioma
        elif cdkn or nmp:
            expected[(idh, codel, cdkn, nmp)] = GliomaClass.Astrocytoma_G4
        else:
            expected[(idh, codel, cdkn, nmp)] = GliomaClass.Astrocytoma_LG
    hits = sum(classify(*map(bool, k)) == v for k, v in expected.items())
    verdict(4, "diagnosis rules truth table", hits == 16, f"{hits}/16 combinations match")


# ---------------------------------------------------------------- 5


def test_criterion_5_cooccurrence_recovery(verdict):
    cfg = SynthConfig()
    labels = sample_label_matrix(cfg, 100_000, np.random.default_rng(5))
    est = estimate_cooccurrence(labels).A
    err = float(np.abs(est - implied_cooccurrence(cfg).A).max())

    rng = np.random.default_rng(6)
    structural = True
    for _ in range(300):
        m = rng.integers(0, 2, (int(rng.integers(1, 30)), 3))
        a = estimate_cooccurrence(m).A
        structural &= bool(np.array_equal(a, a.T) and np.array_equal(np.diag(a), np.ones(3)))
    structural &= bool(np.array_equal(est, est.T) and np.array_equal(np.diag(est), np.ones(3)))
    ok = err < 0.02 and structural
    verdict(5, "co-occurrence estimation", ok,
            f"max |estimate-target| on 1e5 labels {err:.4f}; symmetric with unit diagonal on 301 draws: {structural}")


# ---------------------------------------------------------------- 6


@pytest.mark.slow
def test_criterion_6_end_to_end_learning(verdict):
    start = time.perf_counter()
    synth = SynthConfig()
    tr, va, te = (generate_split(synth, s, n) for s, n in (("train", 600), ("val", 100), ("test", 100)))
    result = train(tr, va, BackboneConfig(), TrainConfig(epochs=30))
    report = evaluate(te, result.params, result.backbone, result.cooc).report
    elapsed = time.perf_counter() - start
    aucs = {t: m.auc for t, m in report.tasks.items()}
    ok = all(a is not None and a >= 0.85 for a in aucs.values()) and report.glioma.accuracy >= 0.75 and elapsed <= 300
    verdict(6, "end-to-end learning", ok,
            "AUC " + " ".join(f"{t}={a:.3f}" for t, a in aucs.items())
            + f"; 4-way accuracy {report.glioma.accuracy:.3f}; best epoch {result.best_epoch}; {elapsed:.0f}s")


# ---------------------------------------------------------------- 7


@pytest.mark.slow
def test_criterion_7_dcc_efficacy(verdict):
    gaps = []
    for seed in range(3):
        bags = generate_split(SynthConfig(seed=seed), "train", 300)
        final = {}
        for lam in (0.0, 1.0):
            res = train(bags, [], BackboneConfig(), TrainConfig(epochs=10, lambda_dcc=lam, seed=seed))
            final[lam] = res.history[-1].overlap
        gaps.append(final[1.0] - final[0.0])
    mean_gap = float(np.mean(gaps))
    verdict(7, "DCC efficacy", mean_gap >= 0.10,
            f"overlap gain with DCC per seed {', '.join(f'{g:+.3f}' for g in gaps)}; mean {mean_gap:+.3f}")


# ---------------------------------------------------------------- 8


def test_criterion_8_determinism_and_formats(verdict, tmp_path):
    synth = SynthConfig(bag_size_range=(4, 12), d_in=6, seed=11)
    backbone = BackboneConfig(N=8, d_in=6, d_model=8, n_heads=2)
    cfg = TrainConfig(epochs=2, batch_size=4, seed=11)

    def run():
        tr, te = generate_split(synth, "train", 16), generate_split(synth, "test", 8)
        res = train(tr, te, backbone, cfg)
        text = format_report(evaluate(te, res.params, res.backbone, res.cooc).report)
        return encode_dataset(tr), dump_params(res.params), text

    first, second = run(), run()
    same = [a == b for a, b in zip(first, second)]

    blob = first[0]
    round_trip = encode_dataset(decode_dataset(blob)[1]) == blob

    offsets = []
    corruptions = [
        (lambda b: b"MILX" + b[4:], decode_dataset),
        (lambda b: b[:-11], decode_dataset),
        (lambda b: b[:20] + b"\xff" * 4 + b[24:], decode_dataset),
        (lambda b: b + b"\x00", decode_dataset),
    ]
    for corrupt, parser in corruptions:
        try:
            parser(corrupt(blob))
            offsets.append(None)
        except FormatError as exc:
            offsets.append(exc.offset if "offset" in str(exc) else None)
    rank_at = 4 + int.from_bytes(first[1][:4], "little")
    bad_rank = lambda b: b[:rank_at] + (99).to_bytes(4, "little") + b[rank_at + 4:]  # noqa: E731
    for corrupt in (lambda b: b[:-3], bad_rank):
        try:
            parse_params(corrupt(first[1]))
            offsets.append(None)
        except FormatError as exc:
            offsets.append(exc.offset if "offset" in str(exc) else None)
    ok = all(same) and round_trip and all(o is not None for o in offsets)
    verdict(8, "determinism and file formats", ok,
            f"dataset/checkpoint/report identical {same}; round trip {round_trip}; error offsets {offsets}")


# ---------------------------------------------------------------- 9


def test_criterion_9_metrics_oracle(verdict):
    rng = np.random.default_rng(9)
    exact, worst_auc = 0, 0.0
    for _ in range(100):
        n = int(rng.integers(2, 33))
        y = rng.integers(0, 2, n)
        y[rng.integers(1, n)] = 1 - y[0]  # both classes present
        scores = np.round(rng.uniform(size=n), 1)
        pred = rng.integers(0, 2, n)
        tp = sum(1 for a, b in zip(y, pred) if a and b)
        fp = sum(1 for a, b in zip(y, pred) if not a and b)
        tn = sum(1 for a, b in zip(y, pred) if not a and not b)
        fn = sum(1 for a, b in zip(y, pred) if a and not b)
        brute = ((tp + tn) / n, tp / (tp + fn), tn / (tn + fp),
                 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0)
        m = binary_metrics(y, pred, scores)
        exact += (m.accuracy, m.sensitivity, m.specificity, m.f1) == brute
        pos, neg = scores[y == 1], scores[y == 0]
        rank = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg) / (len(pos) * len(neg))
        worst_auc = max(worst_auc, abs(m.auc - rank))
    ok = exact == 100 and worst_auc <= 1e-12
    verdict(9, "metrics oracle equivalence", ok,
            f"{exact}/100 exact confusion-rate matches; max AUC deviation {worst_auc:.1e}")
