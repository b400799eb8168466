"""Acceptance criteria; each test records one PASS/FAIL line in the terminal summary."""

import os
import time

import numpy as np
import pytest

import test_autodiff as ad
from conftest import record_criterion, tiny_cnn, tiny_mlp
from oracles import project_l1_bisection, random_feasible
from pipeline import run_pipeline
from unionrobust.adversary import (
    FEASIBILITY_RTOL,
    PerturbationSpec,
    fgsm,
    gaussian_noise_attack,
    mim,
    msd,
    pgd,
    pointwise_attack,
    salt_pepper_attack,
)
from unionrobust.autodiff import Tape, affine, conv2d, flatten, maxpool2x2, relu
from unionrobust.data_io import Dataset, synth_blobs
from unionrobust.evaluation import UnionReport, default_suite, evaluate, robustness_curve
from unionrobust.geometry import (
    BallSpec,
    NormKind,
    clamp_to_image,
    norms_rows,
    project_l1,
    project_rows,
    sample_k,
    steepest_l1_rows,
    steepest_l2,
    steepest_linf,
)
from unionrobust.models import ModelSpec, build, forward, loss_and_input_grad, per_example_loss
from unionrobust.training import TrainConfig, train

MNIST_DIR = os.environ.get("UNIONROBUST_MNIST_DIR")


# 1 ---------------------------------------------------------------------------


def test_criterion_1_l1_projection_matches_qp_oracle():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 17))
        delta = rng.standard_normal(n) * rng.choice([0.01, 1.0, 10.0])
        eps = float(rng.uniform(0.0, 2.0) * np.abs(delta).sum())
        worst = max(worst, float(np.abs(project_l1(delta, eps) - project_l1_bisection(delta, eps)).max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-8 and elapsed < 5
    record_criterion(1, ok, f"max linf distance {worst:.2e}, {elapsed:.2f}s")
    assert ok


# 2 ---------------------------------------------------------------------------


def _cnn_directional_errors(seed):
    spec = ModelSpec.mnist()
    params = build(spec, seed)
    r = np.random.default_rng(seed)
    # Zero biases leave dead units sitting exactly on the ReLU kink, where
    # central differences average two one-sided slopes; move off it.
    for name in params:
        if name.endswith(".bias"):
            params[name] = r.normal(0.0, 0.1, params[name].shape)
    x = r.uniform(size=(1, 1, 28, 28))
    y = r.integers(0, 10, size=1)
    _, grad, _ = loss_and_input_grad(spec, params, x, y)
    loss = lambda v: per_example_loss(spec, params, v, y)[0].sum()
    # ten single pixels plus two unit-norm directions, each moved by h
    dirs = []
    for i in r.choice(x.size, 10, replace=False):
        e = np.zeros(x.size)
        e[i] = 1.0
        dirs.append(e.reshape(x.shape))
    for _ in range(2):
        u = r.standard_normal(x.shape)
        dirs.append(u / np.linalg.norm(u))
    fd = np.array([(loss(x + ad.H * u) - loss(x - ad.H * u)) / (2 * ad.H) for u in dirs])
    an = np.array([float((grad * u).sum()) for u in dirs])
    errs = [ad.rel_err(an[:10], fd[:10])] + [abs(a - f) / max(abs(a), abs(f), 1e-12) for a, f in zip(an[10:], fd[10:])]
    return errs


def test_criterion_2_gradients_match_finite_differences():
    start = time.perf_counter()
    failures = []
    op_tests = [ad.test_affine, ad.test_conv2d, ad.test_relu, ad.test_maxpool, ad.test_softmax_cross_entropy,
                ad.test_add_mul_flatten]
    for fn in op_tests:
        for seed in range(20):
            try:
                fn(seed)
            except AssertionError:
                failures.append(f"{fn.__name__}[{seed}]")
    worst = 0.0
    for seed in range(20):
        errs = _cnn_directional_errors(seed)
        worst = max(worst, max(errs))
        if max(errs) >= 1e-4:
            failures.append(f"mnist_cnn[{seed}]")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    record_criterion(2, ok, f"{len(op_tests)} ops x 20 cases + mnist_cnn x 20, worst end-to-end rel err "
                            f"{worst:.1e}, failures {failures or 'none'}, {elapsed:.1f}s")
    assert ok


# 3 ---------------------------------------------------------------------------


def test_criterion_3_steepest_descent_optimality_and_fgsm():
    rng = np.random.default_rng(7)
    alpha = 0.37
    worst = -np.inf
    for kind in ("linf", "l2", "l1"):
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            g = rng.standard_normal(n)
            if kind == "linf":
                v = steepest_linf(g, alpha)
            elif kind == "l2":
                v = steepest_l2(g, alpha)
            else:  # k = 1 is the exact maximiser; interior pixels so nothing is blocked
                v = steepest_l1_rows(g[None], alpha, [1], np.full((1, n), 0.5))[0]
            w = random_feasible(rng, kind, n, alpha)
            worst = max(worst, float(w @ g - v @ g))
    spec, params = tiny_cnn(9)
    r = np.random.default_rng(3)
    x, y = r.uniform(size=(16, 1, 8, 8)), r.integers(0, 4, 16)
    same = np.array_equal(fgsm(spec, params, x, y, 0.2).delta,
                          pgd(spec, params, x, y, PerturbationSpec.make("linf", 0.2, 0.2, 1, 1)).delta)
    ok = worst <= 1e-10 and same
    record_criterion(3, ok, f"max advantage of a random direction {worst:.2e}, FGSM bitwise equal: {same}")
    assert ok


# 4 ---------------------------------------------------------------------------


def _feasibility_cases():
    """20 batches x 10 examples = 200 cases, with saturated pixels mixed in."""
    for b in range(20):
        r = np.random.default_rng([44, b])
        spec, params = tiny_mlp(seed=b)
        x = r.uniform(size=(10, 1, 4, 4))
        x[r.random(x.shape) < 0.2] = 0.0
        x[r.random(x.shape) < 0.2] = 1.0
        y = r.integers(0, 3, 10)
        scale = float(r.uniform(0.2, 2.0))
        yield b, spec, params, x, y, {"linf": 0.1 * scale, "l2": 0.5 * scale, "l1": 2.0 * scale}


def test_criterion_4_attack_feasibility():
    bad = {}
    counts = {}

    def check(name, delta, x, balls):
        norms = norms_rows(delta)
        inside = np.zeros(len(x), dtype=bool)
        for kind, eps in balls:
            inside |= norms[:, NormKind.parse(kind).order] <= eps * (1 + FEASIBILITY_RTOL)
        adv = x + delta
        boxed = ((adv >= 0) & (adv <= 1)).reshape(len(x), -1).all(1)
        bad[name] = bad.get(name, 0) + int((~(inside & boxed)).sum())
        counts[name] = counts.get(name, 0) + len(x)

    for b, spec, params, x, y, eps in _feasibility_cases():
        s = {k: PerturbationSpec.make(k, e, e / 4, 6, 2, momentum=0.7 if k == "linf" else 0.0) for k, e in eps.items()}
        for k in ("linf", "l2", "l1"):
            check(f"pgd_{k}", pgd(spec, params, x, y, s[k], b).delta, x, [(k, eps[k])])
        check("fgsm", fgsm(spec, params, x, y, eps["linf"]).delta, x, [("linf", eps["linf"])])
        check("mim", mim(spec, params, x, y, s["linf"], b).delta, x, [("linf", eps["linf"])])
        check("msd", msd(spec, params, x, y, list(s.values()), 6, b).delta, x, list(eps.items()))
        check("gaussian_noise", gaussian_noise_attack(spec, params, x, y, BallSpec(NormKind.L2, eps["l2"]), 2, b).delta,
              x, [("l2", eps["l2"])])
        check("salt_pepper", salt_pepper_attack(spec, params, x, y, eps["l1"], 2, b).delta, x, [("l1", eps["l1"])])
        check("pointwise", pointwise_attack(spec, params, x, y, eps["l1"], 1, b).delta, x, [("l1", eps["l1"])])
    ok = not any(bad.values()) and all(c == 200 for c in counts.values())
    record_criterion(4, ok, f"{len(counts)} attacks x 200 cases, violations {sum(bad.values())}")
    assert ok


# 5 ---------------------------------------------------------------------------


def _replay_msd(spec, params, x, y, specs, iterations, seeds):
    """Independent MSD iteration: one candidate per ball, keep the first max."""
    streams = [np.random.default_rng(s) for s in seeds]
    n = x[0].size
    delta = np.zeros_like(x)
    rows = np.arange(len(x))
    history = []
    for _ in range(iterations):
        _, grad, _ = loss_and_input_grad(spec, params, x + delta, y)
        ks = [sample_k(specs[2].k_range, g, n) for g in streams]
        cands = []
        for s in specs:
            if s.norm is NormKind.LINF:
                v = steepest_linf(grad, s.alpha)
            elif s.norm is NormKind.L2:
                v = np.stack([steepest_l2(gi, s.alpha) for gi in grad])
            else:
                v = steepest_l1_rows(grad, s.alpha, ks, x + delta).reshape(x.shape)
            cands.append(clamp_to_image(x, project_rows(s.norm, delta + v, s.epsilon)))
        losses = np.stack([per_example_loss(spec, params, x + c, y)[0] for c in cands])
        best = losses.max(axis=0)
        choice = np.array([int(np.flatnonzero(losses[:, i] == best[i])[0]) for i in rows])
        delta = np.stack(cands)[choice, rows]
        history.append((losses, choice))
    return delta, history


def test_criterion_5_msd_structure():
    mismatches = 0
    for run in range(100):
        r = np.random.default_rng([55, run])
        spec, params = tiny_mlp(seed=run)
        x, y = r.uniform(size=(4, 1, 4, 4)), r.integers(0, 3, 4)
        scale = float(r.uniform(0.3, 1.5))
        specs = [PerturbationSpec.make("linf", 0.1 * scale, 0.03 * scale), PerturbationSpec.make("l2", 0.5 * scale, 0.15 * scale),
                 PerturbationSpec.make("l1", 2.0 * scale, 0.6 * scale, k_range=(2, 6))]
        seeds = [np.random.SeedSequence([run, i]) for i in range(4)]
        trace = []
        out = msd(spec, params, x, y, specs, 5, [np.random.default_rng(s) for s in seeds], trace=trace)
        ref_delta, history = _replay_msd(spec, params, x, y, specs, 5, seeds)
        for (losses, choice, chosen), (ref_losses, ref_choice) in zip(trace, history):
            exact = (np.array_equal(losses, ref_losses) and np.array_equal(choice, ref_choice)
                     and np.array_equal(chosen, losses.max(axis=0))
                     and np.array_equal(choice, np.argmax(losses, axis=0)))
            mismatches += not exact
        mismatches += not np.array_equal(out.delta, ref_delta)

    reduction_ok = True
    spec, params = tiny_cnn(5)
    r = np.random.default_rng(1)
    x, y = r.uniform(size=(6, 1, 8, 8)), r.integers(0, 4, 6)
    for kind, eps in (("linf", 0.1), ("l2", 0.6), ("l1", 3.0)):
        s = PerturbationSpec.make(kind, eps, eps / 4, 5, 3)
        reduction_ok &= np.array_equal(msd(spec, params, x, y, [s], 5, 17).delta, pgd(spec, params, x, y, s, 17).delta)

    data = synth_blobs(200, 2, margin=0.05, noise=0.3, seed=4)
    model = ModelSpec.mlp(2, 2, (16,))
    s = PerturbationSpec.make("l1", 0.15, 0.04, 5, 2)
    runs = {}
    for strategy in ("single", "msd"):
        cfg = TrainConfig(strategy=strategy, specs=(s,), schedule=((0, 0), (2, 5e-3), (4, 0)), epochs=4, seed=3)
        runs[strategy], _ = train(cfg, model, data)
    training_ok = all(np.array_equal(runs["single"][k], runs["msd"][k]) for k in runs["single"])
    ok = mismatches == 0 and reduction_ok and training_ok
    record_criterion(5, ok, f"100 runs x 5 iterations, argmax mismatches {mismatches}; |S|=1 attack reduction "
                            f"bitwise: {reduction_ok}; |S|=1 training run bitwise: {training_ok}")
    assert ok


# 6 ---------------------------------------------------------------------------


def test_criterion_6_union_accounting():
    problems = []
    specs = {
        NormKind.LINF: PerturbationSpec.make("linf", 0.15, 0.05, 5, 2),
        NormKind.L2: PerturbationSpec.make("l2", 0.6, 0.2, 5, 2),
        NormKind.L1: PerturbationSpec.make("l1", 2.0, 0.6, 5, 2),
    }
    for seed in range(5):
        spec, params = tiny_mlp(seed=seed)
        r = np.random.default_rng(seed)
        data = Dataset(r.uniform(size=(30, 1, 4, 4)), r.integers(0, 3, 30))
        report = evaluate(spec, params, data, default_suite(specs, trials=2), seed=seed)  # check() runs inside
        again = UnionReport.from_bitmap(report.attack_ids, report.groups, report.clean_correct, report.success)
        if again.summary() != report.summary():
            problems.append(f"bitmap identity seed {seed}")
        groups = report.group_accuracy()
        attacks = report.attack_accuracy()
        for a, g in zip(report.attack_ids, report.groups):
            if not report.union_accuracy <= groups[g] <= attacks[a]:
                problems.append(f"ordering {a} seed {seed}")
        for norm in NormKind:
            family = [e for e in default_suite(specs) if e.group is norm]
            grid = np.linspace(0, 2 * family[0].epsilon, 5)
            accs = [a for _, a in robustness_curve(spec, params, data, family, grid, seed=seed)]
            if any(b > a for a, b in zip(accs, accs[1:])):
                problems.append(f"curve {norm.value} seed {seed}")
    ok = not problems
    record_criterion(6, ok, f"5 evaluations + 15 curves, problems {problems or 'none'}")
    assert ok


# 7 and 9 --------------------------------------------------------------------

_PIPELINE = {}


def _pipeline(tmp_path_factory, key, threads):
    if key not in _PIPELINE:
        _PIPELINE[key] = run_pipeline(tmp_path_factory.mktemp(key), threads=threads)
    return _PIPELINE[key]


def test_criterion_7_synthetic_ordering(tmp_path_factory):
    res = _pipeline(tmp_path_factory, "first", 1)
    u = {k: res[k]["union"] for k in ("clean", "single", "max", "avg", "msd")}
    gaps_ok = all(u[k] - u["clean"] >= 0.20 for k in ("single", "max", "avg", "msd"))
    msd_ok = u["msd"] >= max(u["max"], u["avg"]) - 0.05
    clean_broken = u["clean"] < 0.20
    ok = gaps_ok and msd_ok and clean_broken and res["_seconds"] < 300
    detail = ", ".join(f"{k} {100 * v:.1f}%" for k, v in u.items())
    record_criterion(7, ok, f"union robust accuracy {detail}; {res['_seconds']:.0f}s")
    assert ok


def test_criterion_9_determinism(tmp_path_factory):
    first = _pipeline(tmp_path_factory, "first", 1)
    again = _pipeline(tmp_path_factory, "again", 1)
    threaded = _pipeline(tmp_path_factory, "threads4", 4)
    diffs = []
    for name in ("clean", "single", "max", "avg", "msd"):
        for other, label in ((again, "rerun"), (threaded, "threads=4")):
            if other[name]["checkpoint"] != first[name]["checkpoint"]:
                diffs.append(f"{name} checkpoint ({label})")
            if other[name]["report"] != first[name]["report"]:
                diffs.append(f"{name} report ({label})")
    ok = not diffs
    record_criterion(9, ok, f"5 checkpoints + 5 reports at threads 1, 1, 4; differences {diffs or 'none'}")
    assert ok


# 8 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_8_mnist_desk(tmp_path):
    if not MNIST_DIR:
        reason = "set UNIONROBUST_MNIST_DIR to the directory holding the MNIST IDX files"
        record_criterion(8, None, reason)
        pytest.skip(reason)
    import contextlib
    import io

    from pipeline import union_of
    from unionrobust.cli import main

    paths = ["--set", f"data.train_images={MNIST_DIR}/train-images-idx3-ubyte",
             "--set", f"data.train_labels={MNIST_DIR}/train-labels-idx1-ubyte",
             "--set", f"data.test_images={MNIST_DIR}/t10k-images-idx3-ubyte",
             "--set", f"data.test_labels={MNIST_DIR}/t10k-labels-idx1-ubyte"]
    start = time.perf_counter()
    reports = {}
    for name, flags in (("msd", []), ("linf", ["--set", "train.strategy=single", "--set", "train.norms=linf"])):
        ckpt = tmp_path / f"{name}.urbc"
        assert main(["train", "mnist_desk", "--out", str(ckpt)] + paths + flags) == 0
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            assert main(["eval", str(ckpt), "mnist_desk"] + paths) == 0
        reports[name] = buf.getvalue()
    clean = float(reports["msd"].splitlines()[0].split("accuracy=")[1].split()[0])
    u_msd, u_linf = union_of(reports["msd"]), union_of(reports["linf"])
    elapsed = time.perf_counter() - start
    ok = clean >= 0.95 and u_msd - u_linf >= 0.10 and elapsed <= 3600
    record_criterion(8, ok, f"msd clean {100 * clean:.1f}%, union msd {100 * u_msd:.1f}% vs linf-trained "
                            f"{100 * u_linf:.1f}%, {elapsed / 60:.0f} min")
    assert ok
