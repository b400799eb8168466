"""Attacks on a batch of examples.

Every attack works on a whole batch ``x`` of shape (B, C, H, W) at once but
keeps one random stream per example, so an example's result does not depend
on which other examples share its batch (up to BLAS rounding, which the
harness pins down by using fixed chunk boundaries).  ``rng`` may be a single
``numpy.random.Generator`` (spawned into per-example children), a sequence of
per-example generators, or an integer seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    BallSpec,
    NormKind,
    clamp_to_image,
    norms_rows,
    project_rows,
    random_in_ball,
    sample_k,
    steepest_l1_rows,
    steepest_l2_rows,
    steepest_linf,
)
from .models import ModelSpec, ParameterSet, loss_and_input_grad, per_example_loss

__all__ = [
    "PerturbationSpec",
    "AttackOutcome",
    "pgd",
    "fgsm",
    "mim",
    "msd",
    "gaussian_noise_attack",
    "salt_pepper_attack",
    "pointwise_attack",
    "salt_pepper_noise",
    "momentum_update",
]

FEASIBILITY_RTOL = 1e-9


@dataclass(frozen=True)
class PerturbationSpec:
    ball: BallSpec
    alpha: float
    iterations: int = 1
    restarts: int = 1
    k_range: tuple = (5, 20)
    momentum: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.iterations < 1 or self.restarts < 1:
            raise ValueError("iterations and restarts must be at least 1")
        k1, k2 = self.k_range
        if not 1 <= k1 <= k2:
            raise ValueError(f"k_range must satisfy 1 <= k1 <= k2, got {self.k_range}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        object.__setattr__(self, "k_range", (int(k1), int(k2)))

    @classmethod
    def make(cls, norm, epsilon, alpha, iterations=1, restarts=1, k_range=(5, 20), momentum=0.0):
        return cls(BallSpec(NormKind.parse(norm), float(epsilon)), float(alpha), int(iterations),
                   int(restarts), tuple(k_range), float(momentum))

    @property
    def norm(self) -> NormKind:
        return self.ball.norm

    @property
    def epsilon(self) -> float:
        return self.ball.epsilon

    def replace(self, **changes) -> "PerturbationSpec":
        fields = dict(ball=self.ball, alpha=self.alpha, iterations=self.iterations, restarts=self.restarts,
                      k_range=self.k_range, momentum=self.momentum)
        if "epsilon" in changes:
            fields["ball"] = BallSpec(self.ball.norm, float(changes.pop("epsilon")))
        fields.update(changes)
        return PerturbationSpec(**fields)


@dataclass
class AttackOutcome:
    """Per-example results of one attack on a batch.

    ``delta`` always satisfies the attack's own budget and the pixel box.
    ``found_norm`` is set by the decision-based attacks: the constraining norm
    of the smallest misclassifying perturbation they found (``inf`` if none),
    which may exceed the budget; such perturbations are not returned in
    ``delta``.
    """

    delta: np.ndarray
    loss: np.ndarray
    norms: np.ndarray
    misclassified: np.ndarray
    restarts_used: int
    found_norm: Optional[np.ndarray] = field(default=None)

    def __len__(self) -> int:
        return len(self.loss)


# helpers ----------------------------------------------------------------------


def example_streams(rng, n: int) -> list:
    if isinstance(rng, np.random.Generator):
        return rng.spawn(n)
    if rng is None or isinstance(rng, (int, np.integer, np.random.SeedSequence)):
        return np.random.default_rng(rng).spawn(n)
    streams = list(rng)
    if len(streams) != n:
        raise ValueError(f"expected {n} per-example generators, got {len(streams)}")
    return streams


def _prepare(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if x.ndim != 4 or len(x) != len(y):
        raise ValueError(f"expected x of shape (B, C, H, W) and B labels, got {x.shape} and {y.shape}")
    return x, y


def _evaluate(model, params, x, y, delta):
    loss, logits = per_example_loss(model, params, x + delta, y)
    return loss, logits.argmax(axis=1) != y


def _better(new_mis, new_loss, old_mis, old_loss):
    """Misclassification dominates; otherwise strictly higher loss wins."""
    return (new_mis & ~old_mis) | ((new_mis == old_mis) & (new_loss > old_loss))


class _Best:
    def __init__(self):
        self.delta = self.loss = self.mis = None

    def offer(self, delta, loss, mis):
        if self.delta is None:
            self.delta, self.loss, self.mis = delta.copy(), loss.copy(), mis.copy()
            return
        take = _better(mis, loss, self.mis, self.loss)
        self.delta[take] = delta[take]
        self.loss[take] = loss[take]
        self.mis[take] = mis[take]


def _outcome(best: _Best, restarts: int, found_norm=None) -> AttackOutcome:
    return AttackOutcome(best.delta, best.loss, norms_rows(best.delta), best.mis, restarts, found_norm)


def _draw_ks(spec: PerturbationSpec, streams, n: int) -> np.ndarray:
    return np.array([sample_k(spec.k_range, g, n) for g in streams], dtype=np.int64)


def _random_start(ball: BallSpec, x, streams):
    delta = np.stack([random_in_ball(ball, x.shape[1:], g) for g in streams])
    return clamp_to_image(x, delta)


def _step(spec: PerturbationSpec, x, delta, grad, ks=None):
    """One projected steepest-ascent step followed by the pixel-box clamp."""
    if spec.norm is NormKind.LINF:
        v = steepest_linf(grad, spec.alpha)
    elif spec.norm is NormKind.L2:
        v = steepest_l2_rows(grad, spec.alpha)
    else:
        v = steepest_l1_rows(grad, spec.alpha, ks, x + delta)
    return clamp_to_image(x, project_rows(spec.norm, delta + v, spec.epsilon))


# gradient attacks -------------------------------------------------------------


def pgd(model: ModelSpec, params: ParameterSet, x, y, spec: PerturbationSpec, rng=None) -> AttackOutcome:
    """Projected steepest ascent in one lp ball with restarts.

    Restart 0 starts from zero; later restarts start from a random point of the
    ball.  Each example keeps its best restart.
    """
    x, y = _prepare(x, y)
    streams = example_streams(rng, len(x))
    n = int(np.prod(x.shape[1:]))
    best = _Best()
    for r in range(spec.restarts):
        delta = np.zeros_like(x) if r == 0 else _random_start(spec.ball, x, streams)
        for _ in range(spec.iterations):
            _, grad, _ = loss_and_input_grad(model, params, x + delta, y)
            ks = _draw_ks(spec, streams, n) if spec.norm is NormKind.L1 else None
            delta = _step(spec, x, delta, grad, ks)
        best.offer(delta, *_evaluate(model, params, x, y, delta))
    return _outcome(best, spec.restarts)


def fgsm(model: ModelSpec, params: ParameterSet, x, y, epsilon: float) -> AttackOutcome:
    x, y = _prepare(x, y)
    _, grad, _ = loss_and_input_grad(model, params, x, y)
    delta = clamp_to_image(x, project_rows(NormKind.LINF, epsilon * np.sign(grad), epsilon))
    best = _Best()
    best.offer(delta, *_evaluate(model, params, x, y, delta))
    return _outcome(best, 1)


def momentum_update(g, grad, mu: float):
    """Accumulate the l1-normalised gradient into the momentum buffer."""
    flat = np.abs(grad).reshape(len(grad), -1).sum(axis=1)
    scale = np.divide(1.0, flat, out=np.zeros_like(flat), where=flat > 0)
    return mu * g + grad * scale.reshape((-1,) + (1,) * (grad.ndim - 1))


def mim(model: ModelSpec, params: ParameterSet, x, y, spec: PerturbationSpec, rng=None) -> AttackOutcome:
    """Momentum iterative method (linf only)."""
    if spec.norm is not NormKind.LINF:
        raise ValueError("the momentum iterative method is defined for the linf ball only")
    x, y = _prepare(x, y)
    streams = example_streams(rng, len(x))
    eps = spec.epsilon
    best = _Best()
    for r in range(spec.restarts):
        delta = np.zeros_like(x) if r == 0 else _random_start(spec.ball, x, streams)
        g = np.zeros_like(x)
        for _ in range(spec.iterations):
            _, grad, _ = loss_and_input_grad(model, params, x + delta, y)
            g = momentum_update(g, grad, spec.momentum)
            delta = clamp_to_image(x, project_rows(NormKind.LINF, delta + spec.alpha * np.sign(g), eps))
        best.offer(delta, *_evaluate(model, params, x, y, delta))
    return _outcome(best, spec.restarts)


def msd(model: ModelSpec, params: ParameterSet, x, y, specs: Sequence[PerturbationSpec], iterations: int,
        rng=None, restarts: Optional[int] = None, trace: Optional[list] = None) -> AttackOutcome:
    """Multi steepest descent over the union of the given balls.

    Each iteration takes one projected step per ball from the current point
    and moves to the candidate with the highest loss (ties resolved in the
    order linf, l2, l1).  Restart ``r >= 1`` starts from a random point of ball
    ``(r - 1) mod |S|``.  When ``trace`` is a list, one ``(candidate_losses,
    chosen_index, chosen_loss)`` tuple is appended per iteration.
    """
    if not specs:
        raise ValueError("msd needs at least one perturbation spec")
    specs = sorted(specs, key=lambda s: s.norm.order)
    if len({s.norm for s in specs}) != len(specs):
        raise ValueError("msd takes at most one spec per norm")
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    x, y = _prepare(x, y)
    streams = example_streams(rng, len(x))
    n = int(np.prod(x.shape[1:]))
    n_restarts = restarts if restarts is not None else max(s.restarts for s in specs)
    l1_spec = next((s for s in specs if s.norm is NormKind.L1), None)
    rows = np.arange(len(x))
    best = _Best()
    for r in range(n_restarts):
        if r == 0:
            delta = np.zeros_like(x)
        else:
            delta = _random_start(specs[(r - 1) % len(specs)].ball, x, streams)
        for _ in range(iterations):
            _, grad, _ = loss_and_input_grad(model, params, x + delta, y)
            ks = _draw_ks(l1_spec, streams, n) if l1_spec is not None else None
            candidates = []
            losses = []
            wrong = []
            for spec in specs:
                cand = _step(spec, x, delta, grad, ks)
                loss, mis = _evaluate(model, params, x, y, cand)
                candidates.append(cand)
                losses.append(loss)
                wrong.append(mis)
            losses = np.stack(losses)
            choice = np.argmax(losses, axis=0)
            delta = np.stack(candidates)[choice, rows]
            chosen_loss = losses[choice, rows]
            chosen_mis = np.stack(wrong)[choice, rows]
            if trace is not None:
                trace.append((losses, choice, chosen_loss))
        best.offer(delta, chosen_loss, chosen_mis)
    return _outcome(best, n_restarts)


# decision-based attacks -------------------------------------------------------


def _ladder(start: float, stop: float, steps: int = 10) -> np.ndarray:
    return np.geomspace(start, stop, steps)


def gaussian_noise_attack(model: ModelSpec, params: ParameterSet, x, y, ball: BallSpec, trials: int = 1,
                          rng=None, scales: int = 10) -> AttackOutcome:
    """Random Gaussian noise at increasing scales, projected onto the l2 ball.

    Per-pixel standard deviations run geometrically from ``0.1`` to ``10``
    times ``eps / sqrt(n)`` (the scale whose expected l2 norm is ``eps``).
    The first misclassifying sample is kept, else the highest-loss one.
    """
    if ball.norm is not NormKind.L2:
        raise ValueError("the Gaussian noise attack uses an l2 ball")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    x, y = _prepare(x, y)
    streams = example_streams(rng, len(x))
    eps = ball.epsilon
    n = int(np.prod(x.shape[1:]))
    delta0 = np.zeros_like(x)
    best = _Best()
    best.offer(delta0, *_evaluate(model, params, x, y, delta0))
    if eps == 0:
        return _outcome(best, trials)
    sigmas = _ladder(0.1, 10.0, scales) * eps / np.sqrt(n)
    for _ in range(trials):
        for sigma in sigmas:
            noise = np.stack([g.standard_normal(x.shape[1:]) for g in streams]) * sigma
            delta = clamp_to_image(x, project_rows(NormKind.L2, noise, eps))
            loss, mis = _evaluate(model, params, x, y, delta)
            take = ~best.mis & (mis | (loss > best.loss))
            best.delta[take] = delta[take]
            best.loss[take] = loss[take]
            best.mis[take] = mis[take]
    return _outcome(best, trials)


def salt_pepper_noise(x: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Set each pixel of ``x`` to 0 or 1 (fair coin) with probability ``fraction``."""
    x = np.asarray(x, dtype=np.float64)
    flip = rng.random(x.shape) < fraction
    value = (rng.random(x.shape) < 0.5).astype(np.float64)
    return np.where(flip, value, x)


def _predict_wrong(model, params, xs, ys):
    logits = per_example_loss(model, params, xs, ys)[1]
    return logits.argmax(axis=1) != ys


def _reset_sweep(model, params, x, y, adv, active, streams):
    """One random-order pass that resets perturbed pixels while the label stays wrong.

    Runs in lockstep over the ``active`` rows; returns the updated images and a
    per-row flag telling whether anything was reset.
    """
    adv = adv.copy()
    b = len(x)
    flat_x = x.reshape(b, -1)
    flat_adv = adv.reshape(b, -1)
    orders = {}
    for i in np.flatnonzero(active):
        idx = np.flatnonzero(flat_adv[i] != flat_x[i])
        orders[i] = idx[streams[i].permutation(len(idx))]
    changed = np.zeros(b, dtype=bool)
    longest = max((len(o) for o in orders.values()), default=0)
    for s in range(longest):
        rows = np.array([i for i, o in orders.items() if len(o) > s], dtype=np.int64)
        pix = np.array([orders[i][s] for i in rows], dtype=np.int64)
        trial = flat_adv[rows].copy()
        trial[np.arange(len(rows)), pix] = flat_x[rows, pix]
        still = _predict_wrong(model, params, trial.reshape((len(rows),) + x.shape[1:]), y[rows])
        keep = rows[still]
        flat_adv[keep, pix[still]] = flat_x[keep, pix[still]]
        changed[keep] = True
    return flat_adv.reshape(x.shape), changed


def _first_salt_pepper(model, params, x, y, streams, pending):
    """Walk the flip-fraction ladder; returns images and a found-mask for ``pending`` rows."""
    n = int(np.prod(x.shape[1:]))
    adv = x.copy()
    found = np.zeros(len(x), dtype=bool)
    for frac in _ladder(min(1.0, 1.0 / n), 1.0):
        rows = np.flatnonzero(pending & ~found)
        if len(rows) == 0:
            break
        cand = np.stack([salt_pepper_noise(x[i], frac, streams[i]) for i in rows])
        wrong = _predict_wrong(model, params, cand, y[rows])
        adv[rows[wrong]] = cand[wrong]
        found[rows[wrong]] = True
    return adv, found


def _l1_finish(model, params, x, y, best_adv, best_norm, epsilon_l1, restarts):
    ok = best_norm <= epsilon_l1 * (1 + FEASIBILITY_RTOL)
    delta = np.where(ok.reshape((-1,) + (1,) * (x.ndim - 1)), best_adv - x, 0.0)
    out = _Best()
    out.offer(delta, *_evaluate(model, params, x, y, delta))
    return _outcome(out, restarts, found_norm=best_norm)


def salt_pepper_attack(model: ModelSpec, params: ParameterSet, x, y, epsilon_l1: float, trials: int = 1,
                       rng=None) -> AttackOutcome:
    """Salt-and-pepper noise at increasing densities, greedily thinned.

    Per trial the first misclassifying noise level is thinned by one random
    pass of single-pixel resets.  The smallest-l1 result over trials counts
    as a success only if it fits the budget.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    x, y = _prepare(x, y)
    streams = example_streams(rng, len(x))
    clean_wrong = _predict_wrong(model, params, x, y)
    best_adv = x.copy()
    best_norm = np.where(clean_wrong, 0.0, np.inf)
    for _ in range(trials):
        adv, found = _first_salt_pepper(model, params, x, y, streams, ~clean_wrong)
        adv, _ = _reset_sweep(model, params, x, y, adv, found, streams)
        l1 = norms_rows(adv - x)[:, 2]
        take = found & (l1 < best_norm)
        best_adv[take] = adv[take]
        best_norm[take] = l1[take]
    return _l1_finish(model, params, x, y, best_adv, best_norm, epsilon_l1, trials)


def pointwise_attack(model: ModelSpec, params: ParameterSet, x, y, epsilon_l1: float, restarts: int = 1,
                     rng=None) -> AttackOutcome:
    """Decision-based minimisation of a misclassifying salt-and-pepper start.

    Sweeps the perturbed pixels in a fresh random order, resetting each to its
    clean value whenever the label stays wrong, until a sweep changes nothing.
    The result is therefore minimal under single-pixel resets.
    """
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    x, y = _prepare(x, y)
    streams = example_streams(rng, len(x))
    clean_wrong = _predict_wrong(model, params, x, y)
    best_adv = x.copy()
    best_norm = np.where(clean_wrong, 0.0, np.inf)
    for _ in range(restarts):
        adv, found = _first_salt_pepper(model, params, x, y, streams, ~clean_wrong)
        active = found.copy()
        while active.any():
            adv, changed = _reset_sweep(model, params, x, y, adv, active, streams)
            active &= changed
        l1 = norms_rows(adv - x)[:, 2]
        take = found & (l1 < best_norm)
        best_adv[take] = adv[take]
        best_norm[take] = l1[take]
    return _l1_finish(model, params, x, y, best_adv, best_norm, epsilon_l1, restarts)
