"""Per-example worst case over an attack suite, robustness curves, filter sparsity."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .adversary import (
    FEASIBILITY_RTOL,
    AttackOutcome,
    PerturbationSpec,
    fgsm,
    gaussian_noise_attack,
    mim,
    msd,
    pgd,
    pointwise_attack,
    salt_pepper_attack,
)
from .data_io import Dataset
from .geometry import NormKind
from .models import ModelSpec, ParameterSet, predict_logits
from .training import map_chunks

_EVAL_TAG = 0xE7A1

ATTACK_KINDS = ("pgd", "fgsm", "mim", "msd", "gaussian", "salt_pepper", "pointwise")
GROUP_ORDER = (NormKind.LINF, NormKind.L2, NormKind.L1)


@dataclass(frozen=True)
class AttackEntry:
    """One suite member.

    ``spec`` carries the budget (and, for gradient attacks, the step size,
    iterations and restarts).  ``trials`` is used by the noise attacks, and
    ``extra`` holds the other balls for an ``msd`` entry.
    """

    id: str
    kind: str
    spec: PerturbationSpec
    trials: int = 1
    extra: Tuple[PerturbationSpec, ...] = ()

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind in ("fgsm", "mim") and self.spec.norm is not NormKind.LINF:
            raise ValueError(f"{self.kind} is an linf attack")
        if self.kind == "gaussian" and self.spec.norm is not NormKind.L2:
            raise ValueError("the Gaussian noise attack is an l2 attack")
        if self.kind in ("salt_pepper", "pointwise") and self.spec.norm is not NormKind.L1:
            raise ValueError(f"{self.kind} is scored in the l1 ball")

    @property
    def group(self) -> NormKind:
        return self.spec.norm

    @property
    def epsilon(self) -> float:
        return self.spec.epsilon

    def with_epsilon(self, epsilon: float) -> "AttackEntry":
        base = self.spec.epsilon
        alpha = self.spec.alpha * (epsilon / base) if base > 0 and epsilon > 0 else self.spec.alpha
        spec = self.spec.replace(epsilon=epsilon, alpha=alpha)
        return AttackEntry(self.id, self.kind, spec, self.trials, self.extra)


class AttackSuite(list):
    """Ordered list of :class:`AttackEntry` with unique ids."""

    def __init__(self, entries: Sequence[AttackEntry] = ()):
        super().__init__(entries)
        ids = [e.id for e in self]
        if len(set(ids)) != len(ids):
            raise ValueError(f"attack ids must be unique, got {ids}")

    def ids(self) -> List[str]:
        return [e.id for e in self]

    def get(self, attack_id: str) -> AttackEntry:
        for e in self:
            if e.id == attack_id:
                return e
        raise KeyError(attack_id)


def default_suite(specs: Dict[NormKind, PerturbationSpec], trials: int = 5,
                  pointwise_restarts: Optional[int] = None) -> AttackSuite:
    """linf: PGD, FGSM, MIM; l2: PGD, Gaussian noise; l1: PGD, salt-and-pepper, pointwise."""
    entries = []
    s = specs.get(NormKind.LINF)
    if s is not None:
        mim_spec = s if s.momentum > 0 else s.replace(momentum=0.9)
        entries += [AttackEntry("pgd_linf", "pgd", s), AttackEntry("fgsm", "fgsm", s),
                    AttackEntry("mim", "mim", mim_spec)]
    s = specs.get(NormKind.L2)
    if s is not None:
        entries += [AttackEntry("pgd_l2", "pgd", s), AttackEntry("gaussian_noise", "gaussian", s, trials)]
    s = specs.get(NormKind.L1)
    if s is not None:
        restarts = pointwise_restarts if pointwise_restarts is not None else s.restarts
        entries += [AttackEntry("pgd_l1", "pgd", s), AttackEntry("salt_pepper", "salt_pepper", s, trials),
                    AttackEntry("pointwise", "pointwise", s, restarts)]
    return AttackSuite(entries)


def run_attack(entry: AttackEntry, model: ModelSpec, params: ParameterSet, x, y, rng) -> AttackOutcome:
    s = entry.spec
    if entry.kind == "pgd":
        return pgd(model, params, x, y, s, rng)
    if entry.kind == "fgsm":
        return fgsm(model, params, x, y, s.epsilon)
    if entry.kind == "mim":
        return mim(model, params, x, y, s, rng)
    if entry.kind == "msd":
        return msd(model, params, x, y, (s,) + tuple(entry.extra), s.iterations, rng)
    if entry.kind == "gaussian":
        return gaussian_noise_attack(model, params, x, y, s.ball, entry.trials, rng)
    if entry.kind == "salt_pepper":
        return salt_pepper_attack(model, params, x, y, s.epsilon, entry.trials, rng)
    return pointwise_attack(model, params, x, y, s.epsilon, entry.trials, rng)


def attack_success(entry: AttackEntry, outcome: AttackOutcome, x: np.ndarray) -> np.ndarray:
    """Misclassified, within budget, and inside the pixel box."""
    if entry.kind == "msd":
        balls = (entry.spec,) + tuple(entry.extra)
        feasible = np.zeros(len(x), dtype=bool)
        for b in balls:
            feasible |= outcome.norms[:, b.norm.order] <= b.epsilon * (1 + FEASIBILITY_RTOL)
    else:
        feasible = outcome.norms[:, entry.group.order] <= entry.epsilon * (1 + FEASIBILITY_RTOL)
    adv = (x + outcome.delta).reshape(len(x), -1)
    in_box = (adv >= 0).all(axis=1) & (adv <= 1).all(axis=1)
    return outcome.misclassified & feasible & in_box


def eval_rngs(seed: int, attack_index: int, indices) -> list:
    return [np.random.default_rng([seed, _EVAL_TAG, attack_index, int(i)]) for i in indices]


@dataclass
class UnionReport:
    attack_ids: List[str]
    groups: List[NormKind]
    clean_correct: np.ndarray  # (N,) bool
    success: np.ndarray  # (N, A) bool

    def __post_init__(self):
        self.clean_correct = np.asarray(self.clean_correct, dtype=bool)
        self.success = np.asarray(self.success, dtype=bool).reshape(len(self.clean_correct), len(self.attack_ids))

    @property
    def n(self) -> int:
        return len(self.clean_correct)

    def _acc(self, mask) -> float:
        return float(mask.mean()) if self.n else 0.0

    @property
    def clean_accuracy(self) -> float:
        return self._acc(self.clean_correct)

    def robust_mask(self, columns=None) -> np.ndarray:
        cols = self.success if columns is None else self.success[:, columns]
        return self.clean_correct & ~cols.any(axis=1)

    def attack_accuracy(self) -> Dict[str, float]:
        return {a: self._acc(self.robust_mask([j])) for j, a in enumerate(self.attack_ids)}

    def group_accuracy(self) -> Dict[NormKind, float]:
        out = {}
        for g in GROUP_ORDER:
            cols = [j for j, h in enumerate(self.groups) if h is g]
            if cols:
                out[g] = self._acc(self.robust_mask(cols))
        return out

    @property
    def union_accuracy(self) -> float:
        return self._acc(self.robust_mask())

    def check(self) -> None:
        """Raise ``AssertionError`` if the accounting invariants fail."""
        union = self.union_accuracy
        attacks = self.attack_accuracy()
        assert union <= self.clean_accuracy
        for g, acc in self.group_accuracy().items():
            assert union <= acc, (g, union, acc)
            for a, h in zip(self.attack_ids, self.groups):
                if h is g:
                    assert acc <= attacks[a], (g, a, acc, attacks[a])
        again = UnionReport.from_bitmap(self.attack_ids, self.groups, self.clean_correct, self.success)
        assert again.summary() == self.summary()

    @classmethod
    def from_bitmap(cls, attack_ids, groups, clean_correct, success) -> "UnionReport":
        return cls(list(attack_ids), list(groups), np.array(clean_correct, dtype=bool), np.array(success, dtype=bool))

    def summary(self) -> Dict[str, float]:
        out = {"clean": self.clean_accuracy}
        out.update({f"attack.{a}": v for a, v in self.attack_accuracy().items()})
        out.update({f"group.{g.value}": v for g, v in self.group_accuracy().items()})
        out["union"] = self.union_accuracy
        return out

    def records(self) -> List[str]:
        """Line-delimited ``key=value`` records in a stable order."""
        lines = [f"row=clean accuracy={self.clean_accuracy:.6f} n={self.n}"]
        attacks = self.attack_accuracy()
        for a, g in zip(self.attack_ids, self.groups):
            lines.append(f"row=attack id={a} group={g.value} accuracy={attacks[a]:.6f}")
        for g, acc in self.group_accuracy().items():
            lines.append(f"row=group group={g.value} accuracy={acc:.6f}")
        if self.attack_ids:
            lines.append(f"row=all accuracy={self.union_accuracy:.6f}")
        return lines

    def table(self) -> str:
        rows = [("Clean accuracy", self.clean_accuracy)]
        attacks = self.attack_accuracy()
        groups = self.group_accuracy()
        for g in GROUP_ORDER:
            members = [a for a, h in zip(self.attack_ids, self.groups) if h is g]
            if not members:
                continue
            rows += [(f"  {a}", attacks[a]) for a in members]
            rows.append((f"{g.value} attacks", groups[g]))
        if self.attack_ids:
            rows.append(("All attacks", self.union_accuracy))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {100 * acc:6.1f}%" for name, acc in rows)


def evaluate(model: ModelSpec, params: ParameterSet, dataset: Dataset, suite: Sequence[AttackEntry],
             seed: int = 0, chunk: int = 100, threads: int = 1) -> UnionReport:
    """Robust iff clean-correct and no suite attack succeeds within its budget."""
    suite = AttackSuite(suite)
    x, y = dataset.inputs, dataset.labels

    def run(sl: slice):
        xs, ys = x[sl], y[sl]
        correct = predict_logits(model, params, xs).argmax(axis=1) == ys
        bits = np.zeros((len(xs), len(suite)), dtype=bool)
        idx = np.arange(sl.start, sl.stop)
        for j, entry in enumerate(suite):
            outcome = run_attack(entry, model, params, xs, ys, eval_rngs(seed, j, idx))
            bits[:, j] = attack_success(entry, outcome, xs)
        return correct, bits

    parts = map_chunks(run, len(x), chunk, threads)
    correct = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, dtype=bool)
    bits = np.concatenate([p[1] for p in parts]) if parts else np.zeros((0, len(suite)), dtype=bool)
    report = UnionReport(suite.ids(), [e.group for e in suite], correct, bits)
    report.check()
    return report


def robustness_curve(model: ModelSpec, params: ParameterSet, dataset: Dataset, family: Sequence[AttackEntry],
                     epsilon_grid: Sequence[float], seed: int = 0, chunk: int = 100,
                     threads: int = 1) -> List[Tuple[float, float]]:
    """Accuracy against the family as a function of the budget.

    Each example's breaking budget is the smallest grid value at which some
    family member succeeds; once broken it stays broken at larger budgets, so
    the curve never increases.  Step sizes scale with the budget.
    """
    grid = [float(e) for e in epsilon_grid]
    if not grid:
        raise ValueError("epsilon grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("epsilon grid must be strictly increasing")
    if any(e < 0 for e in grid):
        raise ValueError("epsilons must be non-negative")
    family = AttackSuite(family)
    x, y = dataset.inputs, dataset.labels
    correct = predict_logits(model, params, x).argmax(axis=1) == y
    broken_at = np.where(correct, np.inf, -np.inf)
    curve = []
    for eps in grid:
        if eps > 0:
            entries = [e.with_epsilon(eps) for e in family]

            def run(sl: slice):
                live = np.isinf(broken_at[sl]) & (broken_at[sl] > 0)
                hit = np.zeros(sl.stop - sl.start, dtype=bool)
                if not live.any():
                    return hit
                xs, ys = x[sl], y[sl]
                idx = np.arange(sl.start, sl.stop)
                for j, entry in enumerate(entries):
                    outcome = run_attack(entry, model, params, xs, ys, eval_rngs(seed, j, idx))
                    hit |= attack_success(entry, outcome, xs)
                return hit & live

            hits = map_chunks(run, len(x), chunk, threads)
            if hits:
                broken_at[np.concatenate(hits)] = eps
        acc = float((broken_at > eps).mean()) if len(x) else 0.0
        curve.append((eps, acc))
    for (_, a), (_, b) in zip(curve, curve[1:]):
        assert b <= a, "robustness curve must be non-increasing"
    return curve


@dataclass
class FilterReport:
    flagged: int
    ratios: np.ndarray
    threshold: float

    def records(self) -> List[str]:
        lines = [f"filters={len(self.ratios)} flagged={self.flagged} threshold={self.threshold:g}"]
        lines += [f"filter={i} ratio={r:.6g} flagged={int(r > self.threshold)}" for i, r in enumerate(self.ratios)]
        return lines


class NotConvolutionalError(ValueError):
    pass


def filter_sparsity_report(params: ParameterSet, threshold: float = 10.0, tiny: float = 1e-12) -> FilterReport:
    """Dominance ratio ``max|w| / (sum|w| - max|w| + tiny)`` of each first-layer filter."""
    first = next(iter(params), None)
    if first is None or np.ndim(params[first]) != 4:
        raise NotConvolutionalError("the first layer is not convolutional; filter sparsity is undefined")
    w = np.abs(params[first]).reshape(len(params[first]), -1)
    peak = w.max(axis=1)
    ratios = peak / (w.sum(axis=1) - peak + tiny)
    return FilterReport(int((ratios > threshold).sum()), ratios, threshold)
