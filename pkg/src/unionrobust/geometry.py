"""lp-ball primitives for p in {inf, 2, 1}.

The public single-vector functions treat their whole input as one vector.
The ``*_rows`` variants treat axis 0 as a batch and every remaining axis as
the vector, which is what the attacks use.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "NormKind",
    "BallSpec",
    "norm",
    "norms_rows",
    "steepest_linf",
    "steepest_l2",
    "steepest_l1",
    "project_linf",
    "project_l2",
    "project_l1",
    "random_in_ball",
    "clamp_to_image",
]


class NormKind(enum.Enum):
    LINF = "linf"
    L2 = "l2"
    L1 = "l1"

    @classmethod
    def parse(cls, value) -> "NormKind":
        if isinstance(value, cls):
            return value
        aliases = {"inf": "linf", "linf": "linf", "l_inf": "linf", "2": "l2", "l2": "l2", "1": "l1", "l1": "l1"}
        key = aliases.get(str(value).lower())
        if key is None:
            raise ValueError(f"unknown norm {value!r}")
        return cls(key)

    @property
    def order(self) -> int:
        """Fixed tie-break position: linf, l2, l1."""
        return _ORDER[self]


_ORDER = {NormKind.LINF: 0, NormKind.L2: 1, NormKind.L1: 2}


@dataclass(frozen=True)
class BallSpec:
    norm: NormKind
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "norm", NormKind.parse(self.norm))
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")


def _flat(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape[0], -1) if a.ndim > 1 else a.reshape(1, -1)


def norms_rows(delta: np.ndarray) -> np.ndarray:
    """(B, 3) array of per-row (linf, l2, l1) norms."""
    d = np.abs(np.asarray(delta, dtype=np.float64).reshape(len(delta), -1))
    if d.shape[1] == 0:
        return np.zeros((len(d), 3))
    return np.stack([d.max(axis=1), np.sqrt((d * d).sum(axis=1)), d.sum(axis=1)], axis=1)


def norm(delta: np.ndarray, kind) -> float:
    kind = NormKind.parse(kind)
    return float(norms_rows(np.asarray(delta).reshape(1, -1))[0, kind.order])


# steepest ascent directions -------------------------------------------------


def steepest_linf(grad, alpha: float) -> np.ndarray:
    return alpha * np.sign(np.asarray(grad, dtype=np.float64))


def steepest_l2_rows(grad: np.ndarray, alpha) -> np.ndarray:
    g = np.asarray(grad, dtype=np.float64)
    flat = g.reshape(len(g), -1)
    n = np.sqrt((flat * flat).sum(axis=1))
    scale = np.divide(np.asarray(alpha, dtype=np.float64), n, out=np.zeros_like(n), where=n > 0)
    return g * scale.reshape((-1,) + (1,) * (g.ndim - 1))


def steepest_l2(grad, alpha: float) -> np.ndarray:
    g = np.asarray(grad, dtype=np.float64)
    return steepest_l2_rows(g.reshape(1, -1), alpha).reshape(g.shape)


def steepest_l1_rows(grad: np.ndarray, alpha: float, ks: Sequence[int], x_adv: np.ndarray) -> np.ndarray:
    """Top-k coordinate step per row, restricted to coordinates that can move.

    Row ``i`` steps its ``ks[i]`` eligible coordinates of largest ``|grad|`` by
    ``alpha / ks[i]`` in the gradient's sign direction.  A coordinate is
    ineligible when its pixel already sits on the box face the step points
    through (value <= 0 with a negative step, >= 1 with a positive one) or its
    gradient is zero.  Ties go to the lowest index.
    """
    g = _flat(grad)
    cur = _flat(x_adv)
    b, n = g.shape
    ks = np.asarray(ks, dtype=np.int64).reshape(-1)
    if ks.shape != (b,):
        raise ValueError(f"need one k per row, got {ks.shape} for {b} rows")
    sign = np.sign(g)
    blocked = (sign == 0) | ((sign < 0) & (cur <= 0.0)) | ((sign > 0) & (cur >= 1.0))
    score = np.where(blocked, -1.0, np.abs(g))
    order = np.argsort(-score, axis=1, kind="stable")
    kmax = int(min(ks.max(initial=0), n))
    step = np.zeros_like(g)
    if kmax == 0:
        return step.reshape(np.shape(grad))
    top = order[:, :kmax]
    rows = np.arange(b)[:, None]
    chosen = (np.arange(kmax)[None, :] < ks[:, None]) & ~blocked[rows, top]
    size = alpha / ks.astype(np.float64)
    step[rows, top] = np.where(chosen, sign[rows, top] * size[:, None], 0.0)
    return step.reshape(np.shape(grad))


def sample_k(k_range, rng: np.random.Generator, n: int) -> int:
    k1, k2 = int(k_range[0]), int(k_range[1])
    if not 1 <= k1 <= k2:
        raise ValueError(f"invalid k range {k_range}")
    k2 = min(k2, n)
    k1 = min(k1, k2)
    return int(rng.integers(k1, k2 + 1))


def steepest_l1(grad, alpha: float, k_range, x_plus_delta, rng: np.random.Generator) -> np.ndarray:
    g = np.asarray(grad, dtype=np.float64)
    k = sample_k(k_range, rng, g.size)
    return steepest_l1_rows(g.reshape(1, -1), alpha, [k], np.reshape(x_plus_delta, (1, -1))).reshape(g.shape)


# projections ----------------------------------------------------------------


def project_linf(delta, epsilon: float) -> np.ndarray:
    return np.clip(np.asarray(delta, dtype=np.float64), -epsilon, epsilon)


def project_l2_rows(delta: np.ndarray, epsilon: float) -> np.ndarray:
    d = np.asarray(delta, dtype=np.float64)
    n = np.sqrt((d.reshape(len(d), -1) ** 2).sum(axis=1))
    scale = np.divide(epsilon, n, out=np.ones_like(n), where=n > epsilon)
    return d * scale.reshape((-1,) + (1,) * (d.ndim - 1))


def project_l2(delta, epsilon: float) -> np.ndarray:
    d = np.asarray(delta, dtype=np.float64)
    return project_l2_rows(d.reshape(1, -1), epsilon).reshape(d.shape)


def project_l1_rows(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Euclidean projection of each row onto the l1 ball (sort and threshold)."""
    d = np.asarray(delta, dtype=np.float64)
    flat = d.reshape(len(d), -1)
    mag = np.abs(flat)
    outside = mag.sum(axis=1) > epsilon
    out = flat.copy()
    if not outside.any():
        return out.reshape(d.shape)
    if epsilon <= 0:
        out[outside] = 0.0
        return out.reshape(d.shape)
    m = mag[outside]
    gamma = -np.sort(-m, axis=1)
    csum = np.cumsum(gamma, axis=1)
    j = np.arange(1, m.shape[1] + 1)
    positive = gamma - (csum - epsilon) / j > 0
    rho = m.shape[1] - np.argmax(positive[:, ::-1], axis=1)  # last j where positive
    eta = (csum[np.arange(len(m)), rho - 1] - epsilon) / rho
    out[outside] = np.sign(flat[outside]) * np.maximum(m - eta[:, None], 0.0)
    return out.reshape(d.shape)


def project_l1(delta, epsilon: float) -> np.ndarray:
    d = np.asarray(delta, dtype=np.float64)
    return project_l1_rows(d.reshape(1, -1), epsilon).reshape(d.shape)


def project_rows(kind: NormKind, delta: np.ndarray, epsilon: float) -> np.ndarray:
    if kind is NormKind.LINF:
        return project_linf(delta, epsilon)
    if kind is NormKind.L2:
        return project_l2_rows(delta, epsilon)
    return project_l1_rows(delta, epsilon)


# sampling and the pixel box -------------------------------------------------


def random_in_ball(ball: BallSpec, shape, rng: np.random.Generator) -> np.ndarray:
    """One random point of the ball.

    linf: iid uniform.  l2 and l1: a uniform direction on the sphere (normalised
    Gaussian, or normalised Laplace for l1) scaled to radius ``eps * u**(1/n)``.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    n = int(np.prod(shape))
    eps = float(ball.epsilon)
    if ball.norm is NormKind.LINF:
        return rng.uniform(-eps, eps, size=shape)
    if ball.norm is NormKind.L2:
        direction = rng.standard_normal(n)
        length = np.sqrt((direction * direction).sum())
    else:
        direction = rng.laplace(size=n)
        length = np.abs(direction).sum()
    radius = eps * rng.uniform() ** (1.0 / n)
    if length == 0 or eps == 0:
        return np.zeros(shape)
    return (direction * (radius / length)).reshape(shape)


def clamp_to_image(x, delta) -> np.ndarray:
    """The perturbation that results from clipping ``x + delta`` into [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip(delta, -x, 1.0 - x)
