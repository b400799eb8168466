"""Adversarial training: clean, single-norm, max, avg and MSD strategies."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .adversary import PerturbationSpec, msd, pgd
from .autodiff import Tape, softmax_cross_entropy
from .data_io import Dataset
from .models import ModelSpec, ParameterSet, build, forward, per_example_loss

logger = logging.getLogger(__name__)

STRATEGIES = ("clean", "single", "max", "avg", "msd")

# Stream tags keep training and evaluation randomness disjoint.
_TRAIN_TAG = 0x7A1


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    strategy: str = "msd"
    specs: Tuple[PerturbationSpec, ...] = ()
    msd_iterations: Optional[int] = None
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    schedule: Tuple[Tuple[float, float], ...] = ((0.0, 0.0), (6.0, 1e-3), (15.0, 0.0))
    epochs: int = 15
    batch_size: int = 50
    seed: int = 0
    threads: int = 1
    chunk_size: int = 64

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.specs = tuple(self.specs)
        self.schedule = tuple((float(e), float(v)) for e, v in self.schedule)
        epochs = [e for e, _ in self.schedule]
        if not self.schedule or any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("schedule breakpoints must be strictly increasing in epoch")
        if any(v < 0 for _, v in self.schedule):
            raise ValueError("learning rates must be non-negative")
        if self.strategy != "clean" and not self.specs:
            raise ValueError(f"strategy {self.strategy!r} needs at least one perturbation spec")
        if self.strategy == "single" and len(self.specs) != 1:
            raise ValueError("strategy 'single' takes exactly one perturbation spec")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @property
    def inner_iterations(self) -> int:
        if self.msd_iterations is not None:
            return int(self.msd_iterations)
        return max(s.iterations for s in self.specs)


@dataclass
class EpochRecord:
    epoch: int
    clean_acc: float
    adv_loss: float
    lr: float
    wall_time: float

    def as_record(self) -> str:
        return (f"epoch={self.epoch} clean_acc={self.clean_acc:.6f} adv_loss={self.adv_loss:.6f} "
                f"lr={self.lr:.6g} wall_time={self.wall_time:.3f}")


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def learning_rate(schedule: Sequence[Tuple[float, float]], epoch: float) -> float:
    """Piecewise-linear interpolation; constant beyond the end points."""
    xs = [e for e, _ in schedule]
    ys = [v for _, v in schedule]
    return float(np.interp(epoch, xs, ys))


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict = {}

    def step(self, params: ParameterSet, grads: dict, lr: float) -> None:
        for name, p in params.items():
            g = grads[name] + self.weight_decay * p
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] = p - lr * v


class Adam:
    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: ParameterSet, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in params.items():
            g = grads[name] + self.weight_decay * p if self.weight_decay else grads[name]
            m = self.b1 * self.m.get(name, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(name, 0.0) + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.momentum, config.weight_decay)
    return Adam(config.betas, config.adam_eps, config.weight_decay)


# per-example randomness -------------------------------------------------------


def example_rngs(seed: int, epoch: int, indices, slot: int = 0) -> list:
    """Independent stream per (seed, epoch, example, spec slot)."""
    return [np.random.default_rng([seed, _TRAIN_TAG, epoch, int(i), slot]) for i in indices]


def map_chunks(fn: Callable[[slice], object], n: int, chunk: int, threads: int = 1) -> list:
    """Apply ``fn`` to fixed slices of ``range(n)``; results come back in order.

    Chunk boundaries do not depend on ``threads``, so results are identical
    for any thread count.
    """
    slices = [slice(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if threads <= 1 or len(slices) <= 1:
        return [fn(s) for s in slices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, slices))


# inner maximisation -----------------------------------------------------------


def _chunked_delta(attack, x, y, rngs, chunk, threads):
    parts = map_chunks(lambda s: attack(x[s], y[s], rngs[s]), len(x), chunk, threads)
    return np.concatenate([p.delta for p in parts]), np.concatenate([p.loss for p in parts])


def adv_example_single(model: ModelSpec, params: ParameterSet, x, y, spec: PerturbationSpec, rngs=None,
                       chunk: int = 64, threads: int = 1) -> np.ndarray:
    """x + delta from a per-example PGD attack in one ball."""
    rngs = rngs if rngs is not None else example_rngs(0, 0, range(len(x)))
    delta, _ = _chunked_delta(lambda a, b, r: pgd(model, params, a, b, spec, r), x, y, rngs, chunk, threads)
    return x + delta


def _per_spec(model, params, x, y, specs, rng_slots, chunk, threads):
    out = []
    for j, spec in enumerate(specs):
        attack = lambda a, b, r, spec=spec: pgd(model, params, a, b, spec, r)
        out.append(_chunked_delta(attack, x, y, rng_slots[j], chunk, threads))
    return out


def adv_example_max(model: ModelSpec, params: ParameterSet, x, y, specs: Sequence[PerturbationSpec],
                    rng_slots=None, chunk: int = 64, threads: int = 1) -> np.ndarray:
    """Per example, the highest-loss perturbation among independent PGD runs.

    Ties keep the earliest spec.
    """
    rng_slots = rng_slots if rng_slots is not None else [example_rngs(0, 0, range(len(x)), j) for j in range(len(specs))]
    results = _per_spec(model, params, x, y, specs, rng_slots, chunk, threads)
    losses = np.stack([loss for _, loss in results])
    choice = np.argmax(losses, axis=0)
    deltas = np.stack([d for d, _ in results])
    return x + deltas[choice, np.arange(len(x))]


def adv_example_avg(model: ModelSpec, params: ParameterSet, x, y, specs: Sequence[PerturbationSpec],
                    rng_slots=None, chunk: int = 64, threads: int = 1) -> List[np.ndarray]:
    """One perturbed copy of the batch per spec."""
    rng_slots = rng_slots if rng_slots is not None else [example_rngs(0, 0, range(len(x)), j) for j in range(len(specs))]
    return [x + d for d, _ in _per_spec(model, params, x, y, specs, rng_slots, chunk, threads)]


def adv_example_msd(model: ModelSpec, params: ParameterSet, x, y, specs: Sequence[PerturbationSpec],
                    iterations: int, rngs=None, chunk: int = 64, threads: int = 1) -> np.ndarray:
    rngs = rngs if rngs is not None else example_rngs(0, 0, range(len(x)))
    attack = lambda a, b, r: msd(model, params, a, b, specs, iterations, r)
    delta, _ = _chunked_delta(attack, x, y, rngs, chunk, threads)
    return x + delta


def _adversarial_batch(config: TrainConfig, model, params, x, y, epoch, idx):
    """List of input batches whose mean loss is the training objective."""
    common = dict(chunk=config.chunk_size, threads=config.threads)
    s = config.strategy
    if s == "clean":
        return [x]
    if s == "single":
        return [adv_example_single(model, params, x, y, config.specs[0], example_rngs(config.seed, epoch, idx), **common)]
    if s == "msd":
        return [adv_example_msd(model, params, x, y, config.specs, config.inner_iterations,
                                example_rngs(config.seed, epoch, idx), **common)]
    slots = [example_rngs(config.seed, epoch, idx, j) for j in range(len(config.specs))]
    if s == "max":
        return [adv_example_max(model, params, x, y, config.specs, slots, **common)]
    return adv_example_avg(model, params, x, y, config.specs, slots, **common)


def accuracy(model: ModelSpec, params: ParameterSet, x, y, batch_size: int = 500) -> float:
    hits = 0
    for s in range(0, len(x), batch_size):
        _, logits = per_example_loss(model, params, x[s:s + batch_size], y[s:s + batch_size])
        hits += int((logits.argmax(axis=1) == y[s:s + batch_size]).sum())
    return hits / max(len(x), 1)


def train(config: TrainConfig, model: ModelSpec, dataset: Dataset, params: Optional[ParameterSet] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> Tuple[ParameterSet, TrainLog]:
    """Minimise the strategy's adversarial loss; deterministic given ``config.seed``."""
    x, y = dataset.inputs, dataset.labels
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    if y.min() < 0 or y.max() >= model.n_classes:
        raise ValueError(f"labels must lie in [0, {model.n_classes})")
    params = dict(build(model, config.seed) if params is None else params)
    opt = make_optimizer(config)
    log = TrainLog()
    n_batches = -(-len(x) // config.batch_size)
    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = np.random.default_rng([config.seed, _TRAIN_TAG, epoch]).permutation(len(x))
        total, count, lr = 0.0, 0, 0.0
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            xb, yb = x[idx], y[idx]
            inputs = _adversarial_batch(config, model, params, xb, yb, epoch, idx)
            xs = np.concatenate(inputs)
            ys = np.concatenate([yb] * len(inputs))
            tape = Tape()
            watched = {k: tape.watch(v) for k, v in params.items()}
            loss = softmax_cross_entropy(forward(model, watched, xs, tape), ys)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(epoch, b, value)
            grads = dict(zip(watched, tape.gradient(loss, list(watched.values()))))
            lr = learning_rate(config.schedule, epoch + (b + 1) / n_batches)
            opt.step(params, grads, lr)
            total += value * len(ys)
            count += len(ys)
        record = EpochRecord(epoch + 1, accuracy(model, params, x, y), total / count, lr,
                             time.perf_counter() - start)
        log.records.append(record)
        logger.info(record.as_record())
        if on_epoch is not None:
            on_epoch(record)
    return params, log
