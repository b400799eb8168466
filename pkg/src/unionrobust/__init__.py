"""Adversarial robustness against the union of linf, l2 and l1 perturbations."""

from .adversary import AttackOutcome, PerturbationSpec, fgsm, mim, msd, pgd, pointwise_attack, salt_pepper_attack
from .data_io import Dataset, load_checkpoint, load_idx, save_checkpoint, synth_blobs, synth_rings
from .evaluation import AttackEntry, AttackSuite, UnionReport, default_suite, evaluate, robustness_curve
from .geometry import BallSpec, NormKind
from .models import ModelSpec, build
from .training import TrainConfig, train

__all__ = [
    "AttackEntry", "AttackOutcome", "AttackSuite", "BallSpec", "Dataset", "ModelSpec", "NormKind",
    "PerturbationSpec", "TrainConfig", "UnionReport", "build", "default_suite", "evaluate", "fgsm",
    "load_checkpoint", "load_idx", "mim", "msd", "pgd", "pointwise_attack", "robustness_curve",
    "salt_pepper_attack", "save_checkpoint", "synth_blobs", "synth_rings", "train",
]
__version__ = "0.1.0"
