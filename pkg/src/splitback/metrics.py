"""Evaluation metrics and the convergence-bound machinery.

Attack metrics (success rate, clean accuracy, inference precision) run
forward passes against a trained split state. The bound side turns an
instrumented training run into the four estimated constants of the
degradation bound and evaluates the bound itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.stats

from .data import VerticalDataset
from .errors import ConfigError, DomainError, EstimationError, PreconditionError
from .nn import flatten_params
from .trigger import TriggerShare, poison_batch
from .utils import rng_for


def gradient_perturbation(grads_a: list[np.ndarray], grads_b: list[np.ndarray]) -> float:
    """L2 distance between two gradient lists, flattened and concatenated."""
    flat_a, manifest_a = flatten_params(grads_a)
    flat_b, manifest_b = flatten_params(grads_b)
    if [m[0] for m in manifest_a] != [m[0] for m in manifest_b]:
        raise ConfigError("gradient lists have mismatched shapes")
    return float(np.linalg.norm(flat_a.astype(np.float64) - flat_b.astype(np.float64)))


def embedding_proximity(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    """L2 distance between the means of two embedding batches."""
    if len(emb_a) == 0 or len(emb_b) == 0:
        raise DomainError("embedding batches must be non-empty")
    return float(np.linalg.norm(emb_a.mean(axis=0) - emb_b.mean(axis=0)))


def _predict(state, batch_slices: dict[int, np.ndarray]) -> np.ndarray:
    from .models import forward_bottom
    from .nn import softmax

    blocks = []
    for k in sorted(state.bottoms):
        h, _ = forward_bottom(state.bottoms[k], batch_slices[k])
        blocks.append(h)
    h_cat = np.concatenate(blocks, axis=1)
    logits = state.top.forward(h_cat)[0]
    return np.argmax(softmax(logits), axis=1)


def clean_data_accuracy(state, vdataset: VerticalDataset, chunk: int = 1024) -> float:
    """Fraction of samples the split model classifies correctly, untouched."""
    n = len(vdataset)
    correct = 0
    for start in range(0, n, chunk):
        take = np.arange(start, min(start + chunk, n))
        batch = {k: vdataset.client_view(k)[take] for k in sorted(state.bottoms)}
        correct += int(np.sum(_predict(state, batch) == vdataset.labels[take]))
    return correct / n


def attack_success_rate(
    state,
    vdataset: VerticalDataset,
    shares: dict[int, TriggerShare],
    intensity: float,
    target_class: int,
    num_samples: int = 250,
    seed: int = 0,
    clip_to_range: bool = False,
) -> float:
    """Fraction of triggered non-target samples classified as the target.

    Draws up to num_samples rows whose true label is not the target,
    implants every adversary's trigger share (features otherwise intact,
    no generator swap), and measures how often the model flips to the
    target class.
    """
    candidates = np.flatnonzero(vdataset.labels != target_class)
    if len(candidates) == 0:
        raise DomainError("no non-target samples to evaluate on")
    rng = rng_for(seed, "asr")
    if len(candidates) > num_samples:
        candidates = np.sort(rng.choice(candidates, size=num_samples, replace=False))
    batch = {k: vdataset.client_view(k)[candidates] for k in sorted(state.bottoms)}
    rows = np.arange(len(candidates))
    poisoned = poison_batch(
        batch, rows, shares, {}, intensity, rng, swap=False, clip_to_range=clip_to_range
    )
    preds = _predict(state, poisoned)
    return float(np.mean(preds == target_class))


@dataclass
class InferenceQuality:
    """How well an inferred target-class index set matches the truth."""

    precision: float | None  # None when the set is empty
    recall: float | None  # None when the dataset has no target rows
    size: int


def label_inference_accuracy(
    selected: np.ndarray, labels: np.ndarray, target_class: int
) -> InferenceQuality:
    selected = np.asarray(selected, dtype=np.int64)
    truth = np.flatnonzero(labels == target_class)
    hits = np.intersect1d(selected, truth)
    precision = float(len(hits) / len(selected)) if len(selected) else None
    recall = float(len(hits) / len(truth)) if len(truth) else None
    return InferenceQuality(precision=precision, recall=recall, size=int(len(selected)))


def spearman(x, y) -> float:
    """Spearman rank correlation; 0.0 when either input has no variation."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise DomainError("need two equal-length sequences of at least 2 points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return 0.0
    return float(scipy.stats.spearmanr(x, y).statistic)


def theorem1_bound(
    f0: float,
    etas,
    lipschitz: float,
    gamma: float,
    delta: float,
    num_parties: int,
) -> float:
    """Upper bound on the smallest squared full-gradient norm over a run.

    Valid only when every step size satisfies eta <= 1/(4*lipschitz);
    raises PreconditionError otherwise. gamma bounds the squared
    minibatch-vs-full gradient gap per party, delta the squared
    poisoned-vs-benign gap.
    """
    etas = np.asarray(etas, dtype=np.float64)
    if len(etas) == 0 or np.any(etas <= 0):
        raise ConfigError("etas must be a non-empty sequence of positive step sizes")
    if lipschitz <= 0:
        raise ConfigError("lipschitz must be positive")
    if gamma < 0 or delta < 0:
        raise ConfigError("gamma and delta must be >= 0")
    if np.any(etas > 1.0 / (4.0 * lipschitz)):
        raise PreconditionError(
            f"step size {etas.max():.6g} exceeds 1/(4L) = {1.0 / (4.0 * lipschitz):.6g}"
        )
    eta_sum = float(etas.sum())
    eta_sq_sum = float((etas**2).sum())
    k = float(num_parties)
    big_l = float(lipschitz)
    return (
        4.0 * f0 / eta_sum
        + 4.0 * (eta_sq_sum / eta_sum) * (k * big_l * gamma + k * big_l * delta)
        + 2.0 * k * delta
    )


@dataclass
class InstrumentedRun:
    """Checkpoints and probes collected across one instrumented run.

    params[t] and grads[t] are the flattened parameters and clean
    full-batch gradient before round t; losses[t] the full-batch loss at
    the same point. gaps_sq[t] and vars_sq[t] map party id to squared
    gradient gaps (poisoned vs benign, and minibatch vs full).
    """

    params: list
    grads: list
    losses: list
    gaps_sq: list
    vars_sq: list
    etas: list
    num_parties: int

    def validate(self) -> None:
        n = len(self.params)
        if n < 2:
            raise EstimationError("need at least two instrumented rounds")
        for name, seq in (
            ("grads", self.grads),
            ("losses", self.losses),
            ("gaps_sq", self.gaps_sq),
            ("vars_sq", self.vars_sq),
            ("etas", self.etas),
        ):
            if len(seq) != n:
                raise EstimationError(f"{name} has {len(seq)} entries, expected {n}")


@dataclass
class TheoremEstimates:
    f0: float
    lipschitz: float
    gamma: float
    delta: float
    min_grad_norm_sq: float


def estimate_theorem_params(run: InstrumentedRun) -> TheoremEstimates:
    """Empirical constants for the bound, estimated from checkpoints.

    The smoothness constant is the largest secant ratio
    ||grad(t+1) - grad(t)|| / ||theta(t+1) - theta(t)|| over consecutive
    checkpoints; gamma and delta are the worst per-party squared gaps
    seen in any round. All are lower estimates of the true constants, so
    the resulting bound check is a consistency test, not a proof.
    """
    run.validate()
    ratios = []
    for a, b, ga, gb in zip(run.params, run.params[1:], run.grads, run.grads[1:]):
        move = float(np.linalg.norm(np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)))
        if move == 0.0:
            continue
        change = float(np.linalg.norm(np.asarray(gb, dtype=np.float64) - np.asarray(ga, dtype=np.float64)))
        ratios.append(change / move)
    if not ratios:
        raise EstimationError("parameters never moved; cannot estimate smoothness")
    gamma = max(max(d.values()) for d in run.vars_sq)
    delta = max(max(d.values()) for d in run.gaps_sq)
    grad_norms = [float(np.asarray(g, dtype=np.float64) @ np.asarray(g, dtype=np.float64)) for g in run.grads]
    return TheoremEstimates(
        f0=float(run.losses[0]),
        lipschitz=max(ratios),
        gamma=float(gamma),
        delta=float(delta),
        min_grad_norm_sq=min(grad_norms),
    )
