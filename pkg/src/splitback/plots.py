"""Plot emission for runs and sweeps. Headless backend, file output only."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def plot_training_curves(eval_records: list[dict], path) -> str:
    """CDA (and ASR when present) per evaluation epoch."""
    epochs = [r["epoch"] for r in eval_records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r["cda"] for r in eval_records], marker="o", label="clean accuracy")
    if any(r.get("asr") is not None for r in eval_records):
        ax.plot(epochs, [r.get("asr") for r in eval_records], marker="s", label="attack success")
    ax.set_xlabel("epoch")
    ax.set_ylabel("rate")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_loss_curve(round_records: list[dict], path) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r["round"] for r in round_records], [r["loss"] for r in round_records], lw=0.8)
    ax.set_xlabel("round")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_sweep_trend(values, means, stds, axis_label, metric_label, path) -> str:
    """One metric against a sweep axis, with an error band when given."""
    values = np.asarray(values, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(values, means, marker="o")
    if stds is not None:
        stds = np.asarray(stds, dtype=np.float64)
        ax.fill_between(values, means - stds, means + stds, alpha=0.2)
    ax.set_xlabel(axis_label)
    ax.set_ylabel(metric_label)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_delta_vs_connectivity(rhos, deltas, path) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rhos, deltas, marker="o")
    ax.set_xlabel("algebraic connectivity")
    ax.set_ylabel("gradient perturbation (L2)")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_bound_trials(bounds, min_grad_sq, path) -> str:
    """Per-trial bound vs the smallest squared gradient norm it must cover."""
    trials = np.arange(len(bounds))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(trials, bounds, marker="o", label="bound")
    ax.semilogy(trials, min_grad_sq, marker="s", label="min ||grad||^2")
    ax.set_xlabel("trial")
    ax.set_ylabel("value (log scale)")
    ax.grid(alpha=0.3, which="both")
    ax.legend()
    return _save(fig, path)
