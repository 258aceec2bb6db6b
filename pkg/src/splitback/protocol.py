"""The split training loop: embedding exchange, updates, defense, probes.

One round: the server draws the minibatch index set, every client runs
its bottom model over its feature slice (adversaries may first swap
poisoned rows for generator samples and implant their trigger shares),
the server concatenates the embedding blocks, computes the mean
cross-entropy, and returns per-sample embedding gradients to each
client. An optional defense adds Gaussian noise to those returned
gradients before they leave the server; the server's own top-model
update is unaffected by that noise. Clients turn the returned rows into
parameter gradients and step.

Instrumentation recomputes the round with clean inputs to measure how
far the poisoned gradients sit from the benign ones, either just at the
top model (cheap, feeds the connectivity sweeps) or for every party
plus full-batch probes (the convergence-bound harness).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import VerticalDataset, minibatch_indices
from .errors import ConfigError
from .models import backward_bottom, backward_top, forward_bottom, forward_top_loss
from .nn import AdamState, Network, adam_step, flatten_params, sgd_step
from .trigger import TriggerShare, poison_batch
from .utils import rng_for


@dataclass
class TrainConfig:
    """Knobs of the split training loop."""

    epochs: int = 5
    batch_size: int = 128
    bottom_lr: float = 0.05
    top_lr: float = 1e-3
    top_optimizer: str = "adam"  # "adam" | "sgd"
    bottom_optimizer: str = "sgd"
    defense_variance: float = 0.0  # 0 disables the Gaussian noising defense
    instrumentation: str = "none"  # "none" | "top" | "full"
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.top_optimizer not in ("adam", "sgd") or self.bottom_optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizers must be 'adam' or 'sgd'")
        if self.defense_variance < 0:
            raise ConfigError("defense_variance must be >= 0")
        if self.instrumentation not in ("none", "top", "full"):
            raise ConfigError(f"unknown instrumentation {self.instrumentation!r}")


@dataclass
class AttackState:
    """Everything the adversaries bring into the training loop."""

    poison_indices: np.ndarray  # dataset row indices to poison (global plan)
    shares: dict[int, TriggerShare]
    generators: dict
    intensity: float
    swap: bool = True
    clip_to_range: bool = False
    per_adversary_indices: dict[int, np.ndarray] | None = None  # no-vote ablation


@dataclass
class SplitState:
    """Live models of all parties."""

    bottoms: dict[int, Network]
    top: Network
    embed_dims: list[int]
    top_opt: AdamState | None = None
    bottom_opts: dict[int, AdamState] | None = None

    @property
    def num_clients(self) -> int:
        return len(self.bottoms)

    @property
    def num_parties(self) -> int:
        return len(self.bottoms) + 1  # clients plus the label-holding server

    def all_params(self) -> list[np.ndarray]:
        out = list(self.top.params())
        for k in sorted(self.bottoms):
            out.extend(self.bottoms[k].params())
        return out


@dataclass
class RoundTrace:
    """Per-round record; optional fields filled when instrumented."""

    round_index: int
    epoch: int
    loss: float
    num_poisoned: int
    delta: float | None = None  # L2 gap of top-model gradients vs benign
    party_gap_sq: dict | None = None  # per party, squared L2 poisoned-vs-benign
    party_var_sq: dict | None = None  # per party, squared L2 minibatch-vs-full
    full_grad_norm_sq: float | None = None
    full_loss: float | None = None


def build_split_state(
    vdataset: VerticalDataset,
    bottom_archs: dict[int, list],
    top_arch: list,
    num_classes: int,
    seed: int,
    dtype=np.float32,
    top_optimizer: str = "adam",
    bottom_optimizer: str = "sgd",
) -> SplitState:
    """Instantiate per-client bottoms and the server's top model."""
    from .models import build_network, output_dim

    bottoms, dims = {}, []
    for k in sorted(vdataset.slices):
        shape = vdataset.slice_shape(k)
        bottoms[k] = build_network(shape, bottom_archs[k], rng_for(seed, "bottom", k), dtype=dtype)
        dims.append(output_dim(shape, bottom_archs[k]))
    top = build_network((sum(dims),), top_arch, rng_for(seed, "top"), dtype=dtype)
    state = SplitState(bottoms, top, dims)
    if top_optimizer == "adam":
        state.top_opt = AdamState.for_params(top.params())
    if bottom_optimizer == "adam":
        state.bottom_opts = {k: AdamState.for_params(bottoms[k].params()) for k in bottoms}
    return state


def apply_noise_defense(
    per_client: dict[int, np.ndarray], variance: float, rng: np.random.Generator
) -> dict[int, np.ndarray]:
    """Add zero-mean Gaussian noise to the returned embedding gradients.

    variance 0 is an exact pass-through: the same arrays come back
    untouched, bit for bit.
    """
    if variance < 0:
        raise ConfigError("variance must be >= 0")
    if variance == 0.0:
        return per_client
    std = math.sqrt(variance)
    noised = {}
    for k in sorted(per_client):
        g = per_client[k]
        noised[k] = g + rng.normal(0.0, std, size=g.shape).astype(g.dtype)
    return noised


def _forward_all(state: SplitState, batch_slices: dict[int, np.ndarray]):
    embeddings, caches = {}, {}
    for k in sorted(state.bottoms):
        embeddings[k], caches[k] = forward_bottom(state.bottoms[k], batch_slices[k])
    h_cat = np.concatenate([embeddings[k] for k in sorted(embeddings)], axis=1)
    return h_cat, caches


def _top_pass(state: SplitState, h_cat: np.ndarray, labels: np.ndarray):
    loss, _, top_caches, dlogits = forward_top_loss(state.top, h_cat, labels)
    top_grads, per_client = backward_top(state.top, top_caches, dlogits, state.embed_dims)
    return loss, top_grads, per_client


def _poison_rows_in_batch(idxs: np.ndarray, attack: AttackState | None) -> np.ndarray:
    if attack is None or len(attack.poison_indices) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(np.isin(idxs, attack.poison_indices))


def _apply_attack(
    batch_slices: dict[int, np.ndarray],
    idxs: np.ndarray,
    attack: AttackState,
    rng: np.random.Generator,
) -> tuple[dict[int, np.ndarray], int]:
    """Poison the adversaries' slices of the current batch."""
    if attack.per_adversary_indices is None:
        rows = _poison_rows_in_batch(idxs, attack)
        if len(rows) == 0:
            return batch_slices, 0
        poisoned = poison_batch(
            batch_slices,
            rows,
            attack.shares,
            attack.generators,
            attack.intensity,
            rng,
            swap=attack.swap,
            clip_to_range=attack.clip_to_range,
        )
        return poisoned, len(rows)
    # no-vote ablation: every adversary poisons its own locally chosen rows
    out = dict(batch_slices)
    total = set()
    for m, own_plan in attack.per_adversary_indices.items():
        rows = np.flatnonzero(np.isin(idxs, own_plan))
        if len(rows) == 0:
            continue
        total.update(rows.tolist())
        poisoned = poison_batch(
            {m: out[m]},
            rows,
            {m: attack.shares[m]},
            attack.generators,
            attack.intensity,
            rng,
            swap=attack.swap,
            clip_to_range=attack.clip_to_range,
        )
        out[m] = poisoned[m]
    return out, len(total)


def run_round(
    state: SplitState,
    vdataset: VerticalDataset,
    round_index: int,
    cfg: TrainConfig,
    attack: AttackState | None = None,
) -> RoundTrace:
    """One full training round; updates every party's parameters in place."""
    n = len(vdataset)
    rounds_per_epoch = math.ceil(n / cfg.batch_size)
    idxs = minibatch_indices(n, cfg.batch_size, round_index, cfg.seed)
    clean_slices = {k: vdataset.client_view(k)[idxs] for k in sorted(state.bottoms)}
    labels = vdataset.labels[idxs]

    num_poisoned = 0
    batch_slices = clean_slices
    if attack is not None:
        poison_rng = rng_for(cfg.seed, "poison", round_index)
        batch_slices, num_poisoned = _apply_attack(clean_slices, idxs, attack, poison_rng)

    h_cat, bottom_caches = _forward_all(state, batch_slices)
    loss, top_grads, per_client = _top_pass(state, h_cat, labels)

    trace = RoundTrace(
        round_index=round_index,
        epoch=round_index // rounds_per_epoch,
        loss=loss,
        num_poisoned=num_poisoned,
    )
    if cfg.instrumentation != "none":
        _instrument(state, clean_slices, labels, top_grads, per_client, bottom_caches, cfg, trace, vdataset)

    noise_rng = rng_for(cfg.seed, "defense", round_index)
    returned = apply_noise_defense(per_client, cfg.defense_variance, noise_rng)

    if cfg.top_optimizer == "adam":
        state.top.set_params(adam_step(state.top.params(), top_grads, state.top_opt, cfg.top_lr))
    else:
        state.top.set_params(sgd_step(state.top.params(), top_grads, cfg.top_lr))
    for k in sorted(state.bottoms):
        grads = backward_bottom(state.bottoms[k], bottom_caches[k], returned[k])
        if cfg.bottom_optimizer == "adam":
            state.bottoms[k].set_params(
                adam_step(state.bottoms[k].params(), grads, state.bottom_opts[k], cfg.bottom_lr)
            )
        else:
            state.bottoms[k].set_params(sgd_step(state.bottoms[k].params(), grads, cfg.bottom_lr))
    return trace


def _instrument(
    state: SplitState,
    clean_slices: dict[int, np.ndarray],
    labels: np.ndarray,
    top_grads: list,
    per_client: dict[int, np.ndarray],
    bottom_caches: dict,
    cfg: TrainConfig,
    trace: RoundTrace,
    vdataset: VerticalDataset,
) -> None:
    """Fill the trace's poisoned-vs-benign (and full-batch) probes.

    Runs before any parameter update, on the same minibatch. When the
    batch carries no poisoned rows the poisoned and benign passes are
    identical, so the gaps are exactly zero without recomputation.
    """
    from .metrics import gradient_perturbation

    if trace.num_poisoned == 0:
        trace.delta = 0.0
        benign_top_grads, benign_per_client, benign_caches = top_grads, per_client, bottom_caches
        if cfg.instrumentation == "full":
            trace.party_gap_sq = {"top": 0.0, **{k: 0.0 for k in state.bottoms}}
    else:
        h_cat_b, benign_caches = _forward_all(state, clean_slices)
        _, benign_top_grads, benign_per_client = _top_pass(state, h_cat_b, labels)
        trace.delta = gradient_perturbation(top_grads, benign_top_grads)
        if cfg.instrumentation == "full":
            gaps = {"top": gradient_perturbation(top_grads, benign_top_grads) ** 2}
            for k in sorted(state.bottoms):
                g_att = backward_bottom(state.bottoms[k], bottom_caches[k], per_client[k])
                g_ben = backward_bottom(state.bottoms[k], benign_caches[k], benign_per_client[k])
                gaps[k] = gradient_perturbation(g_att, g_ben) ** 2
            trace.party_gap_sq = gaps

    if cfg.instrumentation == "full":
        full_loss, full_top, full_bottoms, flat = full_clean_gradient(state, vdataset)
        trace.full_loss = full_loss
        trace.full_grad_norm_sq = float(flat @ flat)
        var = {"top": gradient_perturbation(benign_top_grads, full_top) ** 2}
        for k in sorted(state.bottoms):
            g_ben = backward_bottom(state.bottoms[k], benign_caches[k], benign_per_client[k])
            var[k] = gradient_perturbation(g_ben, full_bottoms[k]) ** 2
        trace.party_var_sq = var


def full_clean_gradient(state: SplitState, vdataset: VerticalDataset, chunk: int = 1024):
    """Mean loss and gradient over the whole clean training split.

    Returns (loss, top_grads, bottom_grads, flat) where flat concatenates
    the top's then each client's gradient (ascending id), float64.
    """
    n = len(vdataset)
    top_sums = [np.zeros_like(p, dtype=np.float64) for p in state.top.params()]
    bottom_sums = {
        k: [np.zeros_like(p, dtype=np.float64) for p in state.bottoms[k].params()]
        for k in state.bottoms
    }
    loss_sum = 0.0
    for start in range(0, n, chunk):
        take = np.arange(start, min(start + chunk, n))
        batch_slices = {k: vdataset.client_view(k)[take] for k in sorted(state.bottoms)}
        labels = vdataset.labels[take]
        h_cat, caches = _forward_all(state, batch_slices)
        loss, _, top_caches, dlogits = forward_top_loss(state.top, h_cat, labels)
        loss_sum += loss * len(take)
        dx, grad_sums = state.top.backward(top_caches, dlogits)
        for acc, g in zip(top_sums, grad_sums):
            acc += g
        offset = 0
        for pos, k in enumerate(sorted(state.bottoms)):
            width = state.embed_dims[pos]
            rows = dx[:, offset : offset + width]
            offset += width
            _, b_sums = state.bottoms[k].backward(caches[k], rows)
            for acc, g in zip(bottom_sums[k], b_sums):
                acc += g
    top_grads = [g / n for g in top_sums]
    bottom_grads = {k: [g / n for g in sums] for k, sums in bottom_sums.items()}
    flat_parts = [flatten_params(top_grads)[0]]
    for k in sorted(bottom_grads):
        flat_parts.append(flatten_params(bottom_grads[k])[0])
    return loss_sum / n, top_grads, bottom_grads, np.concatenate(flat_parts)


def train(
    state: SplitState,
    vdataset: VerticalDataset,
    cfg: TrainConfig,
    attack: AttackState | None = None,
    on_epoch_end=None,
) -> list[RoundTrace]:
    """Run cfg.epochs of rounds; calls on_epoch_end(epoch, state, traces)."""
    cfg.validate()
    n = len(vdataset)
    rounds_per_epoch = math.ceil(n / cfg.batch_size)
    traces: list[RoundTrace] = []
    for t in range(cfg.epochs * rounds_per_epoch):
        traces.append(run_round(state, vdataset, t, cfg, attack))
        if (t + 1) % rounds_per_epoch == 0 and on_epoch_end is not None:
            on_epoch_end(t // rounds_per_epoch, state, traces)
    return traces
