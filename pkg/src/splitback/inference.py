"""Label inference over shared feature views.

Each adversary trains a VAE on the widened view produced by feature
sharing, with a hybrid objective: reconstruction plus KL on rows known
to carry the target label, and a batch-hard triplet term that pushes
the latent means of target rows away from non-target rows. A small
classifier trained on the latent means of the labeled auxiliary rows
then scores every unlabeled row; rows predicted as the target label
with confidence above a high threshold are proposed as inferred target
samples. Proposals go through leader-based majority voting, and each
adversary finally retrains a generator VAE on its own slice of the
agreed rows (the generator later replaces poisoned slices during
training rounds).

The losses here are the package's measurement primitives as well as
training objectives, so they are exact: every gradient assembled in
_final_loss_and_grads is finite-difference checked in the test suite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import AuxiliarySet
from .errors import ConfigError, ContractError, DegenerateDataError, DomainError
from .graph import (
    AdversaryGraph,
    ConcatenatedView,
    bfs_collect,
    distribute_results,
    elect_leader,
    majority_vote,
)
from .models import build_network, build_vae, mlp_arch
from .nn import AdamState, Network, Vae, adam_step, cross_entropy, encode_mu, softmax, vae_forward
from .utils import rng_for

logger = logging.getLogger(__name__)


def kl_divergence_gaussian(mu: np.ndarray, sigma: np.ndarray) -> float:
    """Mean KL(N(mu, diag sigma^2) || N(0, I)) over the batch.

    Closed form per sample: 0.5 * sum(mu^2 + sigma^2 - 1 - ln sigma^2).

    Raises:
        DomainError: any sigma <= 0.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if (sigma <= 0).any():
        raise DomainError("sigma must be strictly positive")
    per_sample = 0.5 * (mu**2 + sigma**2 - 1.0 - 2.0 * np.log(sigma)).sum(axis=1)
    return float(per_sample.mean())


def reconstruction_loss(x: np.ndarray, x_bar: np.ndarray) -> float:
    """Mean over the batch of the squared L2 reconstruction gap."""
    x = np.asarray(x, dtype=np.float64)
    x_bar = np.asarray(x_bar, dtype=np.float64)
    if x.shape != x_bar.shape:
        raise ContractError(f"shape mismatch {x.shape} vs {x_bar.shape}")
    return float(((x - x_bar) ** 2).sum(axis=1).mean())


def vae_loss(
    x: np.ndarray,
    recon: np.ndarray,
    mu: np.ndarray,
    sigma: np.ndarray,
    recon_weight: float,
) -> tuple[float, float, float]:
    """Convex mix of reconstruction and KL: w * rec + (1 - w) * kl.

    Returns (total, rec, kl). recon_weight must lie strictly inside
    (0, 1) so neither term is silently dropped.
    """
    if not 0.0 < recon_weight < 1.0:
        raise ConfigError(f"recon_weight {recon_weight} must be in (0, 1)")
    rec = reconstruction_loss(x, recon)
    kl = kl_divergence_gaussian(mu, sigma)
    return recon_weight * rec + (1.0 - recon_weight) * kl, rec, kl


def batch_hard_triplets(
    embeddings: np.ndarray, labels: np.ndarray, anchors: np.ndarray
) -> list[tuple[int, int, int]]:
    """Hardest (anchor, positive, negative) triples under squared L2.

    For each anchor: the positive is the same-label row at maximum
    distance, the negative the different-label row at minimum distance;
    ties resolve to the lowest row index. Anchors lacking a positive or
    negative are skipped.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    sq_norms = (emb * emb).sum(axis=1)
    triples = []
    for a in np.asarray(anchors, dtype=np.int64):
        d2 = sq_norms + sq_norms[a] - 2.0 * (emb @ emb[a])
        same = (labels == labels[a]) & (np.arange(len(labels)) != a)
        diff = labels != labels[a]
        if not same.any() or not diff.any():
            continue
        pos_candidates = np.flatnonzero(same)
        neg_candidates = np.flatnonzero(diff)
        p = pos_candidates[np.argmax(d2[pos_candidates])]
        n = neg_candidates[np.argmin(d2[neg_candidates])]
        triples.append((int(a), int(p), int(n)))
    return triples


def triplet_loss(
    embeddings: np.ndarray, triples: list[tuple[int, int, int]], margin: float
) -> float:
    """Mean hinge over triples: max(d2(a,p) - d2(a,n) + margin, 0)."""
    if margin < 0:
        raise ConfigError(f"margin must be >= 0, got {margin}")
    if not triples:
        return 0.0
    emb = np.asarray(embeddings, dtype=np.float64)
    total = 0.0
    for a, p, n in triples:
        d_ap = ((emb[a] - emb[p]) ** 2).sum()
        d_an = ((emb[a] - emb[n]) ** 2).sum()
        total += max(d_ap - d_an + margin, 0.0)
    return float(total / len(triples))


@dataclass
class InferenceConfig:
    """Hyperparameters of the inference stage (one adversary's training)."""

    latent_dim: int = 32
    vae_hidden: list[int] = field(default_factory=lambda: [128])
    margin: float = 0.4
    recon_weight: float = 0.9  # weight of reconstruction inside the VAE loss
    triplet_weight: float = 1.0  # weight of the triplet term in the final loss
    confidence: float = 0.999
    vae_epochs: int = 120
    vae_batch: int = 32
    vae_lr: float = 1e-3
    clf_hidden: list[int] = field(default_factory=lambda: [64])
    clf_epochs: int = 300
    clf_lr: float = 3e-3
    retrain_epochs: int = 120
    use_triplet: bool = True  # False = plain VAE objective (ablation)
    all_rows_recon: bool = False  # reconstruct every aux row, not just targets
    inclusive_vote: bool = False
    skip_vote: bool = False  # every adversary keeps its local set (ablation)

    def validate(self) -> None:
        if not 0.0 < self.recon_weight < 1.0:
            raise ConfigError(f"recon_weight {self.recon_weight} outside (0, 1)")
        if not 0.0 < self.confidence <= 1.0:
            raise ConfigError(f"confidence {self.confidence} outside (0, 1]")
        if self.margin < 0 or self.triplet_weight < 0:
            raise ConfigError("margin and triplet_weight must be >= 0")
        if min(self.latent_dim, self.vae_epochs, self.vae_batch, self.clf_epochs) < 1:
            raise ConfigError("latent_dim, epochs, and batch sizes must be >= 1")


def final_loss(
    x: np.ndarray,
    recon: np.ndarray,
    mu: np.ndarray,
    sigma: np.ndarray,
    embeddings: np.ndarray,
    triples: list[tuple[int, int, int]],
    cfg: InferenceConfig,
) -> dict:
    """Report the combined objective: VAE mix plus weighted triplet term."""
    total_vae, rec, kl = vae_loss(x, recon, mu, sigma, cfg.recon_weight)
    trip = triplet_loss(embeddings, triples, cfg.margin)
    return {
        "total": total_vae + cfg.triplet_weight * trip,
        "vae": total_vae,
        "reconstruction": rec,
        "kl": kl,
        "triplet": trip,
        "num_triples": len(triples),
    }


def _final_loss_and_grads(
    vae: Vae,
    batch: np.ndarray,
    batch_is_target: np.ndarray,
    negatives: np.ndarray,
    cfg: InferenceConfig,
    noise: np.ndarray,
):
    """One joint forward/backward of the hybrid objective.

    noise is the reparameterization draw for the batch (passed in so the
    pass is a deterministic function of parameters, which the gradient
    checks rely on). Triplet anchors are the target rows of the batch;
    negative candidates are the batch's non-target rows plus the
    negatives pool. With use_triplet off, or nothing to mine, only the
    VAE terms contribute.

    Returns (parts, grads) with grads aligned to vae.params().
    """
    batch = np.asarray(batch)
    batch_is_target = np.asarray(batch_is_target, dtype=bool)
    b = len(batch)
    rng_stub = _FixedNoise(noise)
    fwd = vae_forward(vae, batch, rng_stub)
    use_triplet = cfg.use_triplet and batch_is_target.sum() >= 2
    if use_triplet:
        neg_mu, neg_caches = encode_mu(vae, negatives) if len(negatives) else (None, None)
        emb = fwd.mu if neg_mu is None else np.concatenate([fwd.mu, neg_mu], axis=0)
        trip_labels = np.concatenate(
            [batch_is_target.astype(np.int64), np.zeros(len(negatives), np.int64)]
        )
        triples = batch_hard_triplets(emb, trip_labels, np.flatnonzero(batch_is_target))
    else:
        neg_mu, neg_caches, emb, triples = None, None, fwd.mu, []
    parts = final_loss(batch, fwd.recon, fwd.mu, fwd.sigma, emb, triples, cfg)

    w = cfg.recon_weight
    drecon = (2.0 * w / b) * (fwd.recon - batch)
    dz, dec_grads = vae.decoder.backward(fwd.dec_caches, drecon.astype(fwd.recon.dtype))
    dmu = dz + ((1.0 - w) / b) * fwd.mu
    dlogvar = dz * 0.5 * fwd.sigma * fwd.eps + ((1.0 - w) / b) * 0.5 * (fwd.sigma**2 - 1.0)

    if triples:
        demb = np.zeros_like(emb)
        scale = cfg.triplet_weight / len(triples)
        for a, p, n in triples:
            d_ap = ((emb[a] - emb[p]) ** 2).sum()
            d_an = ((emb[a] - emb[n]) ** 2).sum()
            if d_ap - d_an + cfg.margin <= 0.0:
                continue  # hinge inactive
            demb[a] += scale * 2.0 * (emb[n] - emb[p])
            demb[p] += scale * 2.0 * (emb[p] - emb[a])
            demb[n] += scale * 2.0 * (emb[a] - emb[n])
        dmu = dmu + demb[:b]
        dneg_mu = demb[b:]
    else:
        dneg_mu = None

    enc_dy = np.concatenate([dmu, dlogvar * fwd.logvar_mask], axis=1).astype(fwd.mu.dtype)
    _, enc_grads = vae.encoder.backward(fwd.enc_caches, enc_dy)
    if dneg_mu is not None and len(dneg_mu) and np.any(dneg_mu):
        pad = np.zeros_like(dneg_mu)
        neg_dy = np.concatenate([dneg_mu, pad], axis=1).astype(neg_mu.dtype)
        _, neg_grads = vae.encoder.backward(neg_caches, neg_dy)
        enc_grads = [g1 + g2 for g1, g2 in zip(enc_grads, neg_grads)]
    return parts, enc_grads + dec_grads


class _FixedNoise:
    """Duck-typed generator that returns a pre-drawn noise tensor once."""

    def __init__(self, noise: np.ndarray):
        self._noise = noise

    def standard_normal(self, shape):
        if tuple(shape) != tuple(self._noise.shape):
            raise ContractError(f"noise shape {self._noise.shape} != requested {shape}")
        return self._noise


def train_adversary_vae(
    target_rows: np.ndarray,
    nontarget_rows: np.ndarray,
    cfg: InferenceConfig,
    seed: int,
    tag: int | str = 0,
    dtype=np.float32,
) -> tuple[Vae, list[dict]]:
    """Train the hybrid VAE for one adversary's view.

    target_rows / nontarget_rows are flat (n, dim) views of the labeled
    auxiliary set. Reconstruction covers the target rows (or every row
    with all_rows_recon); the triplet term treats target rows as
    anchors/positives and mines negatives from the non-target pool.

    Returns the trained model and a per-epoch loss history.
    """
    cfg.validate()
    target_rows = np.asarray(target_rows, dtype=dtype)
    nontarget_rows = np.asarray(nontarget_rows, dtype=dtype)
    if len(target_rows) < 2:
        raise DegenerateDataError("need at least two target-label rows")
    dim = target_rows.shape[1]
    init_rng = rng_for(seed, "vae-init", tag)
    vae = build_vae(dim, cfg.latent_dim, cfg.vae_hidden, init_rng, dtype=dtype)
    state = AdamState.for_params(vae.params())
    step_rng = rng_for(seed, "vae-train", tag)

    if cfg.all_rows_recon:
        recon_pool = np.concatenate([target_rows, nontarget_rows], axis=0)
        is_target = np.concatenate(
            [np.ones(len(target_rows), bool), np.zeros(len(nontarget_rows), bool)]
        )
    else:
        recon_pool = target_rows
        is_target = np.ones(len(target_rows), bool)

    history = []
    n = len(recon_pool)
    batch = min(cfg.vae_batch, n)
    steps_per_epoch = (n + batch - 1) // batch
    for epoch in range(cfg.vae_epochs):
        perm = step_rng.permutation(n)
        epoch_parts = []
        for s in range(steps_per_epoch):
            rows = perm[s * batch : (s + 1) * batch]
            xb = recon_pool[rows]
            noise = step_rng.standard_normal((len(xb), cfg.latent_dim)).astype(dtype)
            parts, grads = _final_loss_and_grads(
                vae, xb, is_target[rows], nontarget_rows, cfg, noise
            )
            vae.set_params(adam_step(vae.params(), grads, state, cfg.vae_lr))
            epoch_parts.append(parts)
        history.append(
            {
                "epoch": epoch,
                "total": float(np.mean([p["total"] for p in epoch_parts])),
                "reconstruction": float(np.mean([p["reconstruction"] for p in epoch_parts])),
                "kl": float(np.mean([p["kl"] for p in epoch_parts])),
                "triplet": float(np.mean([p["triplet"] for p in epoch_parts])),
            }
        )
    return vae, history


def train_aux_classifier(
    vae: Vae,
    aux_rows: np.ndarray,
    aux_labels: np.ndarray,
    num_classes: int,
    cfg: InferenceConfig,
    seed: int,
    tag: int | str = 0,
    dtype=np.float32,
) -> Network:
    """Supervised head over the frozen encoder's latent means.

    Trains a small MLP with cross-entropy on mu-embeddings of the
    labeled auxiliary rows (full-batch Adam; the set is tiny).

    Raises:
        DegenerateDataError: auxiliary labels collapse to one class.
    """
    cfg.validate()
    aux_labels = np.asarray(aux_labels, dtype=np.int64)
    if len(np.unique(aux_labels)) < 2:
        raise DegenerateDataError("auxiliary set holds a single class")
    mu, _ = encode_mu(vae, np.asarray(aux_rows, dtype=dtype))
    mu = mu.astype(dtype)
    clf = build_network(
        (mu.shape[1],), mlp_arch(cfg.clf_hidden, num_classes), rng_for(seed, "clf-init", tag), dtype=dtype
    )
    state = AdamState.for_params(clf.params())
    for _ in range(cfg.clf_epochs):
        logits, caches = clf.forward(mu)
        _, dlogits = cross_entropy(logits, aux_labels)
        _, grad_sums = clf.backward(caches, dlogits)
        grads = [g / len(aux_labels) for g in grad_sums]
        clf.set_params(adam_step(clf.params(), grads, state, cfg.clf_lr))
    return clf


def infer_local(
    vae: Vae,
    clf: Network,
    rows: np.ndarray,
    row_indices: np.ndarray,
    target_label: int,
    confidence: float,
) -> np.ndarray:
    """Indices whose prediction is the target label with high confidence.

    A row is selected iff the classifier's argmax over the latent mean
    equals target_label, the top probability is >= confidence, and the
    argmax is unique (exact ties are rejected as undecided).
    """
    if len(rows) == 0:
        return np.zeros(0, dtype=np.int64)
    if len(rows) != len(row_indices):
        raise ContractError(f"{len(rows)} rows but {len(row_indices)} indices")
    mu, _ = encode_mu(vae, rows)
    logits, _ = clf.forward(mu)
    probs = softmax(logits.astype(np.float64))
    order = np.argsort(probs, axis=1)
    best = order[:, -1]
    runner_up = probs[np.arange(len(probs)), order[:, -2]]
    top = probs[np.arange(len(probs)), best]
    chosen = (best == target_label) & (top >= confidence) & (top > runner_up)
    return np.asarray(row_indices, dtype=np.int64)[chosen]


def retrain_local_vae(
    own_rows: np.ndarray,
    cfg: InferenceConfig,
    seed: int,
    tag: int | str = 0,
    dtype=np.float32,
) -> tuple[Vae, list[dict]]:
    """Generator VAE over the adversary's own slice of the inferred rows.

    Single-class data, so only the reconstruction/KL mix applies (there
    is nothing to mine triplets against).
    """
    solo = InferenceConfig(
        latent_dim=cfg.latent_dim,
        vae_hidden=list(cfg.vae_hidden),
        margin=cfg.margin,
        recon_weight=cfg.recon_weight,
        triplet_weight=cfg.triplet_weight,
        confidence=cfg.confidence,
        vae_epochs=cfg.retrain_epochs,
        vae_batch=cfg.vae_batch,
        vae_lr=cfg.vae_lr,
        use_triplet=False,
    )
    return train_adversary_vae(
        own_rows, own_rows[:0], solo, seed, tag=f"retrain-{tag}", dtype=dtype
    )


@dataclass
class InferenceResult:
    """Everything the inference stage hands to the attack stage."""

    local_sets: dict[int, np.ndarray]  # per-adversary proposals (incl. aux seeds)
    final_sets: dict[int, np.ndarray]  # post-vote (or local when voting skipped)
    consensus: np.ndarray | None  # the voted set; None when voting skipped
    leader: int | None
    collect_order: list[int] | None
    generators: dict[int, Vae]  # per-adversary own-slice generator VAEs
    vae_histories: dict[int, list] = field(default_factory=dict, repr=False)


def collaborative_inference(
    graph: AdversaryGraph,
    views: dict[int, ConcatenatedView],
    own_slices: dict[int, np.ndarray],
    aux: AuxiliarySet,
    num_classes: int,
    cfg: InferenceConfig,
    seed: int,
    dtype=np.float32,
) -> InferenceResult:
    """Full inference pipeline across the adversary graph.

    Per adversary: hybrid VAE on its shared view, classifier on the
    auxiliary embeddings, high-confidence selection over the unlabeled
    rows, with the known target-label auxiliary indices always seeded
    into the proposal. Then leader-based collection, majority vote, and
    distribution (unless skip_vote), and finally the own-slice generator
    retraining on the agreed rows.

    own_slices[m] must be the flat (N, own_dim) matrix of adversary m's
    own feature slice over the same row indexing as the views.
    """
    cfg.validate()
    num_rows = next(iter(views.values())).num_rows
    unlabeled = np.setdiff1d(np.arange(num_rows, dtype=np.int64), aux.indices)
    local_sets: dict[int, np.ndarray] = {}
    histories: dict[int, list] = {}
    for m in graph.nodes:
        view = views[m]
        target_rows = view.matrix(aux.target_indices)
        nontarget_rows = view.matrix(aux.nontarget_indices)
        vae, history = train_adversary_vae(target_rows, nontarget_rows, cfg, seed, tag=m, dtype=dtype)
        clf = train_aux_classifier(
            vae, view.matrix(aux.indices), aux.labels, num_classes, cfg, seed, tag=m, dtype=dtype
        )
        selected = infer_local(
            vae, clf, view.matrix(unlabeled), unlabeled, aux.target_label, cfg.confidence
        )
        local_sets[m] = np.union1d(selected, aux.target_indices).astype(np.int64)
        histories[m] = history
        logger.info(
            "adversary %d: inferred %d rows (%d with aux seeds)",
            m,
            len(selected),
            len(local_sets[m]),
        )

    if cfg.skip_vote:
        final_sets = {m: local_sets[m].copy() for m in graph.nodes}
        consensus, leader, order = None, None, None
    else:
        leader = elect_leader(graph)
        order, proposals = bfs_collect(graph, leader, local_sets)
        consensus = majority_vote(proposals, graph.num_nodes, inclusive=cfg.inclusive_vote)
        final_sets = distribute_results(graph, leader, consensus)
        logger.info("consensus: %d rows agreed by leader %d", len(consensus), leader)

    generators: dict[int, Vae] = {}
    for m in graph.nodes:
        agreed = final_sets[m]
        if len(agreed) < 2:
            logger.warning("adversary %d: agreed set too small to retrain, attack disabled", m)
            continue
        gen, _ = retrain_local_vae(own_slices[m][agreed], cfg, seed, tag=m, dtype=dtype)
        generators[m] = gen
    return InferenceResult(local_sets, final_sets, consensus, leader, order, generators, histories)
