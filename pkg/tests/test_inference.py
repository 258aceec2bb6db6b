"""Inference losses (with gradient checks), training loops, consensus flow."""

import math

import numpy as np
import pytest

from splitback.data import PartitionScheme, RawDataset, make_synthetic, partition_features, sample_auxiliary
from splitback.errors import ConfigError, ContractError, DegenerateDataError, DomainError
from splitback.graph import build_graph, share_features
from splitback.inference import (
    InferenceConfig,
    _final_loss_and_grads,
    batch_hard_triplets,
    collaborative_inference,
    final_loss,
    infer_local,
    kl_divergence_gaussian,
    reconstruction_loss,
    retrain_local_vae,
    train_adversary_vae,
    train_aux_classifier,
    triplet_loss,
    vae_loss,
)
from splitback.models import build_vae
from splitback.nn import Dense, Network, encode_mu, numerical_gradient, relative_error

GRAD_TOL = 1e-4


def test_kl_closed_form_frozen_value():
    # dim 1: 0.5(1 + 1 - 1 - 0) = 0.5; dim 2: 0.5(0 + 4 - 1 - ln 4)
    kl = kl_divergence_gaussian(np.array([[1.0, 0.0]]), np.array([[1.0, 2.0]]))
    expected = 0.5 + 0.5 * (3.0 - math.log(4.0))
    assert kl == pytest.approx(expected, abs=1e-12)
    assert kl == pytest.approx(1.3068528194400547, abs=1e-12)


def test_kl_zero_at_standard_normal():
    assert kl_divergence_gaussian(np.zeros((3, 4)), np.ones((3, 4))) == 0.0


def test_kl_rejects_nonpositive_sigma():
    with pytest.raises(DomainError):
        kl_divergence_gaussian(np.zeros((1, 2)), np.array([[1.0, 0.0]]))


def test_kl_matches_monte_carlo():
    # independent route: KL = E_q[log q(z) - log p(z)] by sampling
    rng = np.random.default_rng(0)
    mu = np.array([[0.3, -0.7, 1.1]])
    sigma = np.array([[0.8, 1.4, 0.5]])
    draws = 200_000
    z = mu + sigma * rng.standard_normal((draws, 3))
    log_q = (-0.5 * ((z - mu) / sigma) ** 2 - np.log(sigma)).sum(axis=1)
    log_p = (-0.5 * z**2).sum(axis=1)
    mc = (log_q - log_p).mean()
    closed = kl_divergence_gaussian(mu, sigma)
    assert closed == pytest.approx(mc, rel=0.03)


def test_reconstruction_loss_frozen_value():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    x_bar = np.array([[0.0, 2.0], [3.0, 2.0]])
    assert reconstruction_loss(x, x_bar) == pytest.approx(2.5)  # (1 + 4) / 2
    with pytest.raises(ContractError):
        reconstruction_loss(x, x_bar[:1])


def test_vae_loss_mix_and_bounds():
    x = np.array([[1.0, 0.0]])
    recon = np.array([[0.0, 0.0]])
    mu = np.array([[1.0, 0.0]])
    sigma = np.array([[1.0, 2.0]])
    total, rec, kl = vae_loss(x, recon, mu, sigma, recon_weight=0.9)
    assert rec == pytest.approx(1.0)
    assert total == pytest.approx(0.9 * rec + 0.1 * kl)
    for bad in (0.0, 1.0, -0.2, 1.7):
        with pytest.raises(ConfigError):
            vae_loss(x, recon, mu, sigma, recon_weight=bad)


def _exhaustive_hard_triples(emb, labels, anchors):
    out = []
    for a in anchors:
        best_p, best_p_d = None, -np.inf
        best_n, best_n_d = None, np.inf
        for i in range(len(emb)):
            d = float(((emb[a] - emb[i]) ** 2).sum())
            if i != a and labels[i] == labels[a] and d > best_p_d:
                best_p, best_p_d = i, d
            if labels[i] != labels[a] and d < best_n_d:
                best_n, best_n_d = i, d
        if best_p is not None and best_n is not None:
            out.append((int(a), best_p, best_n))
    return out


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_batch_hard_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(64, 8))
    labels = rng.integers(0, 4, size=64)
    anchors = np.flatnonzero(labels == 0)
    assert batch_hard_triplets(emb, labels, anchors) == _exhaustive_hard_triples(
        emb, labels, anchors
    )


def test_batch_hard_tie_breaks_to_lowest_index():
    # positives at indices 1 and 2 are equidistant from the anchor
    emb = np.array([[0.0, 0.0], [2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    labels = np.array([0, 0, 0, 1, 1])
    triples = batch_hard_triplets(emb, labels, [0])
    assert triples == [(0, 1, 3)]


def test_batch_hard_skips_anchor_without_pool():
    emb = np.zeros((2, 3))
    assert batch_hard_triplets(emb, np.array([0, 0]), [0]) == []  # no negatives
    assert batch_hard_triplets(emb, np.array([0, 1]), [0]) == []  # no positives


def test_triplet_loss_hinge_values():
    emb = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    assert triplet_loss(emb, [(0, 1, 2)], margin=0.5) == 0.0  # 1 - 4 + 0.5 < 0
    assert triplet_loss(emb, [(0, 1, 2)], margin=3.5) == pytest.approx(0.5)
    assert triplet_loss(emb, [], margin=0.5) == 0.0
    with pytest.raises(ConfigError):
        triplet_loss(emb, [(0, 1, 2)], margin=-1.0)


def test_final_loss_composition():
    cfg = InferenceConfig(recon_weight=0.9, triplet_weight=2.0, margin=3.5)
    x = np.array([[1.0, 0.0]])
    recon = np.array([[0.0, 0.0]])
    mu = np.array([[1.0, 0.0]])
    sigma = np.array([[1.0, 2.0]])
    emb = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    parts = final_loss(x, recon, mu, sigma, emb, [(0, 1, 2)], cfg)
    vae_total, _, _ = vae_loss(x, recon, mu, sigma, 0.9)
    assert parts["total"] == pytest.approx(vae_total + 2.0 * 0.5)
    assert parts["num_triples"] == 1


def _fd_fixture(seed, use_triplet=True, all_targets=True):
    rng = np.random.default_rng(seed)
    vae = build_vae(10, 3, [8], rng, dtype=np.float64)
    batch = rng.uniform(0.1, 0.9, size=(4, 10))
    is_target = np.array([True, True, True, True] if all_targets else [True, True, False, True])
    negatives = rng.uniform(0.1, 0.9, size=(5, 10))
    noise = rng.standard_normal((4, 3))
    cfg = InferenceConfig(
        latent_dim=3, margin=5.0, recon_weight=0.7, triplet_weight=1.3, use_triplet=use_triplet
    )
    return vae, batch, is_target, negatives, noise, cfg


@pytest.mark.parametrize("use_triplet,all_targets", [(True, True), (False, True), (True, False)])
def test_final_loss_gradients_match_central_differences(use_triplet, all_targets):
    vae, batch, is_target, negatives, noise, cfg = _fd_fixture(11, use_triplet, all_targets)
    _, analytic = _final_loss_and_grads(vae, batch, is_target, negatives, cfg, noise)

    def loss():
        parts, _ = _final_loss_and_grads(vae, batch, is_target, negatives, cfg, noise)
        return parts["total"]

    numeric = numerical_gradient(loss, vae.params())
    assert relative_error(analytic, numeric) < GRAD_TOL


def test_final_loss_gradients_small_margin_inactive_hinges():
    # margin small enough that some hinges go inactive: gradient stays exact
    vae, batch, is_target, negatives, noise, _ = _fd_fixture(13)
    cfg = InferenceConfig(latent_dim=3, margin=0.01, recon_weight=0.5, triplet_weight=0.8)
    _, analytic = _final_loss_and_grads(vae, batch, is_target, negatives, cfg, noise)

    def loss():
        parts, _ = _final_loss_and_grads(vae, batch, is_target, negatives, cfg, noise)
        return parts["total"]

    numeric = numerical_gradient(loss, vae.params())
    assert relative_error(analytic, numeric) < GRAD_TOL


def _cluster_rows(rng, n, dim, offset):
    return rng.normal(loc=offset, scale=0.3, size=(n, dim))


def test_train_adversary_vae_learns_and_is_deterministic():
    rng = np.random.default_rng(3)
    targets = np.clip(_cluster_rows(rng, 12, 16, 0.8), 0, 1)
    others = np.clip(_cluster_rows(rng, 20, 16, 0.2), 0, 1)
    cfg = InferenceConfig(latent_dim=4, vae_hidden=[16], vae_epochs=40, vae_batch=8)
    vae_a, hist_a = train_adversary_vae(targets, others, cfg, seed=5)
    vae_b, _ = train_adversary_vae(targets, others, cfg, seed=5)
    assert hist_a[-1]["total"] < hist_a[0]["total"]
    for pa, pb in zip(vae_a.params(), vae_b.params()):
        np.testing.assert_array_equal(pa, pb)
    with pytest.raises(DegenerateDataError):
        train_adversary_vae(targets[:1], others, cfg, seed=5)


def test_train_adversary_vae_all_rows_mode():
    rng = np.random.default_rng(4)
    targets = np.clip(_cluster_rows(rng, 8, 12, 0.7), 0, 1)
    others = np.clip(_cluster_rows(rng, 14, 12, 0.3), 0, 1)
    cfg = InferenceConfig(latent_dim=3, vae_hidden=[10], vae_epochs=15, all_rows_recon=True)
    vae, hist = train_adversary_vae(targets, others, cfg, seed=6)
    assert hist[-1]["total"] < hist[0]["total"]
    mu, _ = encode_mu(vae, targets)
    assert mu.shape == (8, 3)


def test_train_aux_classifier_separable_data():
    rng = np.random.default_rng(7)
    rows = np.concatenate([_cluster_rows(rng, 20, 10, 3.0), _cluster_rows(rng, 20, 10, -3.0)])
    labels = np.array([0] * 20 + [1] * 20)
    vae = build_vae(10, 4, [12], np.random.default_rng(1))
    cfg = InferenceConfig(latent_dim=4, clf_epochs=200, clf_hidden=[8])
    clf = train_aux_classifier(vae, rows, labels, 2, cfg, seed=9)
    mu, _ = encode_mu(vae, rows.astype(np.float32))
    logits, _ = clf.forward(mu)
    assert (logits.argmax(axis=1) == labels).mean() == 1.0
    with pytest.raises(DegenerateDataError):
        train_aux_classifier(vae, rows[:20], labels[:20], 2, cfg, seed=9)


def _identity_vae_and_scaled_clf(scale=5.0):
    # encoder mean head = identity, classifier logits = scale * x
    vae = build_vae(2, 2, [], np.random.default_rng(0), dtype=np.float64)
    enc = vae.encoder.layers[0]
    enc.W[...] = 0.0
    enc.W[0, 0] = enc.W[1, 1] = 1.0
    enc.b[...] = 0.0
    clf_layer = Dense(2, 3, np.random.default_rng(0), dtype=np.float64)
    clf_layer.W[...] = 0.0
    clf_layer.W[0, 0] = clf_layer.W[1, 1] = scale
    clf_layer.b[...] = 0.0
    return vae, Network([clf_layer], dtype=np.float64)


def test_infer_local_confidence_gate_and_ties():
    vae, clf = _identity_vae_and_scaled_clf()
    rows = np.array([[10.0, 0.0], [0.0, 10.0], [1.0, 1.0], [0.1, 0.0]])
    indices = np.array([7, 8, 9, 10])
    picked = infer_local(vae, clf, rows, indices, target_label=0, confidence=0.99)
    # row 0: confident class 0; row 1: class 1; row 2: exact tie; row 3: weak
    assert picked.tolist() == [7]
    none = infer_local(vae, clf, rows[:0], indices[:0], 0, 0.99)
    assert none.tolist() == []
    with pytest.raises(ContractError):
        infer_local(vae, clf, rows, indices[:2], 0, 0.99)


def test_retrain_local_vae_shapes():
    rng = np.random.default_rng(8)
    rows = np.clip(rng.normal(0.6, 0.2, size=(10, 6)), 0, 1)
    cfg = InferenceConfig(latent_dim=3, vae_hidden=[8], retrain_epochs=25)
    vae, hist = retrain_local_vae(rows, cfg, seed=2)
    assert vae.input_dim == 6
    assert hist[-1]["total"] < hist[0]["total"]
    assert all(h["triplet"] == 0.0 for h in hist)


def _small_pipeline(seed=0, skip_vote=False, inclusive=False):
    train, _ = make_synthetic(240, 10, num_classes=4, image_shape=(1, 12, 12), seed=3)
    vd = partition_features(train, PartitionScheme.strips((1, 12, 12), 4))
    graph = build_graph("complete", [0, 1])
    views = share_features(graph, vd)
    aux = sample_auxiliary(train.labels, count=60, target_label=0, target_fraction=0.2, seed=1)
    own = {m: vd.client_view(m).reshape(len(vd), -1) for m in graph.nodes}
    cfg = InferenceConfig(
        latent_dim=4,
        vae_hidden=[24],
        vae_epochs=25,
        clf_epochs=120,
        retrain_epochs=25,
        confidence=0.95,
        skip_vote=skip_vote,
        inclusive_vote=inclusive,
    )
    result = collaborative_inference(graph, views, own, aux, 4, cfg, seed=seed)
    return result, aux, graph


def test_collaborative_inference_structure():
    result, aux, graph = _small_pipeline()
    for m in graph.nodes:
        assert set(aux.target_indices) <= set(result.local_sets[m])
        np.testing.assert_array_equal(result.final_sets[m], result.consensus)
    # strict vote over 2 proposers: consensus = intersection
    expected = np.intersect1d(result.local_sets[0], result.local_sets[1])
    np.testing.assert_array_equal(result.consensus, expected)
    assert result.leader == 0  # tie on degree, lowest id
    assert result.collect_order == [0, 1]
    assert set(result.generators) <= set(graph.nodes)
    assert 0 in result.generators  # aux seeds guarantee a non-empty agreed set


def test_collaborative_inference_deterministic():
    res_a, _, _ = _small_pipeline(seed=4)
    res_b, _, _ = _small_pipeline(seed=4)
    for m in res_a.final_sets:
        np.testing.assert_array_equal(res_a.final_sets[m], res_b.final_sets[m])
    # different seed must at least change the trained generator weights,
    # even if the selected index sets happen to coincide
    res_c, _, _ = _small_pipeline(seed=5)
    w_a = res_a.generators[0].params()[0]
    w_c = res_c.generators[0].params()[0]
    assert not np.array_equal(w_a, w_c)


def test_collaborative_inference_skip_vote():
    result, _, graph = _small_pipeline(skip_vote=True)
    assert result.consensus is None and result.leader is None
    for m in graph.nodes:
        np.testing.assert_array_equal(result.final_sets[m], result.local_sets[m])


def test_inference_config_validation():
    with pytest.raises(ConfigError):
        InferenceConfig(recon_weight=1.0).validate()
    with pytest.raises(ConfigError):
        InferenceConfig(confidence=0.0).validate()
    with pytest.raises(ConfigError):
        InferenceConfig(margin=-0.1).validate()
    InferenceConfig().validate()
