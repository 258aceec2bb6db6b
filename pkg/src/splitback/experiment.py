"""Run orchestration: one experiment, sweeps, and the bound harness.

run_experiment executes the full pipeline (data, inference, training,
evaluation) from an ExperimentConfig and writes everything a run
produces (metrics JSONL, summary CSV, plots, resolved config, manifest)
into one output directory. Numbers land in files, never in return-only
state, so runs are comparable byte for byte.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import plots
from .config import ExperimentConfig, config_to_dict, serialize
from .data import (
    PartitionScheme,
    load_idx,
    make_synthetic,
    partition_features,
    sample_auxiliary,
)
from .errors import ConfigError, PhaseError, PreconditionError
from .graph import algebraic_connectivity, build_graph, share_features
from .inference import collaborative_inference
from .metrics import (
    InstrumentedRun,
    attack_success_rate,
    clean_data_accuracy,
    estimate_theorem_params,
    label_inference_accuracy,
    theorem1_bound,
)
from .models import mlp_arch
from .protocol import (
    AttackState,
    TrainConfig,
    build_split_state,
    full_clean_gradient,
    run_round,
    train,
)
from .trigger import build_centered_trigger, build_scattered_triggers, select_poison_set
from .nn import flatten_params
from .utils import sha256_file


@dataclass
class RunManifest:
    """What a finished run left on disk."""

    name: str
    seed: int
    config_hash: str
    started_at: str
    finished_at: str
    out_dir: str
    artifacts: dict  # name -> {"path": relative, "sha256": hex}
    summary: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def _native(value):
    """Convert numpy scalars to plain Python for stable JSON."""
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def _phase(name):
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except PhaseError:
                raise
            except Exception as exc:
                raise PhaseError(name, str(exc)) from exc

        return run

    return wrap


@_phase("data")
def _data_phase(cfg: ExperimentConfig):
    d = cfg.dataset
    if d.source == "synthetic":
        raw_train, raw_test = make_synthetic(
            d.num_train, d.num_test, d.num_classes, d.image_shape, cfg.seed, d.noise
        )
    else:
        raw_train = load_idx(d.images_path, d.labels_path, d.num_classes)
        raw_test = load_idx(d.test_images_path, d.test_labels_path, d.num_classes)
        raw_train = raw_train.subset(np.arange(min(d.num_train, len(raw_train))))
        raw_test = raw_test.subset(np.arange(min(d.num_test, len(raw_test))))
    p = cfg.partition
    if p.layout == "strips":
        scheme = PartitionScheme.strips(d.image_shape, p.num_clients)
    else:
        scheme = PartitionScheme.grid(d.image_shape, *p.grid)
    return partition_features(raw_train, scheme), partition_features(raw_test, scheme), scheme


@dataclass
class AttackPlan:
    """Output of the inference phase: who poisons what, and how well."""

    graph: object
    connectivity: float | None
    attack: AttackState
    inference_record: dict  # one metrics.jsonl record


@_phase("inference")
def _inference_phase(cfg: ExperimentConfig, vtrain, scheme) -> AttackPlan:
    at = cfg.attack
    ids = list(cfg.adversaries.ids)
    graph = build_graph(
        cfg.adversaries.topology, ids,
        edges=cfg.adversaries.edges, step=cfg.adversaries.degree_step,
    )
    rho = (
        algebraic_connectivity(graph, normalized=cfg.adversaries.normalized_connectivity)
        if len(ids) >= 2
        else None
    )
    n = len(vtrain)
    labels = vtrain.labels  # server-side truth, used here only to score inference

    if at.oracle_consensus:
        agreed = np.flatnonzero(labels == at.target_class).astype(np.int64)
        generators = {}
        per_plan = None
        poison = select_poison_set(agreed, n, at.poison_budget, cfg.seed)
        quality = label_inference_accuracy(agreed, labels, at.target_class)
        record = {
            "kind": "inference",
            "mode": "oracle",
            "consensus_size": int(len(agreed)),
            "precision": quality.precision,
            "recall": quality.recall,
            "leader": None,
            "connectivity": _native(rho),
            "poisoned_rows": int(len(poison)),
        }
    else:
        aux = sample_auxiliary(labels, at.aux_count, at.target_class, at.aux_target_fraction, cfg.seed)
        views = share_features(graph, vtrain)
        own = {m: vtrain.client_view(m).reshape(n, -1) for m in ids}
        result = collaborative_inference(
            graph, views, own, aux, cfg.dataset.num_classes, at.inference, cfg.seed
        )
        generators = result.generators
        if at.inference.skip_vote:
            # without a voted plan the adversaries cannot coordinate rows,
            # so each spends an equal split of the global budget
            per_budget = at.poison_budget / len(ids)
            per_plan = {
                m: select_poison_set(result.final_sets[m], n, per_budget, cfg.seed, tag=m)
                for m in ids
            }
            poison = np.zeros(0, dtype=np.int64)
            sizes = {str(m): int(len(s)) for m, s in result.final_sets.items()}
            precisions = [
                label_inference_accuracy(s, labels, at.target_class).precision
                for s in result.final_sets.values()
            ]
            known = [p for p in precisions if p is not None]
            record = {
                "kind": "inference",
                "mode": "no-vote",
                "consensus_size": None,
                "precision": float(np.mean(known)) if known else None,
                "recall": None,
                "leader": None,
                "connectivity": _native(rho),
                "local_sizes": sizes,
                "poisoned_rows": int(sum(len(v) for v in per_plan.values())),
            }
        else:
            per_plan = None
            agreed = result.consensus
            poison = select_poison_set(agreed, n, at.poison_budget, cfg.seed)
            quality = label_inference_accuracy(agreed, labels, at.target_class)
            record = {
                "kind": "inference",
                "mode": "consensus",
                "consensus_size": quality.size,
                "precision": quality.precision,
                "recall": quality.recall,
                "leader": int(result.leader),
                "connectivity": _native(rho),
                "local_sizes": {str(m): int(len(s)) for m, s in result.local_sets.items()},
                "local_precisions": {
                    str(m): label_inference_accuracy(s, labels, at.target_class).precision
                    for m, s in result.local_sets.items()
                },
                "poisoned_rows": int(len(poison)),
            }

    trig = at.trigger
    if trig.mode == "centered":
        _, height, width = cfg.dataset.image_shape
        center = trig.center if trig.center is not None else (height // 2, width // 2)
        shares = build_centered_trigger(scheme, ids, trig.height, trig.width, tuple(center))
    else:
        shares = build_scattered_triggers(scheme, ids, trig.total_area)

    attack = AttackState(
        poison_indices=poison,
        shares=shares,
        generators=generators,
        intensity=at.intensity,
        swap=at.swap,
        clip_to_range=at.clip_to_range,
        per_adversary_indices=per_plan,
    )
    return AttackPlan(graph=graph, connectivity=rho, attack=attack, inference_record=record)


def _bottom_archs(cfg: ExperimentConfig, vtrain):
    return {k: mlp_arch(cfg.model.bottom_hidden, cfg.model.embed_dim) for k in vtrain.slices}


def _train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        epochs=t.epochs,
        batch_size=t.batch_size,
        bottom_lr=t.bottom_lr,
        top_lr=t.top_lr,
        top_optimizer=t.top_optimizer,
        bottom_optimizer=t.bottom_optimizer,
        defense_variance=t.defense_variance,
        instrumentation=t.instrumentation,
        seed=cfg.seed,
    )


@_phase("training")
def _training_phase(cfg: ExperimentConfig, vtrain, vtest, plan: AttackPlan | None):
    state = build_split_state(
        vtrain,
        _bottom_archs(cfg, vtrain),
        mlp_arch(cfg.model.top_hidden, cfg.dataset.num_classes),
        cfg.dataset.num_classes,
        cfg.seed,
        top_optimizer=cfg.train.top_optimizer,
        bottom_optimizer=cfg.train.bottom_optimizer,
    )
    eval_records = []

    def snapshot(epoch, st, _traces):
        if (epoch + 1) % cfg.eval.eval_every and epoch != cfg.train.epochs - 1:
            return
        rec = {
            "kind": "eval",
            "epoch": epoch,
            "cda": clean_data_accuracy(st, vtest),
            "asr": None,
        }
        if plan is not None:
            rec["asr"] = attack_success_rate(
                st,
                vtest,
                plan.attack.shares,
                plan.attack.intensity,
                cfg.attack.target_class,
                num_samples=cfg.eval.asr_samples,
                seed=cfg.seed,
                clip_to_range=plan.attack.clip_to_range,
            )
        eval_records.append(rec)

    traces = train(
        state,
        vtrain,
        _train_config(cfg),
        attack=plan.attack if plan is not None else None,
        on_epoch_end=snapshot,
    )
    return state, traces, eval_records


def _round_record(t) -> dict:
    rec = {
        "kind": "round",
        "round": t.round_index,
        "epoch": t.epoch,
        "loss": _native(t.loss),
        "num_poisoned": t.num_poisoned,
        "delta": _native(t.delta),
    }
    return rec


def _summarize(cfg, plan, traces, eval_records) -> dict:
    # delta averages over every instrumented round, so both how often a
    # batch carries poison and how hard each hit lands move the number
    deltas = [t.delta for t in traces if t.delta is not None]
    final_eval = eval_records[-1] if eval_records else {}
    inference = plan.inference_record if plan is not None else {}
    return {
        "name": cfg.name,
        "seed": cfg.seed,
        "cda": final_eval.get("cda"),
        "asr": final_eval.get("asr"),
        "inference_precision": inference.get("precision"),
        "consensus_size": inference.get("consensus_size"),
        "connectivity": inference.get("connectivity"),
        "poisoned_rows": inference.get("poisoned_rows", 0),
        "delta_mean": float(np.mean(deltas)) if deltas else None,
        "delta_max": float(np.max(deltas)) if deltas else None,
        "final_loss": _native(traces[-1].loss) if traces else None,
        "num_rounds": len(traces),
        "defense_variance": cfg.train.defense_variance,
        "intensity": cfg.attack.intensity if plan is not None else None,
    }


def _write_summary_csv(path, rows: list[dict]) -> None:
    keys = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in keys})


def _config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(canon).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_experiment(cfg: ExperimentConfig, out_dir, deterministic: bool = False) -> RunManifest:
    """Execute one configured run and persist every artifact under out_dir.

    deterministic is a labeling flag recorded in the manifest; bitwise
    reproducibility additionally needs the process-level thread pinning
    the CLI applies before numpy loads.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()

    vtrain, vtest, scheme = _data_phase(cfg)
    plan = _inference_phase(cfg, vtrain, scheme) if cfg.attack_enabled else None
    state, traces, eval_records = _training_phase(cfg, vtrain, vtest, plan)

    try:
        records = []
        if plan is not None:
            records.append(plan.inference_record)
        records.extend(_round_record(t) for t in traces)
        records.extend(eval_records)
        metrics_path = out / "metrics.jsonl"
        with open(metrics_path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(_json_line(rec))

        summary = _summarize(cfg, plan, traces, eval_records)
        summary["deterministic"] = bool(deterministic)
        summary_path = out / "summary.csv"
        _write_summary_csv(summary_path, [summary])

        config_path = out / "config.yaml"
        serialize(cfg, config_path)

        fmt = cfg.eval.plot_format
        curve_path = plots.plot_training_curves(eval_records, out / f"curves.{fmt}")
        loss_path = plots.plot_loss_curve([_round_record(t) for t in traces], out / f"loss.{fmt}")

        artifact_paths = {
            "metrics": metrics_path,
            "summary": summary_path,
            "config": config_path,
            "curves": Path(curve_path),
            "loss": Path(loss_path),
        }
        artifacts = {
            name: {"path": p.name, "sha256": sha256_file(p)} for name, p in artifact_paths.items()
        }
        manifest = RunManifest(
            name=cfg.name,
            seed=cfg.seed,
            config_hash=_config_hash(cfg),
            started_at=started,
            finished_at=_now(),
            out_dir=str(out),
            artifacts=artifacts,
            summary=summary,
        )
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return manifest
    except PhaseError:
        raise
    except Exception as exc:
        raise PhaseError("evaluation", str(exc)) from exc


_SWEEP_AXES = ("gamma", "adversary-count", "connectivity", "margin", "latent-dim", "beta")


def _apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    out = copy.deepcopy(cfg)
    if axis == "gamma":
        out.attack.intensity = float(value)
    elif axis == "adversary-count":
        out.adversaries.ids = list(range(int(value)))
    elif axis == "connectivity":
        out.adversaries.topology = "degree-sweep"
        out.adversaries.degree_step = int(value)
    elif axis == "margin":
        out.attack.inference.margin = float(value)
    elif axis == "latent-dim":
        out.attack.inference.latent_dim = int(value)
    elif axis == "beta":
        out.attack.inference.confidence = float(value)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {_SWEEP_AXES}")
    out.name = f"{cfg.name}-{axis}-{value}"
    return out


@dataclass
class SweepResult:
    axis: str
    values: list
    manifests: list  # one entry per (value, seed); None where the run failed
    errors: dict  # run label -> message
    table_path: str
    plot_path: str | None


def run_sweep(
    base_cfg: ExperimentConfig,
    axis: str,
    values,
    out_dir,
    seeds: list[int] | None = None,
    deterministic: bool = False,
) -> SweepResult:
    """One run per (axis value, seed), plus a combined table and trend plot.

    All runs share the base seed(s) so the axis is the only thing moving.
    A failing run is recorded and skipped; the sweep continues.
    """
    if axis not in _SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {_SWEEP_AXES}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds) if seeds else [base_cfg.seed]

    manifests, errors, rows = [], {}, []
    for value in values:
        for seed in seeds:
            cfg = _apply_axis(base_cfg, axis, value)
            cfg.seed = seed
            label = f"{axis}-{value}-seed-{seed}"
            try:
                manifest = run_experiment(cfg, out / label, deterministic=deterministic)
                manifests.append(manifest)
                row = dict(manifest.summary)
                row["axis_value"] = value
                rows.append(row)
            except Exception as exc:  # isolate per-run failures, keep sweeping
                errors[label] = str(exc)
                manifests.append(None)

    table_path = out / "sweep.csv"
    if rows:
        ordered = [{"axis": axis, **row} for row in rows]
        _write_summary_csv(table_path, ordered)
    else:
        table_path.write_text(f"axis\n{axis}\n", encoding="utf-8")

    plot_path = None
    if rows:
        fmt = base_cfg.eval.plot_format
        by_value = {}
        for row in rows:
            by_value.setdefault(row["axis_value"], []).append(row)
        vals = sorted(by_value)
        asr_rows = {v: [r["asr"] for r in by_value[v] if r["asr"] is not None] for v in vals}
        if all(asr_rows[v] for v in vals):
            means = [float(np.mean(asr_rows[v])) for v in vals]
            stds = [float(np.std(asr_rows[v])) for v in vals]
            plot_path = plots.plot_sweep_trend(
                [float(v) for v in vals], means, stds, axis, "attack success rate",
                out / f"sweep-asr.{fmt}",
            )
        if axis == "connectivity":
            rhos = [float(np.mean([r["connectivity"] for r in by_value[v]])) for v in vals]
            deltas = [
                float(np.mean([r["delta_mean"] or 0.0 for r in by_value[v]])) for v in vals
            ]
            plots.plot_delta_vs_connectivity(rhos, deltas, out / f"delta-vs-rho.{fmt}")

    return SweepResult(
        axis=axis,
        values=list(values),
        manifests=manifests,
        errors=errors,
        table_path=str(table_path),
        plot_path=plot_path,
    )


def _toy_instrumented_run(cfg: ExperimentConfig, poisoned: bool):
    """Train the toy problem once, recording bound instrumentation."""
    if cfg.train.top_optimizer != "sgd" or cfg.train.bottom_optimizer != "sgd":
        raise PreconditionError("the bound holds for plain SGD only; set both optimizers to sgd")
    if cfg.train.top_lr != cfg.train.bottom_lr:
        raise PreconditionError("the bound assumes one shared step size across parties")
    vtrain, vtest, scheme = _data_phase(cfg)
    plan = _inference_phase(cfg, vtrain, scheme) if poisoned else None
    state = build_split_state(
        vtrain,
        _bottom_archs(cfg, vtrain),
        mlp_arch(cfg.model.top_hidden, cfg.dataset.num_classes),
        cfg.dataset.num_classes,
        cfg.seed,
        top_optimizer="sgd",
        bottom_optimizer="sgd",
    )
    tcfg = _train_config(cfg)
    tcfg.instrumentation = "full"
    rounds = cfg.train.epochs * math.ceil(len(vtrain) / cfg.train.batch_size)
    params, grads, losses, gaps, variances = [], [], [], [], []
    for t in range(rounds):
        params.append(flatten_params(state.all_params())[0])
        loss, _, _, flat = full_clean_gradient(state, vtrain)
        grads.append(flat)
        losses.append(loss)
        trace = run_round(state, vtrain, t, tcfg, plan.attack if plan else None)
        gaps.append(trace.party_gap_sq)
        variances.append(trace.party_var_sq)
    return InstrumentedRun(
        params=params,
        grads=grads,
        losses=losses,
        gaps_sq=gaps,
        vars_sq=variances,
        etas=[cfg.train.bottom_lr] * rounds,
        num_parties=state.num_parties,
    )


def verify_bound(
    base_cfg: ExperimentConfig,
    out_dir,
    trials: int = 10,
    deterministic: bool = False,
) -> list[dict]:
    """Check the degradation bound on seeded toy trials.

    Each trial trains the poisoned toy problem with full instrumentation,
    estimates (L, Gamma, delta) empirically, and tests that the smallest
    squared full-gradient norm stays under the bound. A benign twin of
    each trial must report delta exactly zero. Writes bound.jsonl, a
    summary CSV, and a comparison plot under out_dir.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for i in range(trials):
        cfg = copy.deepcopy(base_cfg)
        cfg.seed = base_cfg.seed + i
        run = _toy_instrumented_run(cfg, poisoned=True)
        est = estimate_theorem_params(run)
        bound = theorem1_bound(
            est.f0, run.etas, est.lipschitz, est.gamma, est.delta, run.num_parties
        )
        benign = estimate_theorem_params(_toy_instrumented_run(cfg, poisoned=False))
        results.append(
            {
                "trial": i,
                "seed": cfg.seed,
                "f0": est.f0,
                "lipschitz": est.lipschitz,
                "gamma": est.gamma,
                "delta": est.delta,
                "min_grad_norm_sq": est.min_grad_norm_sq,
                "bound": bound,
                "holds": bool(est.min_grad_norm_sq <= bound),
                "benign_delta": benign.delta,
            }
        )

    with open(out / "bound.jsonl", "w", encoding="utf-8") as fh:
        for rec in results:
            fh.write(_json_line(rec))
    _write_summary_csv(out / "bound-summary.csv", results)
    plots.plot_bound_trials(
        [r["bound"] for r in results],
        [r["min_grad_norm_sq"] for r in results],
        out / f"bound-trials.{base_cfg.eval.plot_format}",
    )
    return results


def gradient_check_suite(seed: int = 0) -> dict:
    """End-to-end finite-difference checks; returns named relative errors."""
    from .inference import InferenceConfig, _final_loss_and_grads
    from .models import build_network, build_vae
    from .nn import numerical_gradient, relative_error
    from .utils import rng_for

    report = {}

    from .nn import cross_entropy

    rng = rng_for(seed, "gradcheck", "dense")
    net = build_network((7,), [["dense", 6], ["relu"], ["dense", 3]], rng, dtype=np.float64)
    x = rng.standard_normal((5, 7))
    labels = rng.integers(0, 3, size=5)

    def dense_loss():
        logits, _ = net.forward(x)
        return cross_entropy(logits, labels)[0]

    logits, caches = net.forward(x)
    _, dlogits = cross_entropy(logits, labels)
    _, grads = net.backward(caches, dlogits / len(labels))
    report["dense"] = relative_error(grads, numerical_gradient(dense_loss, net.params()))

    vae = build_vae(8, 3, [6], rng_for(seed, "gradcheck", "vae"), dtype=np.float64)
    batch = rng_for(seed, "gradcheck", "batch").standard_normal((4, 8))
    negatives = rng_for(seed, "gradcheck", "neg").standard_normal((5, 8))
    cfg = InferenceConfig(latent_dim=3, vae_hidden=[6], margin=0.5)
    mask = np.ones(4, dtype=bool)
    eps = rng_for(seed, "gradcheck", "eps").standard_normal((4, 3))

    def vae_loss_fn():
        parts, _ = _final_loss_and_grads(vae, batch, mask, negatives, cfg, eps)
        return parts["total"]

    _, vae_grads = _final_loss_and_grads(vae, batch, mask, negatives, cfg, eps)
    report["vae-joint"] = relative_error(vae_grads, numerical_gradient(vae_loss_fn, vae.params()))

    raw_train, _ = make_synthetic(10, 4, num_classes=3, image_shape=(1, 6, 6), seed=seed)
    scheme = PartitionScheme.strips((1, 6, 6), 2)
    vtrain = partition_features(raw_train, scheme)
    state = build_split_state(
        vtrain,
        {k: [["flatten"], ["dense", 5], ["relu"], ["dense", 4]] for k in vtrain.slices},
        [["dense", 3]],
        3,
        seed,
        dtype=np.float64,
    )

    def split_loss():
        loss, _, _, _ = full_clean_gradient(state, vtrain)
        return loss

    _, _, _, flat = full_clean_gradient(state, vtrain)
    numeric = numerical_gradient(split_loss, state.all_params())
    flat_numeric = np.concatenate([g.ravel() for g in numeric])
    denom = np.linalg.norm(flat) + np.linalg.norm(flat_numeric)
    report["split-end-to-end"] = float(np.linalg.norm(flat - flat_numeric) / denom)
    return report
