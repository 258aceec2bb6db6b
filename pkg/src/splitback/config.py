"""Experiment configuration: dataclasses, strict YAML parsing, presets.

Configs are plain nested dataclasses. Parsing is strict: unknown keys
are errors, and validate() collects every violated invariant instead of
stopping at the first. serialize() and parse_config() round-trip.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .inference import InferenceConfig


@dataclass
class DatasetConfig:
    source: str = "synthetic"  # "synthetic" | "idx"
    num_train: int = 8000
    num_test: int = 2000
    num_classes: int = 10
    image_shape: tuple[int, int, int] = (1, 28, 28)
    noise: float = 0.08
    images_path: str | None = None  # idx source only
    labels_path: str | None = None
    test_images_path: str | None = None
    test_labels_path: str | None = None


@dataclass
class PartitionConfig:
    layout: str = "strips"  # "strips" | "grid"
    num_clients: int = 6
    grid: tuple[int, int] | None = None  # (rows, cols) when layout == "grid"


@dataclass
class AdversaryConfig:
    ids: list[int] = field(default_factory=list)  # empty = benign run
    topology: str = "complete"  # "complete" | "line" | "ring" | "degree-sweep" | "custom"
    degree_step: int | None = None
    edges: list[tuple[int, int]] | None = None
    normalized_connectivity: bool = False


@dataclass
class TriggerConfig:
    mode: str = "centered"  # "centered" | "scattered"
    height: int = 5
    width: int = 7
    center: tuple[int, int] | None = None  # default: image center
    total_area: int | None = None  # scattered mode


@dataclass
class AttackConfig:
    target_class: int = 0
    aux_count: int = 360
    aux_target_fraction: float = 0.16
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    oracle_consensus: bool = False  # skip inference, poison true target rows
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    intensity: float = 20.0
    poison_budget: float = 0.01
    swap: bool = True
    clip_to_range: bool = False


@dataclass
class ModelConfig:
    bottom_hidden: list[int] = field(default_factory=lambda: [64])
    embed_dim: int = 16
    top_hidden: list[int] = field(default_factory=lambda: [128])


@dataclass
class TrainSection:
    epochs: int = 5
    batch_size: int = 128
    bottom_lr: float = 0.05
    top_lr: float = 1e-3
    top_optimizer: str = "adam"
    bottom_optimizer: str = "sgd"
    defense_variance: float = 0.0
    instrumentation: str = "none"


@dataclass
class EvalConfig:
    asr_samples: int = 250
    eval_every: int = 1  # epochs between metric snapshots
    plot_format: str = "png"  # "png" | "svg"


@dataclass
class ExperimentConfig:
    name: str = "run"
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    adversaries: AdversaryConfig = field(default_factory=AdversaryConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def attack_enabled(self) -> bool:
        return len(self.adversaries.ids) > 0

    def validate(self) -> None:
        """Raise ConfigError listing every violated invariant."""
        problems = []
        d = self.dataset
        if d.source not in ("synthetic", "idx"):
            problems.append(f"dataset.source {d.source!r} not one of synthetic, idx")
        if d.source == "idx" and not all(
            (d.images_path, d.labels_path, d.test_images_path, d.test_labels_path)
        ):
            problems.append(
                "dataset.source idx requires images_path, labels_path, "
                "test_images_path, and test_labels_path"
            )
        if min(d.num_train, d.num_test, d.num_classes) < 1:
            problems.append("dataset sizes and class count must be >= 1")
        if len(d.image_shape) != 3 or min(d.image_shape) < 1:
            problems.append(f"dataset.image_shape {d.image_shape} must be 3 positive ints")
        p = self.partition
        if p.layout not in ("strips", "grid"):
            problems.append(f"partition.layout {p.layout!r} not one of strips, grid")
        if p.layout == "grid" and p.grid is None:
            problems.append("partition.layout grid requires partition.grid = [rows, cols]")
        if p.num_clients < 1:
            problems.append("partition.num_clients must be >= 1")
        a = self.adversaries
        clients = set(range(p.num_clients))
        if not set(a.ids) <= clients:
            problems.append(f"adversaries.ids {sorted(set(a.ids) - clients)} outside client range")
        if len(set(a.ids)) != len(a.ids):
            problems.append("adversaries.ids contains duplicates")
        if a.topology not in ("complete", "line", "ring", "degree-sweep", "custom"):
            problems.append(f"adversaries.topology {a.topology!r} unknown")
        if a.topology == "degree-sweep" and a.degree_step is None:
            problems.append("degree-sweep topology requires adversaries.degree_step")
        if a.topology == "custom" and a.edges is None:
            problems.append("custom topology requires adversaries.edges")
        at = self.attack
        if not 0 <= at.target_class < d.num_classes:
            problems.append(f"attack.target_class {at.target_class} outside label range")
        if not 0.0 <= at.poison_budget <= 1.0:
            problems.append(f"attack.poison_budget {at.poison_budget} outside [0, 1]")
        if at.trigger.mode not in ("centered", "scattered"):
            problems.append(f"attack.trigger.mode {at.trigger.mode!r} unknown")
        if at.trigger.mode == "scattered" and at.trigger.total_area is None:
            problems.append("scattered trigger requires attack.trigger.total_area")
        if at.oracle_consensus and at.swap:
            problems.append("oracle_consensus runs without generators, so attack.swap must be false")
        try:
            at.inference.validate()
        except ConfigError as exc:
            problems.append(f"attack.inference: {exc}")
        t = self.train
        if min(t.epochs, t.batch_size) < 1:
            problems.append("train.epochs and train.batch_size must be >= 1")
        if t.top_optimizer not in ("adam", "sgd") or t.bottom_optimizer not in ("adam", "sgd"):
            problems.append("train optimizers must be 'adam' or 'sgd'")
        if t.defense_variance < 0:
            problems.append("train.defense_variance must be >= 0")
        if t.instrumentation not in ("none", "top", "full"):
            problems.append(f"train.instrumentation {t.instrumentation!r} unknown")
        e = self.eval
        if e.asr_samples < 1 or e.eval_every < 1:
            problems.append("eval.asr_samples and eval.eval_every must be >= 1")
        if e.plot_format not in ("png", "svg"):
            problems.append(f"eval.plot_format {e.plot_format!r} not one of png, svg")
        if problems:
            raise ConfigError("; ".join(problems))


_TUPLE_FIELDS = {"image_shape", "grid", "center"}  # YAML lists become tuples here
_PAIR_LIST_FIELDS = {"edges"}


def _from_mapping(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        if dataclasses.is_dataclass(f.type) or f.type in (
            "DatasetConfig", "PartitionConfig", "AdversaryConfig", "AttackConfig",
            "TriggerConfig", "ModelConfig", "TrainSection", "EvalConfig", "InferenceConfig",
        ):
            sub_cls = _SECTION_TYPES[name]
            kwargs[name] = _from_mapping(sub_cls, value, f"{path}.{name}")
        elif name in _TUPLE_FIELDS and value is not None:
            kwargs[name] = tuple(int(v) for v in value)
        elif name in _PAIR_LIST_FIELDS and value is not None:
            kwargs[name] = [tuple(int(x) for x in pair) for pair in value]
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "partition": PartitionConfig,
    "adversaries": AdversaryConfig,
    "attack": AttackConfig,
    "trigger": TriggerConfig,
    "inference": InferenceConfig,
    "model": ModelConfig,
    "train": TrainSection,
    "eval": EvalConfig,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _from_mapping(ExperimentConfig, data, "config")
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def clean(obj):
        if isinstance(obj, tuple):
            return [clean(v) for v in obj]
        if isinstance(obj, list):
            return [clean(v) for v in obj]
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        return obj

    return clean(dataclasses.asdict(cfg))


def parse_config(path) -> ExperimentConfig:
    """Load and validate a YAML experiment config."""
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    return config_from_dict(data)


def serialize(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


def _base_desk_config(name: str) -> ExperimentConfig:
    return ExperimentConfig(
        name=name,
        seed=0,
        dataset=DatasetConfig(num_train=8000, num_test=2000),
        partition=PartitionConfig(layout="strips", num_clients=6),
        model=ModelConfig(bottom_hidden=[64], embed_dim=16, top_hidden=[128]),
        train=TrainSection(epochs=5, batch_size=128, bottom_lr=0.05, top_lr=1e-3),
    )


def preset(name: str) -> ExperimentConfig:
    """A named ready-to-run configuration; see list_presets()."""
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(_PRESETS))}")
    cfg = _PRESETS[name]()
    cfg.validate()
    return cfg


def list_presets() -> list[str]:
    return sorted(_PRESETS)


def _preset_benign() -> ExperimentConfig:
    return _base_desk_config("benign")


def _preset_attacked() -> ExperimentConfig:
    cfg = _base_desk_config("attacked")
    cfg.adversaries = AdversaryConfig(ids=[0, 1, 2], topology="complete")
    cfg.attack = AttackConfig(
        target_class=0,
        aux_count=360,
        aux_target_fraction=0.16,
        inference=InferenceConfig(),
        # center chosen so the 5x7 rectangle sits inside the three
        # adversary-owned strips (columns 0..14 of the 28-wide image)
        trigger=TriggerConfig(mode="centered", height=5, width=7, center=(14, 7)),
        intensity=20.0,
        poison_budget=0.01,
        swap=True,
    )
    cfg.train.instrumentation = "top"
    return cfg


def _preset_attacked_defended() -> ExperimentConfig:
    cfg = _preset_attacked()
    cfg.name = "attacked-defended"
    cfg.train.defense_variance = 1e-10
    return cfg


def _preset_sweep_connectivity() -> ExperimentConfig:
    # six adversaries, scattered shares, line topology as the sweep start;
    # the budget is set above the consensus sizes the sparse graphs reach,
    # so the poisoned-row count (and hence the gradient gap) tracks the
    # connectivity instead of clipping at the budget for every topology
    cfg = _base_desk_config("sweep-connectivity")
    cfg.adversaries = AdversaryConfig(ids=[0, 1, 2, 3, 4, 5], topology="degree-sweep", degree_step=1)
    cfg.attack = AttackConfig(
        trigger=TriggerConfig(mode="scattered", total_area=36),
        intensity=20.0,
        poison_budget=0.04,
    )
    cfg.train.instrumentation = "top"
    return cfg


def _preset_toy_bound() -> ExperimentConfig:
    # tiny all-SGD problem for the degradation-bound harness
    cfg = ExperimentConfig(
        name="toy-bound",
        dataset=DatasetConfig(num_train=64, num_test=32, num_classes=3, image_shape=(1, 8, 8)),
        partition=PartitionConfig(layout="strips", num_clients=2),
        adversaries=AdversaryConfig(ids=[0], topology="custom", edges=[]),
        attack=AttackConfig(
            target_class=0,
            oracle_consensus=True,
            trigger=TriggerConfig(mode="centered", height=3, width=3, center=(4, 2)),
            intensity=6.0,
            poison_budget=0.1,
            swap=False,
        ),
        model=ModelConfig(bottom_hidden=[], embed_dim=6, top_hidden=[]),
        train=TrainSection(
            epochs=4,
            batch_size=16,
            bottom_lr=0.02,
            top_lr=0.02,
            top_optimizer="sgd",
            instrumentation="full",
        ),
    )
    return cfg


_PRESETS = {
    "benign": _preset_benign,
    "attacked": _preset_attacked,
    "attacked-defended": _preset_attacked_defended,
    "sweep-connectivity": _preset_sweep_connectivity,
    "toy-bound": _preset_toy_bound,
}
