"""Experiment configuration: JSON in, validated objects out.

Unknown keys are rejected at every nesting level so a typo'd option fails the
run instead of silently using a default.  ``validate`` additionally builds
every model in the config and checks the cross-cutting constraints (shape
audits, messenger lightness, partitioner arithmetic).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .data import DataError
from .losses import LossWeights
from .models import (
    CLASSIFICATION_ARCHS,
    SEGMENTATION_ARCHS,
    build_client_spec,
    build_model,
    classification_messenger,
    segmentation_messenger,
)
from .protocol import AblationSwitches, RoundPlan
from .tensor import ShapeError


class ConfigError(ValueError):
    pass


MESSENGER_BUDGET = 0.25  # messenger params must stay under this fraction of the smallest local model

_TASKS = ("classification", "segmentation")
_METHODS = ("mhpflid", "fedavg", "local")
_AGGREGATIONS = ("uniform", "data_weighted")
_KL_VARIANTS = ("standard", "appendix")


@dataclass(frozen=True)
class DatasetCfg:
    num_samples: int = 600
    num_classes: int = 3
    image_size: int = 16


@dataclass(frozen=True)
class MessengerCfg:
    widths: tuple[int, ...] = (16, 16, 32)
    hidden: int = 64
    head_widths: tuple[int, ...] = (8, 8, 8)
    conv_stride: int = 1


@dataclass(frozen=True)
class PartitionerCfg:
    kind: str = "dirichlet"
    alpha: float = 0.3
    factors: tuple[int, ...] = (1, 2, 4, 8)
    min_per_split: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "classification"
    method: str = "mhpflid"
    seed: int = 0
    out_dir: str | None = None
    dataset: DatasetCfg = field(default_factory=DatasetCfg)
    clients: tuple[str, ...] = ("tiny_convnet_2", "tiny_convnet_3", "tiny_convnet_4", "tiny_convnet_5")
    messenger: MessengerCfg = field(default_factory=MessengerCfg)
    partitioner: PartitionerCfg = field(default_factory=PartitionerCfg)
    rounds: RoundPlan = field(default_factory=lambda: RoundPlan(rounds=20))
    loss_weights: LossWeights = field(default_factory=LossWeights)
    ablation: AblationSwitches = field(default_factory=AblationSwitches)
    aggregation: str = "data_weighted"
    kl_variant: str = "standard"
    checkpoint_every: int = 10
    record_timing: bool = False


def _take(raw: dict, path: str, known: dict) -> dict:
    """Pop known keys (applying per-key converters); reject leftovers."""
    out = {}
    raw = dict(raw)
    for key, convert in known.items():
        if key in raw:
            out[key] = convert(raw.pop(key))
    if raw:
        raise ConfigError(f"unknown key(s) {sorted(raw)} in {path}")
    return out


def _expect(kind, path: str):
    def convert(value):
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is int and isinstance(value, bool):
            raise ConfigError(f"{path}: expected int, got bool")
        if not isinstance(value, kind):
            raise ConfigError(f"{path}: expected {kind.__name__}, got {type(value).__name__}")
        return value

    return convert


def _int_tuple(path: str):
    def convert(value):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{path}: expected a list of integers")
        return tuple(value)

    return convert


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be a JSON object")
    top = _take(
        raw,
        "config",
        {
            "task": _expect(str, "task"),
            "method": _expect(str, "method"),
            "seed": _expect(int, "seed"),
            "out_dir": lambda v: v if v is None else _expect(str, "out_dir")(v),
            "dataset": lambda v: DatasetCfg(
                **_take(
                    _expect(dict, "dataset")(v),
                    "dataset",
                    {
                        "num_samples": _expect(int, "dataset.num_samples"),
                        "num_classes": _expect(int, "dataset.num_classes"),
                        "image_size": _expect(int, "dataset.image_size"),
                    },
                )
            ),
            "clients": lambda v: tuple(_expect(str, "clients[i]")(a) for a in _expect(list, "clients")(v)),
            "messenger": lambda v: MessengerCfg(
                **_take(
                    _expect(dict, "messenger")(v),
                    "messenger",
                    {
                        "widths": _int_tuple("messenger.widths"),
                        "hidden": _expect(int, "messenger.hidden"),
                        "head_widths": _int_tuple("messenger.head_widths"),
                        "conv_stride": _expect(int, "messenger.conv_stride"),
                    },
                )
            ),
            "partitioner": lambda v: PartitionerCfg(
                **_take(
                    _expect(dict, "partitioner")(v),
                    "partitioner",
                    {
                        "kind": _expect(str, "partitioner.kind"),
                        "alpha": _expect(float, "partitioner.alpha"),
                        "factors": _int_tuple("partitioner.factors"),
                        "min_per_split": _expect(int, "partitioner.min_per_split"),
                    },
                )
            ),
            "rounds": lambda v: RoundPlan(
                **_take(
                    _expect(dict, "rounds")(v),
                    "rounds",
                    {
                        "rounds": _expect(int, "rounds.rounds"),
                        "epochs_injection": _expect(int, "rounds.epochs_injection"),
                        "epochs_distillation": _expect(int, "rounds.epochs_distillation"),
                        "batch_size": _expect(int, "rounds.batch_size"),
                        "lr_injection": _expect(float, "rounds.lr_injection"),
                        "lr_distillation": _expect(float, "rounds.lr_distillation"),
                        "optimizer": _expect(str, "rounds.optimizer"),
                        "reset_messenger_optimizer": _expect(bool, "rounds.reset_messenger_optimizer"),
                    },
                )
            ),
            "loss_weights": lambda v: LossWeights(
                **_take(
                    _expect(dict, "loss_weights")(v),
                    "loss_weights",
                    {
                        "local_injection": _expect(float, "loss_weights.local_injection"),
                        "messenger_injection": _expect(float, "loss_weights.messenger_injection"),
                        "messenger_distillation": _expect(float, "loss_weights.messenger_distillation"),
                        "consistency": _expect(float, "loss_weights.consistency"),
                    },
                )
            ),
            "ablation": lambda v: AblationSwitches(
                **_take(
                    _expect(dict, "ablation")(v),
                    "ablation",
                    {
                        "aggregate_head": _expect(bool, "ablation.aggregate_head"),
                        "aggregate_body": _expect(bool, "ablation.aggregate_body"),
                        "use_receiver": _expect(bool, "ablation.use_receiver"),
                        "use_transmitter": _expect(bool, "ablation.use_transmitter"),
                    },
                )
            ),
            "aggregation": _expect(str, "aggregation"),
            "kl_variant": _expect(str, "kl_variant"),
            "checkpoint_every": _expect(int, "checkpoint_every"),
            "record_timing": _expect(bool, "record_timing"),
        },
    )
    try:
        return ExperimentConfig(**top)
    except TypeError as exc:  # pragma: no cover - defensive
        raise ConfigError(str(exc)) from exc


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def messenger_spec_for(config: ExperimentConfig, input_shape: tuple[int, int, int]):
    if config.task == "classification":
        if len(config.messenger.widths) != 3:
            raise ConfigError("classification messenger needs exactly 3 body widths")
        return classification_messenger(
            config.dataset.num_classes,
            input_shape,
            widths=tuple(config.messenger.widths),
            hidden=config.messenger.hidden,
            conv_stride=config.messenger.conv_stride,
        )
    if len(config.messenger.widths) != 4:
        raise ConfigError("segmentation messenger needs exactly 4 body widths")
    if len(config.messenger.head_widths) != 3:
        raise ConfigError("segmentation messenger needs exactly 3 head widths")
    return segmentation_messenger(
        config.dataset.num_classes,
        input_shape,
        widths=tuple(config.messenger.widths),
        head_widths=tuple(config.messenger.head_widths),
    )


def client_input_shapes(config: ExperimentConfig) -> list[tuple[int, int, int]]:
    size = config.dataset.image_size
    if config.partitioner.kind == "resolution":
        return [(1, size // f, size // f) for f in config.partitioner.factors]
    return [(1, size, size)] * len(config.clients)


def validate(config: ExperimentConfig) -> dict:
    """Full pre-flight: value ranges, shape audits, lightness, partitioning.

    Returns a report dict (parameter counts etc.) for display.
    """
    if config.task not in _TASKS:
        raise ConfigError(f"task must be one of {_TASKS}, got {config.task!r}")
    if config.method not in _METHODS:
        raise ConfigError(f"method must be one of {_METHODS}, got {config.method!r}")
    if config.aggregation not in _AGGREGATIONS:
        raise ConfigError(f"aggregation must be one of {_AGGREGATIONS}, got {config.aggregation!r}")
    if config.kl_variant not in _KL_VARIANTS:
        raise ConfigError(f"kl_variant must be one of {_KL_VARIANTS}, got {config.kl_variant!r}")
    if not config.clients:
        raise ConfigError("at least one client is required")
    if config.checkpoint_every < 1:
        raise ConfigError("checkpoint_every must be >= 1")
    if config.rounds.batch_size < 2:
        raise ConfigError("batch_size must be >= 2 (train-mode batch statistics)")
    ds = config.dataset
    if ds.num_samples < 1 or ds.num_classes < 2 or ds.image_size < 4:
        raise ConfigError("dataset: num_samples >= 1, num_classes >= 2, image_size >= 4 required")
    part = config.partitioner
    if part.kind not in ("dirichlet", "resolution"):
        raise ConfigError(f"partitioner.kind must be dirichlet or resolution, got {part.kind!r}")
    if part.kind == "dirichlet":
        if part.alpha <= 0:
            raise ConfigError("partitioner.alpha must be positive")
        if part.min_per_split < 1:
            raise ConfigError("partitioner.min_per_split must be >= 1")
        need = len(config.clients) * part.min_per_split * 5  # loose feasibility bound for the 8:2 split
        if ds.num_samples < need:
            raise ConfigError(f"dataset too small: {ds.num_samples} samples for {len(config.clients)} clients")
    else:
        if config.task != "classification":
            raise ConfigError("resolution partitioning applies to classification only")
        if len(part.factors) != len(config.clients):
            raise ConfigError(f"{len(part.factors)} factors for {len(config.clients)} clients")
        for f in part.factors:
            if f < 1 or (f & (f - 1)):
                raise ConfigError(f"factors must be powers of two, got {f}")
            if ds.image_size % f:
                raise ConfigError(f"image_size {ds.image_size} not divisible by factor {f}")
    valid_archs = CLASSIFICATION_ARCHS if config.task == "classification" else SEGMENTATION_ARCHS
    for arch in config.clients:
        if arch not in valid_archs:
            raise ConfigError(f"architecture {arch!r} is not a {config.task} family (choices: {sorted(valid_archs)})")
    if config.method == "fedavg" and len(set(config.clients)) != 1:
        raise ConfigError("fedavg requires architecturally identical clients")

    # Build everything once: any shape violation surfaces here.
    shapes = client_input_shapes(config)
    local_counts = {}
    local_grids = {}
    try:
        for cid, (arch, ishape) in enumerate(zip(config.clients, shapes)):
            model = build_model(build_client_spec(arch, ds.num_classes, ishape), seed=0)
            local_counts[cid] = model.param_count()
            local_grids[cid] = model.grid
        mes_counts = []
        mes_grid = None
        for ishape in sorted(set(shapes)):
            mes = build_model(messenger_spec_for(config, ishape), seed=0, prefix="mes.")
            mes_counts.append(mes.param_count())
            mes_grid = mes.grid
    except (ShapeError, DataError) as exc:
        raise ConfigError(str(exc)) from exc
    messenger_count = max(mes_counts)
    report = {
        "local_param_counts": local_counts,
        "messenger_param_count": messenger_count,
        "input_shapes": shapes,
    }
    if config.method == "mhpflid":
        smallest = min(local_counts.values())
        if messenger_count >= MESSENGER_BUDGET * smallest:
            raise ConfigError(
                f"messenger has {messenger_count} parameters, not under {MESSENGER_BUDGET} x smallest local ({smallest})"
            )
        if config.task == "segmentation":
            for cid, grid in local_grids.items():
                if grid != mes_grid:
                    raise ConfigError(
                        f"client {cid} body grid {grid} != messenger grid {mes_grid}; "
                        "dense-task bodies must meet the messenger at the same grid"
                    )
    return report


def resolved_dict(config: ExperimentConfig) -> dict:
    """JSON-serializable echo of the fully resolved configuration."""
    d = asdict(config)
    d["clients"] = list(config.clients)
    d["messenger"]["widths"] = list(config.messenger.widths)
    d["messenger"]["head_widths"] = list(config.messenger.head_widths)
    d["partitioner"]["factors"] = list(config.partitioner.factors)
    return d
