"""Experiment configuration with JSON round-tripping and field-level validation."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any

from .backbone import STAGES, StagePlan, stage_partition, validate_plan
from .fusion import METHODS
from .synthdata import REGIMES, BackboneSpec


class ConfigError(ValueError):
    """Validation failure; ``errors`` maps dotted field paths to messages."""

    def __init__(self, errors: dict[str, str]):
        self.errors = errors
        super().__init__("; ".join(f"{k}: {v}" for k, v in errors.items()))


@dataclass
class BackboneConfig:
    depth: int = 8
    width: int = 32
    heads: int = 2
    n_tokens: int = 16
    seed: int = 0

    def spec(self) -> BackboneSpec:
        return BackboneSpec(self.depth, self.width, self.heads, self.n_tokens, self.seed)


@dataclass
class StagePlanConfig:
    early: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    mid: list[int] = field(default_factory=lambda: [5, 6])
    late: list[int] = field(default_factory=lambda: [7, 8])
    adapted: list[str] = field(default_factory=lambda: ["late"])

    def plan(self) -> StagePlan:
        base = StagePlan(frozenset(self.early), frozenset(self.mid), frozenset(self.late), frozenset())
        return base.with_adapted(self.adapted)


@dataclass
class FdmConfig:
    n_uda: int = 1
    n_cda: int = 1
    n_tokens: int = 4
    heads: int = 2


@dataclass
class DataConfig:
    regime: str = "audio-only"
    num_classes: int = 4
    n: int = 3000
    seed: int = 0
    noise: float = 0.5
    amplitude: float = 1.5
    margin: float = 0.15


@dataclass
class OptimConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "cosine"


@dataclass
class MoltConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    stage_plan: StagePlanConfig = field(default_factory=StagePlanConfig)
    fdm: FdmConfig = field(default_factory=FdmConfig)
    fusion: str = "mlp"
    lambda_tor: float = 0.1
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MoltConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError({"<root>": f"invalid JSON: {exc}"}) from None
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "MoltConfig":
        errors: dict[str, str] = {}
        sp = raw.get("stage_plan") if isinstance(raw, dict) else None
        if isinstance(sp, dict) and ("early_count" in sp or "late_count" in sp):
            bb = raw.get("backbone") if isinstance(raw.get("backbone"), dict) else {}
            raw = {**raw, "stage_plan": {"depth": bb.get("depth", BackboneConfig.depth), **sp}}
        cfg = _build(cls, raw, "", errors)
        if not errors:
            errors.update(validate(cfg))
        if errors:
            raise ConfigError(errors)
        return cfg

    def replace(self, **changes) -> "MoltConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"fdm.n_tokens": 8})``."""
        d = self.to_dict()
        for path, value in changes.items():
            node = d
            keys = path.split(".")
            for k in keys[:-1]:
                node = node[k]
            node[keys[-1]] = copy.deepcopy(value)
        return MoltConfig.from_dict(d)

    @property
    def plan(self) -> StagePlan:
        return self.stage_plan.plan()

    @property
    def adapted_layers(self) -> list[int]:
        return sorted(self.plan.adapted)


def _build(cls, raw: Any, path: str, errors: dict[str, str]):
    if not isinstance(raw, dict):
        errors[path or "<root>"] = "expected an object"
        return cls()
    known = {f.name: f for f in fields(cls)}
    stage_aliases = cls is StagePlanConfig and ("early_count" in raw or "late_count" in raw)
    if stage_aliases:
        raw = dict(raw)
        depth = raw.pop("depth", 8)
        try:
            p = stage_partition(depth, raw.pop("early_count", 0), raw.pop("late_count", 0))
            raw.setdefault("early", sorted(p.early))
            raw.setdefault("mid", sorted(p.mid))
            raw.setdefault("late", sorted(p.late))
        except (ValueError, TypeError) as exc:
            errors[path or "stage_plan"] = str(exc)
            return cls()
    for key in raw:
        if key not in known:
            errors[f"{path}.{key}".lstrip(".")] = "unknown field"
    kwargs = {}
    for name, f in known.items():
        if name not in raw:
            continue
        value = raw[name]
        sub = f"{path}.{name}".lstrip(".")
        default = f.default_factory() if callable(f.default_factory) else f.default
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub, errors)
        else:
            kwargs[name] = _coerce(value, default, sub, errors)
    return cls(**kwargs)


def _coerce(value, default, path, errors):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        errors[path] = f"expected {type(default).__name__}, got {type(value).__name__}"
        return default
    return value


def validate(cfg: MoltConfig) -> dict[str, str]:
    e: dict[str, str] = {}
    b = cfg.backbone
    for name in ("depth", "width", "heads", "n_tokens"):
        if getattr(b, name) < 1:
            e[f"backbone.{name}"] = "must be positive"
    if b.heads >= 1 and b.width % b.heads:
        e["backbone.heads"] = f"must divide width {b.width}"

    sp = cfg.stage_plan
    bad_stage = [s for s in sp.adapted if s not in STAGES]
    if bad_stage:
        e["stage_plan.adapted"] = f"unknown stages {bad_stage}; expected a subset of {list(STAGES)}"
    elif not sp.adapted:
        e["stage_plan.adapted"] = "at least one stage must be adapted"
    else:
        try:
            plan = sp.plan()
            validate_plan(plan, b.depth)
            if not plan.adapted:
                e["stage_plan.adapted"] = "adapted stages contain no layers"
        except ValueError as exc:
            msg = str(exc)
            e["stage_plan"] = msg if msg.startswith("stage_plan") else f"stage_plan: {msg}"

    f = cfg.fdm
    for name in ("n_tokens", "heads"):
        if getattr(f, name) < 1:
            e[f"fdm.{name}"] = "must be positive"
    if f.n_uda < 0 or f.n_cda < 0:
        e["fdm"] = "adapter counts must be nonnegative"
    elif f.n_uda + f.n_cda < 1:
        e["fdm"] = "need at least one adapter per layer"
    if f.heads >= 1 and b.width % f.heads:
        e["fdm.heads"] = f"must divide width {b.width}"

    if cfg.fusion not in METHODS:
        e["fusion"] = f"unknown method {cfg.fusion!r}; expected one of {list(METHODS)}"
    if cfg.lambda_tor < 0:
        e["lambda_tor"] = "must be nonnegative"

    d = cfg.data
    if d.regime not in REGIMES:
        e["data.regime"] = f"unknown regime {d.regime!r}; expected one of {list(REGIMES)}"
    if d.num_classes < 2:
        e["data.num_classes"] = "must be at least 2"
    if d.n < max(d.num_classes, 6):
        e["data.n"] = "too few examples"
    if d.regime == "layered-signal" and b.depth < 2:
        e["data.regime"] = "layered-signal needs at least two backbone layers"

    o = cfg.optim
    if o.lr < 0:
        e["optim.lr"] = "must be nonnegative"
    if o.epochs < 0:
        e["optim.epochs"] = "must be nonnegative"
    if o.batch_size < 1:
        e["optim.batch_size"] = "must be positive"
    if not (0 <= o.beta1 < 1 and 0 <= o.beta2 < 1):
        e["optim.beta1"] = "betas must lie in [0, 1)"
    if o.schedule not in ("cosine", "constant"):
        e["optim.schedule"] = "expected 'cosine' or 'constant'"
    return e


def load_config(path) -> MoltConfig:
    with open(path) as fh:
        return MoltConfig.from_json(fh.read())
