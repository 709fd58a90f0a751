"""Experiment configuration: dataclass sections, a strict flat
``section.key = value`` file format, scenario presets, and snapshot
serialization that round-trips bit-exactly.

Unknown sections, unknown keys, duplicate keys and malformed values are
all rejected. The key "lambda" maps to the python field "lambda_".
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

SCENARIOS = ("extended-data", "extended-class", "improved-arch", "improved-loss")


@dataclass
class DataSection:
    num_classes: int = 64
    samples_per_class: int = 80
    input_dim: int = 32
    noise_sigma: float = 0.16
    seed: int = 17


@dataclass
class EvalSection:
    num_queries: int = 200
    gallery_per_class: int = 30
    noise_sigma: float = 0.16
    seed: int = 91
    k: int = 20


@dataclass
class ModelSection:
    embedding_dim: int = 8
    num_hidden: int = 2
    old_hidden_width: int = 48
    new_hidden_width: int = 48


@dataclass
class PsiSection:
    hidden_dim: int = 64
    depth: int = 3


@dataclass
class LossSection:
    lambda_: float = 2.0
    comp_kind: str = "regression"
    tau: float = 0.1
    s: float = 7.0
    m: float = 0.3
    old_m: float = 0.3


@dataclass
class TrainSection:
    epochs: int = 30
    warmup_epochs: int = 1
    batch_size: int = 64
    base_lr: float = 0.03
    psi_base_lr: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass
class RunSection:
    scenario: str = "extended-data"
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    split_mode: str = "data"
    old_fraction: float = 0.25
    new_fraction: float = 1.0


@dataclass
class SweepSection:
    lambdas: list[float] = field(default_factory=lambda: [0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 30.0])
    dims: list[int] = field(default_factory=lambda: [8, 16, 64, 128, 256])
    psi_dims: list[int] = field(default_factory=lambda: [8, 256])


@dataclass
class SequentialSection:
    fractions: list[float] = field(default_factory=lambda: [0.25, 0.5, 1.0])
    split_mode: str = "data"
    lambda_: float = 3.0
    momentum_m: float = 0.5
    variants: list[str] = field(default_factory=lambda: ["bct", "bict", "bict-mom"])


@dataclass
class RefreshSection:
    fractions: list[float] = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    order_seeds: list[int] = field(default_factory=lambda: [1, 2, 3])


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    model: ModelSection = field(default_factory=ModelSection)
    psi: PsiSection = field(default_factory=PsiSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    run: RunSection = field(default_factory=RunSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    sequential: SequentialSection = field(default_factory=SequentialSection)
    refresh: RefreshSection = field(default_factory=RefreshSection)

    def validate(self) -> None:
        if self.run.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.run.scenario!r}, expected one of {SCENARIOS}")
        if any(lam < 0 for lam in self.sweep.lambdas):
            raise ValueError("sweep lambdas must be nonnegative")
        if any(d < 1 for d in self.sweep.dims):
            raise ValueError("sweep dims must be >= 1")
        if self.loss.lambda_ < 0 or self.sequential.lambda_ < 0:
            raise ValueError("lambda must be nonnegative")
        unknown = set(self.sequential.variants) - {"bct", "bict", "bict-mom"}
        if unknown:
            raise ValueError(f"unknown sequential variants {sorted(unknown)}")


_KEY_ALIASES = {"lambda": "lambda_"}


def _field_key(name: str) -> str:
    return name[:-1] if name.endswith("_") else name


def _parse_value(raw: str, ftype, where: str):
    raw = raw.strip()
    if ftype is int:
        return int(raw)
    if ftype is float:
        return float(raw)
    if ftype is str:
        return raw
    if ftype is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{where}: expected a boolean, got {raw!r}")
    origin = getattr(ftype, "__origin__", None)
    if origin is list:
        inner = ftype.__args__[0]
        if raw == "":
            return []
        return [_parse_value(part, inner, where) for part in raw.split(",")]
    raise ValueError(f"{where}: unsupported field type {ftype}")


def parse_config(text: str) -> tuple[ExperimentConfig, set[str]]:
    """Parse a flat key-value config; returns (config, explicitly set keys)."""
    cfg = ExperimentConfig()
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'section.key = value', got {stripped!r}")
        key_part, _, value_part = stripped.partition("=")
        key = key_part.strip()
        if key.count(".") != 1:
            raise ValueError(f"line {lineno}: key {key!r} must look like section.key")
        section_name, field_key = key.split(".")
        if section_name not in sections:
            raise ValueError(f"line {lineno}: unknown section {section_name!r}")
        section = sections[section_name]
        field_name = _KEY_ALIASES.get(field_key, field_key)
        section_fields = {f.name: f for f in fields(section)}
        if field_name not in section_fields:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        ftype = _resolve_type(section, field_name)
        setattr(section, field_name,
                _parse_value(value_part, ftype, f"line {lineno} ({key})"))
    return cfg, seen


def _resolve_type(section, field_name: str):
    import typing
    hints = typing.get_type_hints(type(section))
    return hints[field_name]


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def snapshot(cfg: ExperimentConfig) -> str:
    """Fully resolved config as parseable text; parse(snapshot(c)) == c."""
    lines = ["# resolved configuration snapshot"]
    for f in fields(cfg):
        section = getattr(cfg, f.name)
        for sf in fields(section):
            key = f"{f.name}.{_field_key(sf.name)}"
            lines.append(f"{key} = {_format_value(getattr(section, sf.name))}")
    return "\n".join(lines) + "\n"


_PRESETS: dict[str, dict[str, object]] = {
    "extended-data": {},
    "extended-class": {"run.split_mode": "class"},
    "improved-arch": {"run.old_fraction": 1.0, "run.new_fraction": 1.0,
                      "model.old_hidden_width": 64, "model.new_hidden_width": 256},
    "improved-loss": {"run.old_fraction": 1.0, "run.new_fraction": 1.0,
                      "loss.old_m": 0.0},
}


def apply_scenario_preset(cfg: ExperimentConfig, explicit: set[str]) -> None:
    """Fill scenario-implied values for keys the user did not set."""
    for key, value in _PRESETS.get(cfg.run.scenario, {}).items():
        if key in explicit:
            continue
        section_name, field_key = key.split(".")
        setattr(getattr(cfg, section_name), _KEY_ALIASES.get(field_key, field_key), value)


def load_config(path_or_text: str | None = None, *, is_text: bool = False,
                overrides: dict[str, object] | None = None) -> ExperimentConfig:
    """Defaults, then config file, then scenario preset, then overrides."""
    if path_or_text is None:
        cfg, explicit = ExperimentConfig(), set()
    elif is_text:
        cfg, explicit = parse_config(path_or_text)
    else:
        with open(path_or_text) as f:
            cfg, explicit = parse_config(f.read())
    apply_scenario_preset(cfg, explicit)
    for key, value in (overrides or {}).items():
        section_name, field_key = key.split(".")
        setattr(getattr(cfg, section_name), _KEY_ALIASES.get(field_key, field_key), value)
    cfg.validate()
    return cfg
