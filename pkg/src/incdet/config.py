"""Run configuration: one JSON document, schema-checked before any work."""

import dataclasses
import json
import typing

import jsonschema

from .cakd import KdConfig
from .cpr import CprConfig
from .iks import IksConfig

OUT_DIR_ENV = "INCDET_OUT_DIR"

TOGGLES = {"pseudo": "use_pseudo", "cpr": "use_cpr", "iks": "use_iks", "cakd": "use_cakd"}
# StageConfig fields that live elsewhere in the document
_LIFTED = set(TOGGLES.values()) | {"seed", "cpr_cfg", "iks_cfg", "kd_cfg"}

_ENUMS = {"record": ["start", "end"], "reduction": ["sum", "mean"], "iou_loss": ["iou", "giou"]}


class ConfigValidationError(ValueError):
    pass


def _json_type(tp, default):
    if tp is bool or isinstance(default, bool):
        return {"type": "boolean"}
    if tp is int or isinstance(default, int):
        return {"type": "integer"}
    if tp is float or isinstance(default, float):
        return {"type": "number"}
    if tp is str or isinstance(default, str):
        return {"type": "string"}
    if isinstance(default, tuple):
        return {"type": "array", "items": {"type": "integer", "minimum": 1},
                "minItems": len(default), "maxItems": len(default)}
    raise TypeError(f"no schema mapping for {tp!r}")


def _section(cls, skip=()):
    hints = typing.get_type_hints(cls)
    props = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        entry = _json_type(hints.get(f.name), default)
        if f.name in _ENUMS:
            entry["enum"] = _ENUMS[f.name]
        entry["default"] = list(default) if isinstance(default, tuple) else default
        props[f.name] = entry
    return {"type": "object", "properties": props, "additionalProperties": False}


def run_config_schema():
    from .trainer import StageConfig

    return {
        "$schema": "http://json-schema.org/draft-07/schema#",
        "title": "incdet run configuration",
        "type": "object",
        "additionalProperties": False,
        "required": ["name"],
        "properties": {
            "name": {"type": "string", "minLength": 1, "pattern": "^[A-Za-z0-9_.-]+$"},
            "split": {"type": "string", "pattern": r"^\s*\d+\s*([+-]\s*\d+\s*)*$", "default": "4+4"},
            "n_classes": {"type": "integer", "minimum": 2, "default": 8},
            "seed": {"type": "integer", "minimum": 0, "default": 0},
            "out_dir": {"type": "string", "minLength": 1},
            "joint": {"type": "boolean", "default": False,
                      "description": "also train the joint upper bound and report AbsGap/RelGap"},
            "toggles": {
                "type": "object", "additionalProperties": False,
                "properties": {k: {"type": "boolean", "default": False} for k in TOGGLES},
            },
            "training": _section(StageConfig, skip=_LIFTED),
            "cpr": _section(CprConfig),
            "iks": _section(IksConfig),
            "kd": _section(KdConfig),
        },
    }


@dataclasses.dataclass
class RunConfig:
    name: str
    split: str = "4+4"
    n_classes: int = 8
    seed: int = 0
    out_dir: str = None
    joint: bool = False
    toggles: dict = dataclasses.field(default_factory=dict)
    training: dict = dataclasses.field(default_factory=dict)
    cpr: dict = dataclasses.field(default_factory=dict)
    iks: dict = dataclasses.field(default_factory=dict)
    kd: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc):
        validate(doc)
        return cls(**doc)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigValidationError(f"{path}: invalid JSON: {e}") from e
        return cls.from_dict(doc)

    def to_dict(self):
        d = dataclasses.asdict(self)
        return {k: v for k, v in d.items() if v is not None}

    def stage_config(self, seed=None):
        from .trainer import StageConfig

        kw = dict(self.training)
        kw.update({TOGGLES[k]: bool(v) for k, v in self.toggles.items()})
        try:
            return StageConfig(seed=self.seed if seed is None else seed, cpr_cfg=CprConfig(**self.cpr),
                               iks_cfg=IksConfig(**self.iks), kd_cfg=KdConfig(**self.kd), **kw)
        except ValueError as e:
            raise ConfigValidationError(str(e)) from e


def validate(doc):
    """Raise ConfigValidationError naming the first schema violation."""
    validator = jsonschema.Draft7Validator(run_config_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigValidationError(f"{where}: {e.message}")


def resolve_out_dir(cli_value, config_value, default):
    """Explicit flag, then the environment override, then the config, then ``default``."""
    import os

    return cli_value or os.environ.get(OUT_DIR_ENV) or config_value or default
