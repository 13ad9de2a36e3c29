"""Experiment configuration: a versioned YAML schema with line-precise validation errors.

Example::

    schema_version: 1
    seed: 0
    data: {size: [32, 32], n_train: 600, n_test: 100}
    domains: [indoor_A, outdoor_B]          # preset names or full specs
    order: [indoor_A, outdoor_B]
    model: {stage_widths: [8, 16, 32], fused_feature_channels: 16}
    train:
      epochs: 10
      base_lr: 0.003
      lambda: {indoor_A: 1.0}
    stages:                                 # optional per-domain overrides of ``train``
      outdoor_B: {epochs: 12}
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from lifelong_depth.data import TEXTURE_FAMILIES, DomainSpec, domain_presets, preset
from lifelong_depth.depth_net import EncoderConfig
from lifelong_depth.losses import LossWeights
from lifelong_depth.replay import FEATURE_KINDS
from lifelong_depth.trainer import STRATEGIES, TrainConfig

SCHEMA_VERSION = 1

_TOP_KEYS = {"schema_version", "seed", "output_dir", "data", "domains", "order", "model", "train", "stages", "routing"}
_DATA_KEYS = {"size", "n_train", "n_test"}
_MODEL_KEYS = {"stage_widths", "fused_feature_channels", "head_hidden", "head_kernel"}
_TRAIN_KEYS = {"epochs", "base_lr", "lr_halving_period_epochs", "batch_size", "strategy", "grad_clip", "replay_cap",
               "lambda", "ablation"}
_ABLATION_KEYS = {"uncertainty", "replay", "uncertainty_consistency"}
_ROUTING_KEYS = {"feature_kind", "standardize"}
_SPEC_KEYS = {"preset", "domain_id", "depth_range", "texture_family", "outlier_rate", "missing_rate", "lambda_hint",
              "scale_variant"}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str, line: int | None = None, source: str = "<config>"):
        self.field, self.line, self.source = field, line, source
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {field or '<root>'}: {message}")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    domains: dict[str, DomainSpec]
    order: list[str]
    size: tuple[int, int]
    n_train: int
    n_test: int
    encoder: EncoderConfig
    stage_configs: list[TrainConfig]
    feature_kind: str = "fused"
    standardize: bool = False
    output_dir: str | None = None
    raw: dict | None = None  # normalized document, the input to the hash

    @property
    def order_specs(self) -> list[DomainSpec]:
        return [self.domains[d] for d in self.order]

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.raw).encode("utf-8")).hexdigest()


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# line tracking


def _line_map(text: str) -> dict[tuple, int]:
    """1-based line of every mapping key / sequence item, keyed by its path."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return {}
    lines: dict[tuple, int] = {}

    def walk(node, path):
        lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                walk(v, path + (k.value,))
                lines[path + (k.value,)] = k.start_mark.line + 1  # report the key's line, not the value's
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    if root is not None:
        walk(root, ())
    return lines


class _Validator:
    def __init__(self, lines: dict[tuple, int], source: str):
        self.lines, self.source = lines, source

    def fail(self, path: tuple, message: str):
        line = None
        for k in range(len(path), -1, -1):
            if path[:k] in self.lines:
                line = self.lines[path[:k]]
                break
        raise ConfigError(".".join(str(p) for p in path), message, line, self.source)

    def mapping(self, value, path, allowed, required=()):
        if not isinstance(value, dict):
            self.fail(path, f"expected a mapping, got {type(value).__name__}")
        for k in value:
            if k not in allowed:
                self.fail(path + (k,), f"unknown key; allowed keys: {', '.join(sorted(allowed))}")
        for k in required:
            if k not in value:
                self.fail(path, f"missing required key {k!r}")
        return value

    def integer(self, value, path, minimum=None):
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(path, f"expected an integer, got {value!r}")
        if minimum is not None and value < minimum:
            self.fail(path, f"must be >= {minimum}, got {value}")
        return value

    def number(self, value, path, positive=False, minimum=None):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path, f"expected a number, got {value!r}")
        value = float(value)
        if positive and not value > 0:
            self.fail(path, f"must be > 0, got {value}")
        if minimum is not None and value < minimum:
            self.fail(path, f"must be >= {minimum}, got {value}")
        return value

    def boolean(self, value, path):
        if not isinstance(value, bool):
            self.fail(path, f"expected true or false, got {value!r}")
        return value

    def choice(self, value, path, options):
        if value not in options:
            self.fail(path, f"must be one of {', '.join(options)}, got {value!r}")
        return value


# ---------------------------------------------------------------------------
# parsing


def _parse_domain(v: _Validator, item, path) -> DomainSpec:
    valid = ", ".join(s.domain_id for s in domain_presets())
    if isinstance(item, str):
        try:
            return preset(item)
        except KeyError:
            v.fail(path, f"unknown preset {item!r}; valid presets: {valid}")
    v.mapping(item, path, _SPEC_KEYS)
    fields = dict(item)
    if "preset" in fields:
        name = fields.pop("preset")
        try:
            base = preset(name)
        except KeyError:
            v.fail(path + ("preset",), f"unknown preset {name!r}; valid presets: {valid}")
        fields = {**base.to_dict(), **fields}
    for key in ("domain_id", "depth_range", "texture_family"):
        if key not in fields:
            v.fail(path, f"missing required key {key!r} (or give a preset)")
    if not isinstance(fields["domain_id"], str) or not fields["domain_id"]:
        v.fail(path + ("domain_id",), "expected a non-empty string")
    dr = fields["depth_range"]
    if not isinstance(dr, (list, tuple)) or len(dr) != 2:
        v.fail(path + ("depth_range",), "expected [min, max]")
    fields["depth_range"] = tuple(v.number(x, path + ("depth_range", i)) for i, x in enumerate(dr))
    v.choice(fields["texture_family"], path + ("texture_family",), TEXTURE_FAMILIES)
    for key in ("outlier_rate", "missing_rate", "lambda_hint"):
        if key in fields:
            fields[key] = v.number(fields[key], path + (key,))
    if "scale_variant" in fields:
        v.boolean(fields["scale_variant"], path + ("scale_variant",))
    try:
        return DomainSpec(**fields)
    except ValueError as exc:
        v.fail(path, str(exc))


def _parse_train(v: _Validator, doc: dict, path: tuple, base: dict | None = None) -> dict:
    """Validated keyword arguments for :class:`TrainConfig`, layered over ``base``."""
    v.mapping(doc, path, _TRAIN_KEYS)
    out = copy.deepcopy(base) if base else {}
    for key in ("epochs", "lr_halving_period_epochs", "batch_size", "replay_cap"):
        if key in doc:
            out[key] = v.integer(doc[key], path + (key,), minimum=0 if key == "epochs" else 1)
    if "base_lr" in doc:
        out["base_lr"] = v.number(doc["base_lr"], path + ("base_lr",), positive=True)
    if "grad_clip" in doc:
        out["grad_clip"] = v.number(doc["grad_clip"], path + ("grad_clip",), positive=True)
    if "strategy" in doc:
        out["strategy"] = v.choice(str(doc["strategy"]).lower(), path + ("strategy",), STRATEGIES)
    if "lambda" in doc:
        lam = v.mapping(doc["lambda"], path + ("lambda",), set(doc["lambda"] or {}))
        merged = dict(out.get("lambda", {}))
        for k, x in lam.items():
            merged[str(k)] = v.number(x, path + ("lambda", k), minimum=0.0)
        out["lambda"] = merged
    if "ablation" in doc:
        abl = v.mapping(doc["ablation"], path + ("ablation",), _ABLATION_KEYS)
        merged = dict(out.get("ablation", {}))
        for k, x in abl.items():
            merged[k] = v.boolean(x, path + ("ablation", k))
        out["ablation"] = merged
    return out


def _train_config(kw: dict, seed: int) -> TrainConfig:
    kw = dict(kw)
    lam = kw.pop("lambda", {})
    abl = kw.pop("ablation", {})
    weights = LossWeights(lam, enable_uncertainty=abl.get("uncertainty", True),
                          enable_replay=abl.get("replay", True),
                          enable_uncertainty_consistency=abl.get("uncertainty_consistency", True))
    return TrainConfig(weights=weights, seed=seed, **kw)


def parse_config(doc: Any, lines: dict[tuple, int] | None = None, source: str = "<config>") -> ExperimentConfig:
    v = _Validator(lines or {}, source)
    v.mapping(doc, (), _TOP_KEYS, required=("schema_version", "seed", "domains"))
    version = doc["schema_version"]
    if version != SCHEMA_VERSION:
        v.fail(("schema_version",), f"unsupported schema version {version!r}; this build reads {SCHEMA_VERSION}")
    seed = v.integer(doc["seed"], ("seed",), minimum=0)

    domains_doc = doc["domains"]
    if not isinstance(domains_doc, list) or not domains_doc:
        v.fail(("domains",), "expected a non-empty list of presets or domain specs")
    domains: dict[str, DomainSpec] = {}
    for i, item in enumerate(domains_doc):
        spec = _parse_domain(v, item, ("domains", i))
        if spec.domain_id in domains:
            v.fail(("domains", i), f"duplicate domain {spec.domain_id!r}")
        domains[spec.domain_id] = spec

    order = doc.get("order", list(domains))
    if not isinstance(order, list) or not order:
        v.fail(("order",), "expected a non-empty list of domain ids")
    for i, d in enumerate(order):
        if d not in domains:
            v.fail(("order", i), f"{d!r} is not a declared domain; declared: {', '.join(domains)}")
        if order.index(d) != i:
            v.fail(("order", i), f"domain {d!r} appears twice in the order")

    data = v.mapping(doc.get("data", {}), ("data",), _DATA_KEYS)
    size = data.get("size", [64, 64])
    if not isinstance(size, list) or len(size) != 2:
        v.fail(("data", "size"), "expected [height, width]")
    size = tuple(v.integer(s, ("data", "size", i), minimum=1) for i, s in enumerate(size))
    n_train = v.integer(data.get("n_train", 2000), ("data", "n_train"), minimum=1)
    n_test = v.integer(data.get("n_test", 200), ("data", "n_test"), minimum=1)

    model = v.mapping(doc.get("model", {}), ("model",), _MODEL_KEYS)
    enc_kw = {}
    if "stage_widths" in model:
        widths = model["stage_widths"]
        if not isinstance(widths, list):
            v.fail(("model", "stage_widths"), "expected a list of channel counts")
        enc_kw["stage_widths"] = tuple(v.integer(w, ("model", "stage_widths", i), minimum=1)
                                       for i, w in enumerate(widths))
    for key in ("fused_feature_channels", "head_hidden", "head_kernel"):
        if key in model:
            enc_kw[key] = v.integer(model[key], ("model", key), minimum=1)
    try:
        encoder = EncoderConfig(input_size=size, **enc_kw)
    except ValueError as exc:
        v.fail(("model",), str(exc))

    base_train = _parse_train(v, doc.get("train", {}), ("train",))
    stages = v.mapping(doc.get("stages", {}), ("stages",), set(order))
    stage_kw = [_parse_train(v, stages[d], ("stages", d), base_train) if d in stages else base_train for d in order]
    try:
        stage_configs = [_train_config(kw, seed) for kw in stage_kw]
    except Exception as exc:  # TrainConfig / LossWeights invariants
        v.fail(("train",), str(exc))

    routing = v.mapping(doc.get("routing", {}), ("routing",), _ROUTING_KEYS)
    feature_kind = v.choice(routing.get("feature_kind", "fused"), ("routing", "feature_kind"), FEATURE_KINDS)
    standardize = v.boolean(routing.get("standardize", False), ("routing", "standardize"))

    output_dir = doc.get("output_dir")
    if output_dir is not None and not isinstance(output_dir, str):
        v.fail(("output_dir",), "expected a path string")

    raw = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "data": {"size": list(size), "n_train": n_train, "n_test": n_test},
        "domains": [domains[d].to_dict() for d in domains],
        "order": list(order),
        "model": {k: (list(x) if isinstance(x, tuple) else x) for k, x in encoder.to_dict().items()
                  if k in _MODEL_KEYS},
        "train": _kw_doc(base_train),
        "stages": {d: _kw_doc(stage_kw[i]) for i, d in enumerate(order) if d in stages},
        "routing": {"feature_kind": feature_kind, "standardize": standardize},
    }
    return ExperimentConfig(seed, domains, list(order), size, n_train, n_test, encoder, stage_configs,
                            feature_kind, standardize, output_dir, raw)


def _kw_doc(kw: dict) -> dict:
    return {k: (dict(sorted(x.items())) if isinstance(x, dict) else x) for k, x in sorted(kw.items())}


def loads(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("", f"not valid YAML ({getattr(exc, 'problem', exc)})",
                          None if mark is None else mark.line + 1, source) from None
    return parse_config(doc, _line_map(text), source)


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("", f"cannot read config ({exc.strerror})", None, str(path)) from None
    return loads(text, str(path))


def with_overrides(cfg: ExperimentConfig, seed: int | None = None, strategy: str | None = None,
                   no_uncertainty: bool = False, no_replay: bool = False,
                   no_uncertainty_consistency: bool = False) -> ExperimentConfig:
    """Apply command-line overrides; the normalized document is updated so the hash reflects them."""
    raw = copy.deepcopy(cfg.raw)
    changes = {}
    if seed is not None:
        raw["seed"] = seed
    if strategy is not None:
        changes["strategy"] = strategy
    abl = {k: False for k, flag in (("uncertainty", no_uncertainty), ("replay", no_replay),
                                     ("uncertainty_consistency", no_uncertainty_consistency)) if flag}
    for section in [raw["train"], *raw["stages"].values()]:
        section.update(changes)
        if abl:
            section["ablation"] = dict(sorted({**section.get("ablation", {}), **abl}.items()))
    return parse_config(raw, source="<overridden config>")


def default_document() -> dict:
    """The desk experiment: indoor_A then outdoor_B at 32x32."""
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "data": {"size": [32, 32], "n_train": 600, "n_test": 100},
        "domains": ["indoor_A", "outdoor_B", "indoor_C"],
        "order": ["indoor_A", "outdoor_B"],
        "train": {"epochs": 10, "base_lr": 3e-3, "lr_halving_period_epochs": 2,
                  "lambda": {"indoor_A": 1.0, "indoor_C": 1.0, "outdoor_B": 10.0}},
        "routing": {"feature_kind": "fused", "standardize": True},
    }
