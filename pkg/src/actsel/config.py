"""Experiment configuration files (JSON or TOML).

Example (TOML)::

    seed = 0
    out = "runs/demo"

    [data]
    kind = "classification"
    n = 50000
    d = 32
    k = 10
    noise_rate = 0.2
    holdout_fraction = 0.1

    [models.learner]
    layer_widths = [32, 64]

    [loop]
    policy = "learnability"
    steps = 400

    [sampler]
    temperature = 1.0

    [topology]
    n_workers = 4

Two-tower models are written as ``[models.learner.tower]`` (shared shape) or
``[models.learner.image]`` plus ``[models.learner.text]``. Every error names the
offending field with its dotted path.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import data as data_mod
from . import nn
from .loop import LoopConfig, ReferenceSource
from .pipeline import Topology
from .replay import Mode

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


_DATA_KEYS = {
    "classification": {"kind", "n", "d", "k", "noise_rate", "seed", "separation", "centers_seed"},
    "paired": {"kind", "n", "d", "mismatch_rate", "seed", "latent_dim", "view_noise", "mapping_seed"},
}
_SPLIT_KEYS = {"holdout_fraction"}
_MODEL_KEYS = {"layer_widths", "activation", "head", "out_dim"}
_LOOP_KEYS = {f.name for f in dataclasses.fields(LoopConfig)} - {"learner", "proxy", "seed", "task"}
_SAMPLER_KEYS = {"temperature", "mode", "spi_target", "method"}
_TOPOLOGY_KEYS = {"n_workers", "capacity", "sync_interval", "lanes", "synchronous", "max_lead"}
_TOP_KEYS = {"seed", "out", "data", "reference_data", "holdout_data", "models", "loop", "sampler",
             "topology"}


def _check_keys(section: dict, allowed: set, prefix: str):
    if not isinstance(section, dict):
        raise ConfigError(prefix, f"expected a table, got {type(section).__name__}")
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{prefix}.{key}" if prefix else key,
                              f"unknown field (allowed: {', '.join(sorted(allowed))})")


def load_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError("config", f"cannot read {path}: {err.strerror}") from None
    try:
        if path.suffix.lower() == ".toml":
            return tomllib.loads(text)
        return json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as err:
        raise ConfigError("config", f"cannot parse {path}: {err}") from None


def _model_spec(d: dict, prefix: str, contrastive: bool):
    if not isinstance(d, dict):
        raise ConfigError(prefix, "expected a table")
    try:
        if contrastive:
            if "tower" in d:
                _check_keys(d, {"tower"}, prefix)
                tower = _net_spec(d["tower"], f"{prefix}.tower", "encoder")
                return nn.TwoTowerSpec(tower, tower)
            _check_keys(d, {"image", "text"}, prefix)
            if "image" not in d or "text" not in d:
                raise ConfigError(prefix, "two-tower models need 'tower' or both 'image' and 'text'")
            return nn.TwoTowerSpec(_net_spec(d["image"], f"{prefix}.image", "encoder"),
                                   _net_spec(d["text"], f"{prefix}.text", "encoder"))
        return _net_spec(d, prefix, "classifier")
    except nn.ConfigurationError as err:
        raise ConfigError(prefix, str(err)) from None


def _net_spec(d: dict, prefix: str, head: str) -> nn.ModelSpec:
    _check_keys(d, _MODEL_KEYS, prefix)
    if "layer_widths" not in d:
        raise ConfigError(f"{prefix}.layer_widths", "required")
    d = {"head": head, **d}
    try:
        return nn.ModelSpec.from_dict(d)
    except (nn.ConfigurationError, TypeError, ValueError) as err:
        raise ConfigError(prefix, str(err)) from None


@dataclass
class ExperimentConfig:
    data: dict
    loop: LoopConfig
    topology: Topology
    seed: int = 0
    out: str | None = None
    holdout_fraction: float = 0.1
    reference_data: dict | None = None
    holdout_data: dict | None = None
    raw: dict = field(default_factory=dict)

    @property
    def task(self) -> str:
        return self.loop.task

    @classmethod
    def from_dict(cls, raw: dict, seed: int | None = None) -> "ExperimentConfig":
        _check_keys(raw, _TOP_KEYS, "")
        seed = int(raw.get("seed", 0) if seed is None else seed)

        datas = {}
        for name in ("data", "reference_data", "holdout_data"):
            section = raw.get(name)
            if section is None:
                continue
            section = dict(section)
            kind = section.get("kind", "classification")
            if kind not in _DATA_KEYS:
                raise ConfigError(f"{name}.kind", f"unknown dataset kind {kind!r}")
            allowed = _DATA_KEYS[kind] | (_SPLIT_KEYS if name == "data" else set())
            _check_keys(section, allowed, name)
            section.setdefault("kind", kind)
            datas[name] = section
        data = datas.get("data", {"kind": "classification", "n": 50000, "d": 32, "k": 10,
                                  "noise_rate": 0.2})
        holdout_fraction = float(data.pop("holdout_fraction", 0.1))
        if not 0 < holdout_fraction < 1:
            raise ConfigError("data.holdout_fraction", f"must be in (0, 1), got {holdout_fraction}")
        contrastive = data["kind"] == "paired"
        for name, section in datas.items():
            if (section["kind"] == "paired") != contrastive:
                raise ConfigError(f"{name}.kind", "all datasets must be the same kind")

        models = raw.get("models", {})
        _check_keys(models, {"learner", "proxy"}, "models")
        in_dim = int(data.get("d", 32))
        if "learner" in models:
            learner = _model_spec(models["learner"], "models.learner", contrastive)
        else:
            tower = nn.ModelSpec((in_dim, 64), "tanh", "encoder" if contrastive else "classifier",
                                 16 if contrastive else int(data.get("k", 10)))
            learner = nn.TwoTowerSpec(tower, tower) if contrastive else tower
        proxy = _model_spec(models["proxy"], "models.proxy", contrastive) if "proxy" in models else learner
        for name, spec in (("models.learner", learner), ("models.proxy", proxy)):
            nets = (spec.image, spec.text) if contrastive else (spec,)
            for net in nets:
                if net.input_dim != in_dim:
                    raise ConfigError(f"{name}.layer_widths",
                                      f"input width {net.input_dim} does not match data.d = {in_dim}")
            if not contrastive and spec.out_dim != int(data.get("k", 10)):
                raise ConfigError(f"{name}.out_dim",
                                  f"{spec.out_dim} classes but data.k = {data.get('k', 10)}")

        loop_raw = dict(raw.get("loop", {}))
        _check_keys(loop_raw, _LOOP_KEYS, "loop")
        sampler = dict(raw.get("sampler", {}))
        _check_keys(sampler, _SAMPLER_KEYS, "sampler")
        if "temperature" in sampler:
            loop_raw["sampler_temperature"] = sampler["temperature"]
        if "method" in sampler:
            loop_raw["sampling_method"] = sampler["method"]
        try:
            loop = LoopConfig(learner=learner, proxy=proxy, seed=seed,
                              task="contrastive" if contrastive else "classification", **loop_raw)
        except (ValueError, TypeError) as err:
            msg = str(err)
            name, _, rest = msg.partition(": ")
            if name in _LOOP_KEYS:
                raise ConfigError(f"loop.{name}", rest) from None
            raise ConfigError("loop", msg) from None
        if sampler.get("temperature", 1.0) <= 0:
            raise ConfigError("sampler.temperature", "must be > 0")

        topo_raw = dict(raw.get("topology", {}))
        _check_keys(topo_raw, _TOPOLOGY_KEYS, "topology")
        if "mode" in sampler:
            try:
                topo_raw["mode"] = Mode(sampler["mode"]).value
            except ValueError:
                raise ConfigError("sampler.mode", f"unknown mode {sampler['mode']!r}") from None
        if "spi_target" in sampler:
            topo_raw["spi_target"] = sampler["spi_target"]
        try:
            topology = Topology(**topo_raw)
        except (ValueError, TypeError) as err:
            msg = str(err)
            name, _, rest = msg.partition(": ")
            prefix = "sampler" if name == "spi_target" else "topology"
            raise ConfigError(f"{prefix}.{name}" if rest else prefix, rest or msg) from None
        if topology.mode == Mode.PER_SUPERBATCH.value and topology.spi_target is not None:
            expected = loop.sub_batch / loop.super_batch
            if abs(topology.spi_target - expected) > 1e-9:
                raise ConfigError("sampler.spi_target",
                                  f"per_superbatch mode needs spi = b/B = {expected:g}")
        if (topology.mode == Mode.PERSISTENT_BANK.value
                and loop.reference_source == ReferenceSource.ONLINE.value):
            raise ConfigError("sampler.mode", "persistent_bank needs a fixed reference")
        out = raw.get("out")
        return cls(data, loop, topology, seed, out, holdout_fraction,
                   datas.get("reference_data"), datas.get("holdout_data"), raw)

    @classmethod
    def load(cls, path, seed: int | None = None) -> "ExperimentConfig":
        return cls.from_dict(load_file(path), seed)

    # -- construction helpers ------------------------------------------

    def _dataset(self, section: dict, salt: int):
        section = dict(section)
        section.setdefault("seed", self.seed + salt)
        # extra datasets must share the main one's class centers / view mappings
        base_seed = self.data.get("seed", self.seed)
        key = "mapping_seed" if section["kind"] == "paired" else "centers_seed"
        section.setdefault(key, self.data.get(key, base_seed))
        try:
            return data_mod.generate(section)
        except (TypeError, ValueError) as err:
            raise ConfigError("data", str(err)) from None

    def datasets(self):
        """``(train, holdout, reference_train)``; the last is None unless configured."""
        full = self._dataset(self.data, 0)
        if self.holdout_data is not None:
            train, holdout = full, self._dataset(self.holdout_data, 200)
        else:
            train, holdout = data_mod.split_holdout(full, self.holdout_fraction, self.seed)
        ref = self._dataset(self.reference_data, 100) if self.reference_data is not None else None
        return train, holdout, ref
