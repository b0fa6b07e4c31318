"""YAML experiment configuration with line-numbered validation errors.

A config file has up to two sections::

    simulate:            # optional; builds a synthetic dataset
      kind: mdh          # mdh | ptycho | tomography
      n: 256             # any field of the matching *SimSpec
    reconstruct:
      model: mdh
      loss: lsq
      epochs: 100
      object_optimizer: {name: adam, step_size: 0.01}
      params:
        distances: {optimizer: adam, step_size: 1.0e-3}
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .models import LOSSES, MODELS
from .runtime.engine import MODES


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = ""
        if source is not None or line is not None:
            where = f"{source or '<config>'}:{line if line is not None else '?'}: "
        super().__init__(where + message)
        self.line = line


# --- loading with line tracking ----------------------------------------------------------


def _to_python(node, path: tuple, lines: dict):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = yaml.safe_load(yaml.serialize(k))
            lines[path + (key,)] = k.start_mark.line + 1
            out[key] = _to_python(v, path + (key,), lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_python(v, path + (i,), lines) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


def load_yaml(text: str, source: str | None = None):
    """Parse YAML into plain Python plus a map from key path to 1-based line number."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as e:
        line = e.problem_mark.line + 1 if e.problem_mark else None
        raise ConfigError(f"invalid YAML: {e.problem}", line, source) from None
    lines: dict = {}
    if node is None:
        return {}, lines
    return _to_python(node, (), lines), lines


# --- schema ---------------------------------------------------------------------------------


@dataclass
class ReconConfig:
    model: str = "mdh"
    loss: str = "lsq"
    representation: str = "delta_beta"
    pure_projection: bool | None = None
    slice_thickness: float | None = None
    free_distance: float = 0.0
    epochs: int = 10
    batch_size: int = 1
    mode: str = "serial"
    ranks: int = 1
    object_optimizer: dict = field(default_factory=lambda: {"name": "adam", "step_size": 1e-3})
    regularizers: list = field(default_factory=list)
    support: dict | None = None
    nonnegative: bool = False
    params: dict = field(default_factory=dict)
    storage_dtype: str = "float64"
    checkpoint_dir: str | None = None
    resume: bool = False
    shuffle_seed: int | None = None


@dataclass
class ExperimentConfig:
    simulate: dict | None = None
    reconstruct: ReconConfig = field(default_factory=ReconConfig)
    source: str | None = None


SIM_KINDS = ("mdh", "ptycho", "tomography")


def _check_keys(d: dict, allowed, path: tuple, lines: dict, source, what: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be a mapping", lines.get(path), source)
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown {what} key {k!r}; expected one of {sorted(allowed)}",
                              lines.get(path + (k,)), source)


def parse_config(text: str, source: str | None = None) -> ExperimentConfig:
    data, lines = load_yaml(text, source)
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", 1, source)
    _check_keys(data, ("simulate", "reconstruct"), (), lines, source, "top-level")
    sim = data.get("simulate")
    if sim is not None:
        _check_sim(sim, lines, source)
    rc = data.get("reconstruct", {}) or {}
    names = {f.name for f in dataclasses.fields(ReconConfig)}
    _check_keys(rc, names, ("reconstruct",), lines, source, "reconstruct")
    recon = ReconConfig(**rc)

    def err(key, msg):
        return ConfigError(msg, lines.get(("reconstruct", key), lines.get(("reconstruct",))), source)

    if recon.model not in MODELS:
        raise err("model", f"unknown model {recon.model!r}; expected one of {sorted(MODELS)}")
    if recon.loss not in LOSSES:
        raise err("loss", f"unknown loss {recon.loss!r}; expected one of {LOSSES}")
    if recon.mode not in MODES:
        raise err("mode", f"unknown mode {recon.mode!r}; expected one of {MODES}")
    for key in ("epochs", "batch_size", "ranks"):
        v = getattr(recon, key)
        if not isinstance(v, int) or v < (0 if key == "epochs" else 1):
            raise err(key, f"{key} must be a {'non-negative' if key == 'epochs' else 'positive'} integer")
    opt = recon.object_optimizer
    if not isinstance(opt, dict) or "name" not in opt or "step_size" not in opt:
        raise err("object_optimizer", "object_optimizer needs 'name' and 'step_size'")
    if not isinstance(recon.params, dict):
        raise err("params", "params must be a mapping of parameter name to refinement settings")
    for name, p in recon.params.items():
        if not isinstance(p, dict):
            raise ConfigError(f"settings for parameter {name!r} must be a mapping",
                              lines.get(("reconstruct", "params", name)), source)
        if p.get("refine", True) and "step_size" not in p:
            raise ConfigError(f"parameter {name!r} needs a step_size",
                              lines.get(("reconstruct", "params", name)), source)
    for i, r in enumerate(recon.regularizers):
        if not isinstance(r, dict) or "type" not in r:
            raise ConfigError("each regularizer needs a 'type'", lines.get(("reconstruct", "regularizers", i)),
                              source)
    return ExperimentConfig(sim, recon, source)


def _check_sim(sim, lines, source):
    from . import sim as simmod

    if not isinstance(sim, dict) or "kind" not in sim:
        raise ConfigError("simulate needs a 'kind'", lines.get(("simulate",)), source)
    if sim["kind"] not in SIM_KINDS:
        raise ConfigError(f"unknown simulation kind {sim['kind']!r}; expected one of {SIM_KINDS}",
                          lines.get(("simulate", "kind")), source)
    cls = sim_spec_class(sim["kind"], simmod)
    allowed = {f.name for f in dataclasses.fields(cls)} | {"kind"}
    _check_keys(sim, allowed, ("simulate",), lines, source, f"simulate ({sim['kind']})")


def sim_spec_class(kind: str, simmod=None):
    if simmod is None:
        from . import sim as simmod
    return {"mdh": simmod.MDHSimSpec, "ptycho": simmod.PtychoSimSpec, "tomography": simmod.TomoSimSpec}[kind]


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path))
