"""JSON run configuration: schema, defaults and validation with JSON-path messages."""
import copy
import json
from dataclasses import dataclass

import jsonschema
import numpy as np

from .evolvers import ORDERINGS, TAGS
from .hamiltonian import MODEL_NAMES, ModelParams

MODES = ("evolve", "unravel", "check-positivity", "trotter-convergence", "cnm-table", "ho-oracle")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int2 = {"type": "integer", "minimum": 2}
_cmat = {"type": "array", "minItems": 2, "maxItems": 2,
         "items": {"type": "array", "minItems": 2, "maxItems": 2,
                   "items": {"oneOf": [_num, {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}]}}}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": list(MODES)},
        "model": {"enum": list(MODEL_NAMES)},
        "generator": {"enum": list(TAGS)},
        "seed": {"type": "integer", "minimum": 0},
        "params": {
            "type": "object", "additionalProperties": False,
            "properties": {"m_C": _pos, "m_Q": _pos, "lam": {"type": "number", "minimum": 0}, "s": _pos,
                           "E": _pos, "hbar": _pos, "fock_dim": _int2, "g": _num, "delta": _num},
        },
        "potential": {
            "type": "object", "additionalProperties": False,
            "properties": {"kind": {"enum": ["free", "harmonic", "double_well"]}, "omega": _pos,
                           "a": _num, "b": _num},
        },
        "grid": {
            "type": "object", "additionalProperties": False,
            "properties": {"q_min": _num, "q_max": _num, "n_q": {"type": "integer", "minimum": 8},
                           "p_min": _num, "p_max": _num, "n_p": {"type": "integer", "minimum": 8},
                           "boundary": {"enum": ["periodic", "clamped"]}},
        },
        "initial": {
            "type": "object", "additionalProperties": False,
            "properties": {"kind": {"enum": ["coherent", "gaussian"]}, "q0": _num, "p0": _num,
                           "var_q": _pos, "var_p": _pos,
                           "psi_re": {"type": "array", "items": _num, "minItems": 1},
                           "psi_im": {"type": "array", "items": _num, "minItems": 1}},
        },
        "time": {
            "type": "object", "additionalProperties": False,
            "properties": {"t_final": {"type": "number", "minimum": 0},
                           "dt": {"oneOf": [_pos, {"type": "null"}]},
                           "n_obs": {"type": "integer", "minimum": 1},
                           "snapshot_every": {"oneOf": [{"type": "integer", "minimum": 1}, {"type": "null"}]}},
        },
        "unravel": {
            "type": "object", "additionalProperties": False,
            "properties": {"n_traj": {"type": "integer", "minimum": 1}, "dt": _pos,
                           "n_checkpoints": {"type": "integer", "minimum": 1},
                           "n_write": {"type": "integer", "minimum": 0},
                           "chunk_size": {"type": "integer", "minimum": 1},
                           "lattice_n": {"type": "integer", "minimum": 2},
                           "lattice_range": {"type": "array", "items": _num, "minItems": 4, "maxItems": 4},
                           "purity_factor": _pos},
        },
        "trotter": {
            "type": "object", "additionalProperties": False,
            "properties": {"t": _pos, "divisions": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                                     "minItems": 2},
                           "ordering": {"enum": list(ORDERINGS)},
                           "symbol": {"enum": ["discrete", "spectral"]}},
        },
        "positivity": {
            "type": "object", "additionalProperties": False,
            "properties": {"matrices": {"oneOf": [
                {"enum": ["main", "qcle"]},
                {"type": "object", "additionalProperties": False, "required": ["D0", "D1", "D2"],
                 "properties": {"D0": _cmat, "D1": _cmat, "D2": _cmat}}]},
                "tol": _pos},
        },
        "cnm": {
            "type": "object", "additionalProperties": False,
            "properties": {"N_max": {"type": "integer", "minimum": 0, "maximum": 60}},
        },
        "ho_oracle": {
            "type": "object", "additionalProperties": False,
            "properties": {"E": {"type": "array", "items": _pos, "minItems": 1},
                           "lam": {"type": "array", "items": _pos, "minItems": 1},
                           "m_Q": {"type": "array", "items": _pos, "minItems": 1},
                           "points": {"type": "array", "minItems": 1,
                                      "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}},
                           "tol_L": _pos, "tol_H": _pos, "N_max": {"type": "integer", "minimum": 1}},
        },
        "output": {
            "type": "object", "additionalProperties": False,
            "properties": {"dir": {"type": "string"}, "plots": {"type": "boolean"}},
        },
    },
}

DEFAULTS = {
    "model": "qubit_transverse",
    "generator": "main_cq",
    "seed": 0,
    "params": {"m_C": 1.0, "m_Q": 1.0, "lam": 0.0, "s": 1.0, "E": 1.0, "hbar": 1.0, "fock_dim": 20,
               "g": 1.0, "delta": 0.0},
    "potential": {"kind": "free"},
    "grid": {"q_min": -6.0, "q_max": 6.0, "n_q": 64, "p_min": -6.0, "p_max": 6.0, "n_p": 64,
             "boundary": "periodic"},
    "initial": {"kind": "coherent", "q0": 0.0, "p0": 0.0},
    "time": {"t_final": 1.0, "dt": None, "n_obs": 10, "snapshot_every": None},
    "unravel": {"n_traj": 1000, "dt": 1e-3, "n_checkpoints": 5, "n_write": 0, "chunk_size": 1000,
                "lattice_n": 121, "lattice_range": [-8.0, 8.0, -8.0, 8.0], "purity_factor": 5.0},
    "trotter": {"t": 0.5, "divisions": [64, 128, 256], "ordering": "sym", "symbol": "discrete"},
    "positivity": {"matrices": "main", "tol": 1e-12},
    "cnm": {"N_max": 6},
    "ho_oracle": {"E": [2.0, 4.0, 8.0], "lam": [0.25, 0.5, 1.0], "m_Q": [1.0, 2.0, 4.0],
                  "points": [[0.3, -0.7]], "tol_L": 1e-8, "tol_H": 1e-6, "N_max": 60},
    "output": {"dir": "cqlimit_out", "plots": True},
}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _path(err):
    parts = [str(p) if not isinstance(p, int) else "[%d]" % p for p in err.absolute_path]
    out = ""
    for p in parts:
        out += p if p.startswith("[") or not out else "." + p
    return out or "<root>"


def _message(err):
    path = _path(err)
    v, val = err.validator, err.validator_value
    if v == "exclusiveMinimum":
        return "%s must be > %s" % (path, val)
    if v == "minimum":
        return "%s must be >= %s" % (path, val)
    if v == "maximum":
        return "%s must be <= %s" % (path, val)
    if v == "enum":
        return "%s: %r is not valid; valid values: %s" % (path, err.instance, ", ".join(map(str, val)))
    if v == "type":
        return "%s must be of type %s" % (path, val)
    if v == "required":
        return "%s: %s" % (path, err.message)
    if v == "additionalProperties":
        return "%s: unknown key(s) (%s)" % (path, err.message)
    if v == "oneOf":
        # report the most specific sub-error when there is one
        subs = sorted(err.context, key=lambda e: -len(e.absolute_path))
        if subs and subs[0].validator in ("exclusiveMinimum", "minimum", "enum"):
            return _message(subs[0])
        return "%s has an invalid value %r" % (path, err.instance)
    return "%s: %s" % (path, err.message)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    data: dict

    def __getitem__(self, key):
        return self.data[key]

    @property
    def mode(self):
        return self.data.get("mode")

    def model_params(self):
        return ModelParams(**self.data["params"])

    def to_json(self):
        return json.dumps(self.data, indent=2, sort_keys=True)


def validate(raw):
    """Validated RunConfig with defaults filled in; raises ConfigError listing every problem."""
    if not isinstance(raw, dict):
        raise ConfigError(["<root> must be a JSON object"])
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (_path(e), e.validator))
    msgs = [_message(e) for e in errors]
    if msgs:
        raise ConfigError(msgs)
    data = _merge(DEFAULTS, raw)
    extra = []
    g = data["grid"]
    if g["q_max"] <= g["q_min"]:
        extra.append("grid.q_max must be > grid.q_min")
    if g["p_max"] <= g["p_min"]:
        extra.append("grid.p_max must be > grid.p_min")
    init = data["initial"]
    if len(init.get("psi_im", [])) not in (0, len(init.get("psi_re", []))):
        extra.append("initial.psi_im must have the same length as initial.psi_re")
    lr = data["unravel"]["lattice_range"]
    if lr[1] <= lr[0] or lr[3] <= lr[2]:
        extra.append("unravel.lattice_range must be [q_min, q_max, p_min, p_max] with max > min")
    divs = data["trotter"]["divisions"]
    if any(b <= a for a, b in zip(divs, divs[1:])):
        extra.append("trotter.divisions must be increasing")
    if extra:
        raise ConfigError(extra)
    return RunConfig(data)


def parse_config(path):
    """Read and validate a JSON config file."""
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(["%s: not valid JSON (%s)" % (path, exc)]) from exc
    return validate(raw)


def complex_matrix(rows):
    """2x2 matrix from nested lists whose entries are numbers or [re, im] pairs."""
    return np.array([[complex(*x) if isinstance(x, list) else complex(x) for x in row] for row in rows])
