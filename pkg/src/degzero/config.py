"""Run configuration: a sectioned key = value file (INI) or the equivalent JSON.

Every key has a type and a default; unknown sections or keys are errors.
Lists are comma separated in INI and arrays in JSON.  Serialization is
canonical (sorted sections and keys), so parse -> serialize -> parse is a
fixed point.
"""

from __future__ import annotations

import configparser
import io
import json
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "SCHEMA"]


class ConfigError(ValueError):
    """Malformed or unknown configuration entries."""


def _floats(v):
    return [float(x) for x in v]


def _ints(v):
    return [int(x) for x in v]


# section -> key -> (kind, default); kind in int, float, str, bool, floats, ints
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "run": {
        "seed": ("int", 0),
        "out": ("str", "results"),
        "format": ("str", "csv"),
        "stages": ("strs", ["analyze", "escape", "quantize", "spectrum"]),
    },
    "symbol": {
        "family": ("str", "default"),
        "alpha": ("float", 0.3),
        "beta": ("float", 0.1),
        "path": ("str", ""),
        "omega": ("float", 0.0),
    },
    "foliation": {
        "grid": ("int", 64),
        "n_seeds": ("int", 200),
        "s_max": ("float", 80.0),
        "capture": ("float", 1e-3),
    },
    "escape": {
        "method": ("str", "both"),
        "basis_size": ("int", 8),
        "min_margin": ("float", 1e-4),
        "refinement": ("int", 4),
        "n_radial_seeds": ("int", 20),
    },
    "quantize": {
        "N": ("int", 32),
        "r0": ("float", 2.0),
    },
    "spectrum": {
        "N_list": ("ints", [16, 32]),
        "margin": ("float", 0.05),
        "residual_tol": ("float", 1e-8),
    },
    "weyl": {
        "alpha": ("float", 0.4),
        "n_list": ("ints", [20, 40, 60]),
        "J": ("floats", [0.6, 0.9]),
        "kappa": ("float", 3.0),
    },
    "waves": {
        "N": ("int", 32),
        "n_times": ("int", 101),
        "gamma": ("float", 0.2),
        "s_dec": ("float", 3.0),
        "k_min": ("float", 2.0),
        "n_members": ("int", 16),
        "edge_frac": ("float", 0.05),
        "edge_ratio": ("float", 0.75),
        "eps_list": ("floats", [0.02, 0.01, 0.005, 0.0025, 0.00125]),
        "s_list": ("floats", [-1.0, -0.6, -0.4, 0.0]),
        "eps_guard": ("float", 5.0),
        "r2_min": ("float", 0.9),
        "lam_w": ("float", 8.0),
        "n_phi": ("int", 32),
        "d_gamma": ("float", 0.1),
        "wavefront_eps": ("float", 0.005),
        "sigma_list": ("floats", [1e-2, 1e-3, 1e-4]),
        "viscous_t_max": ("float", 50.0),
    },
}

_TOLERANCES = [("foliation", "capture"), ("escape", "min_margin"), ("spectrum", "margin"),
               ("spectrum", "residual_tol"), ("waves", "gamma"), ("waves", "eps_guard"), ("waves", "edge_frac"),
               ("waves", "d_gamma"), ("waves", "wavefront_eps"), ("weyl", "kappa")]


def _coerce(section, key, value):
    kind, _ = SCHEMA[section][key]
    try:
        if kind in ("floats", "ints", "strs"):
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            value = list(value)
            return {"floats": _floats, "ints": _ints, "strs": lambda v: [str(x) for x in v]}[kind](value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {value!r} as {kind}") from exc


def _fmt(v) -> str:
    if isinstance(v, list):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig:
    """Validated configuration values, ``cfg[section][key]``."""

    def __init__(self, values: dict | None = None):
        self.values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for s, kv in (values or {}).items():
            if s not in SCHEMA:
                raise ConfigError(f"unknown section [{s}]")
            for k, v in kv.items():
                if k not in SCHEMA[s]:
                    raise ConfigError(f"unknown key '{k}' in section [{s}]")
                self.values[s][k] = _coerce(s, k, v)
        self.validate()

    def __getitem__(self, section):
        return self.values[section]

    def validate(self):
        for s, k in _TOLERANCES:
            if not self.values[s][k] > 0:
                raise ConfigError(f"[{s}] {k} must be positive")
        if self.values["run"]["format"] not in ("csv", "json"):
            raise ConfigError("[run] format must be csv or json")
        if self.values["symbol"]["family"] not in ("default", "unperturbed", "json"):
            raise ConfigError("[symbol] family must be default, unperturbed or json")
        if self.values["escape"]["method"] not in ("lp", "flow", "both"):
            raise ConfigError("[escape] method must be lp, flow or both")
        J = self.values["weyl"]["J"]
        if len(J) != 2 or not J[0] <= J[1]:
            raise ConfigError("[weyl] J must be two increasing numbers")

    def override(self, section, key, value) -> "RunConfig":
        vals = {s: dict(kv) for s, kv in self.values.items()}
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
        vals[section][key] = value
        return RunConfig(vals)

    # ------------------------------------------------------------- parsing
    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"config parse error: {exc}") from exc
        return cls({s: dict(cp[s]) for s in cp.sections()})

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config parse error: {exc}") from exc
        if not isinstance(doc, dict) or not all(isinstance(v, dict) for v in doc.values()):
            raise ConfigError("JSON config must map sections to objects")
        return cls(doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        return cls.from_json(text) if text.lstrip().startswith("{") else cls.from_ini(text)

    def to_ini(self) -> str:
        buf = io.StringIO()
        for s in sorted(self.values):
            buf.write(f"[{s}]\n")
            for k in sorted(self.values[s]):
                buf.write(f"{k} = {_fmt(self.values[s][k])}\n")
            buf.write("\n")
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, indent=1) + "\n"

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values
