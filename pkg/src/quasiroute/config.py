"""Flat ``key = value`` run configuration.

Every tunable knob has a default and a one-line description.  Lines starting
with ``#`` are comments.  Unknown keys and unparsable values are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any

from .errors import ConfigError

# key -> (default, description)
KNOBS: dict[str, tuple[Any, str]] = {
    "seed": (0, "master seed for instance sampling, initialization and training"),
    "preset": ("desk", "model preset: desk or paper"),
    "scaler": (1e6, "divisor applied to integer asymmetric costs"),
    "triangle_tol": (1e-9, "tolerance of quasimetric triangle checks"),
    "feas_tol": (1e-9, "slack allowed by capacity, time and length checks"),
    "wdad_eps": (1e-6, "row-norm epsilon of the adaptive decoder"),
    "norm_eps": (1e-5, "instance normalization epsilon"),
    "zeta": (50.0, "logit clipping range"),
    "n_pivots": (0, "pivot count per direction; 0 keeps the preset value"),
    "views": (1, "pivot views decoded at inference"),
    "lookahead": (True, "one-step lookahead at multi-depot depot states"),
    "tie_break": ("lowest_index", "argmax and nearest-neighbor tie rule (lowest node index)"),
    "n": (20, "customers per instance (nodes for the TSP family)"),
    "problems": ("TSP", "comma-separated training problems"),
    "lr": (1e-4, "AdamW learning rate"),
    "weight_decay": (1e-6, "decoupled weight decay"),
    "batch_size": (32, "instances per iteration"),
    "epochs": (1, "training epochs"),
    "iters_per_epoch": (200, "iterations per epoch"),
    "decay_epochs": ("", "comma-separated epochs at which lr is multiplied by decay_factor; "
                         "rescale to the shortened schedule"),
    "decay_factor": (0.1, "learning-rate decay multiplier"),
    "n_starts": (0, "rollouts per instance; 0 uses every feasible distinct start"),
    "grad_clip": (10.0, "global gradient-norm clip; 0 disables"),
    "stochastic_pivots": (True, "draw a random pivot seed per training instance"),
    "tw_width_low": (0.2, "lower time-window width factor"),
    "tw_width_high": (0.6, "upper time-window width factor"),
    "threads": (1, "worker cap; QUASIROUTE_THREADS overrides"),
}

# documented for completeness; the implementation hard-wires these values
FIXED = ("triangle_tol", "feas_tol", "tie_break")


def _coerce(key: str, raw: str):
    default = KNOBS[key][0]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def __getattr__(self, key: str):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def with_overrides(self, **kw) -> "RunConfig":
        merged = dict(self.values)
        for k, v in kw.items():
            if k not in KNOBS:
                raise ConfigError(f"unknown key {k!r}")
            merged[k] = _coerce(k, str(v)) if isinstance(v, str) else v
            if k in FIXED and merged[k] != KNOBS[k][0]:
                raise ConfigError(f"{k} is fixed at {KNOBS[k][0]}")
        return replace(self, values=merged)

    def to_text(self) -> str:
        lines = []
        for k, (_, doc) in KNOBS.items():
            v = self.values[k]
            lines.append(f"# {doc}")
            lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def int_list(self, key: str) -> tuple[int, ...]:
        raw = str(self.values[key]).strip()
        try:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}") from None


def default_config() -> RunConfig:
    return RunConfig({k: v for k, (v, _) in KNOBS.items()})


def parse_config(text: str) -> RunConfig:
    values = dict(default_config().values)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in KNOBS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, val)
        if key in FIXED and values[key] != KNOBS[key][0]:
            raise ConfigError(f"line {lineno}: {key} is fixed at {KNOBS[key][0]}")
    return RunConfig(values)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
