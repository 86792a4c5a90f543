"""Run configuration: a flat, diff-friendly key-value format with sections.

Grammar (documented in the README): ``[section]`` headers, ``key = value``
lines, ``#`` comments; repeating a key inside a section appends to a list,
which is how tables (phantom shapes, sources) are written."""

import math
from dataclasses import dataclass, field, fields, replace

from .errors import ValidationError

DEFAULT_EPSILON = 1.0 / (8.0 * math.pi)


@dataclass
class ReconstructionConfig:
    """All scalars of a reconstruction run plus phantom/source descriptors."""

    # problem
    alpha: float = 1e-4
    epsilon: float = DEFAULT_EPSILON
    tau_rule: float = 0.01          # step = tau_rule / epsilon
    tau_override: float = 0.0       # explicit step, wins over tau_rule if > 0
    tau_max_factor: float = 1.0     # cap for step growth, relative to nominal
    contrast: float = 0.1
    tol_pop: float = 1e-4
    h_target: float = 0.04
    d0: float = 0.1
    # phantom / data
    shapes: list = field(default_factory=lambda: ["disc 0.25 0.25 0.3"])
    sources: list = field(default_factory=lambda: ["x", "y"])
    delta: float = 0.0
    truth_refine: int = 4
    # flow driver
    max_iter: int = 6000
    adapt: bool = False
    n_adapt: int = 50
    h_adapt_min: float = 0.0        # 0 -> epsilon / 6
    h_adapt_coarse: float = 0.0     # 0 -> 1.5 * h_target
    forward_tol: float = 1e-10
    solver_tol: float = 1e-11
    # sharp-interface comparator
    shape_alpha: float = 1e-3
    max_step: float = 10.0
    tol_shape: float = 1e-6
    init_radius: float = 0.02
    max_shape_iter: int = 400
    curvature_weighted: bool = True
    # run
    seed: int = 0
    snapshot_every: int = 0

    @property
    def tau(self):
        return self.tau_override if self.tau_override > 0 else self.tau_rule / self.epsilon

    @property
    def tau_max(self):
        return self.tau * self.tau_max_factor

    def __post_init__(self):
        self.h_adapt_min = self.h_adapt_min or self.epsilon / 6.0
        self.h_adapt_coarse = self.h_adapt_coarse or 1.5 * self.h_target
        self.validate()

    def validate(self):
        positive = {"alpha": self.alpha, "epsilon": self.epsilon,
                    "tau": self.tau, "tol_pop": self.tol_pop,
                    "tol_shape": self.tol_shape, "d0": self.d0}
        for name, v in positive.items():
            if not v > 0:
                raise ValidationError(f"{name} must be positive, got {v}")
        if not 0.0 < self.contrast < 1.0:
            raise ValidationError(f"contrast must lie in (0,1), got {self.contrast}")
        if not 0.0 < self.h_target < 2.0:
            raise ValidationError(f"h_target must lie in (0,2), got {self.h_target}")
        if self.delta < 0:
            raise ValidationError("noise level must be nonnegative")
        if not self.sources:
            raise ValidationError("at least one source term is required")

    def with_updates(self, **kw):
        return replace(self, **kw)


_SECTIONS = {
    "problem": ["alpha", "epsilon", "tau_rule", "tau_override", "tau_max_factor",
                "contrast", "tol_pop", "h_target", "d0"],
    "phantom": ["shapes"],
    "sources": ["sources"],
    "data": ["delta", "truth_refine"],
    "pop": ["max_iter", "adapt", "n_adapt", "h_adapt_min", "h_adapt_coarse",
            "forward_tol", "solver_tol"],
    "shape": ["shape_alpha", "max_step", "tol_shape", "init_radius",
              "max_shape_iter", "curvature_weighted"],
    "run": ["seed", "snapshot_every"],
}
_LIST_KEYS = {"shapes": "shape", "sources": "source"}


def parse_config_text(text):
    """Parse the sectioned key-value grammar into {section: {key: [values]}}."""
    out = {}
    section = None
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ValidationError(f"config line {ln}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ValidationError(f"config line {ln}: key outside any [section]")
        key, value = (s.strip() for s in line.split("=", 1))
        out[section].setdefault(key, []).append(value)
    return out


def _coerce(kind, raw):
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"expected a boolean, got {raw!r}")
    return kind(raw)


def config_from_text(text) -> ReconstructionConfig:
    raw = parse_config_text(text)
    known = {f.name: f.type for f in fields(ReconstructionConfig)}
    kinds = {"alpha": float, "epsilon": float, "tau_rule": float,
             "tau_override": float, "tau_max_factor": float, "contrast": float,
             "tol_pop": float, "h_target": float, "d0": float, "delta": float,
             "truth_refine": int, "max_iter": int, "adapt": bool, "n_adapt": int,
             "h_adapt_min": float, "h_adapt_coarse": float, "forward_tol": float,
             "solver_tol": float, "shape_alpha": float, "max_step": float,
             "tol_shape": float, "init_radius": float, "max_shape_iter": int,
             "curvature_weighted": bool, "seed": int, "snapshot_every": int}
    kw = {}
    for section, entries in raw.items():
        if section not in _SECTIONS:
            raise ValidationError(f"unknown config section [{section}]")
        for key, values in entries.items():
            target = None
            for fname in _SECTIONS[section]:
                if key == fname or _LIST_KEYS.get(fname) == key:
                    target = fname
                    break
            if target is None:
                raise ValidationError(f"unknown key {key!r} in section [{section}]")
            if target in _LIST_KEYS:
                kw[target] = list(values)
            else:
                if len(values) > 1:
                    raise ValidationError(f"key {key!r} given more than once")
                kw[target] = _coerce(kinds[target], values[0])
    unknown = set(kw) - set(known)
    if unknown:
        raise ValidationError(f"unknown config fields: {sorted(unknown)}")
    return ReconstructionConfig(**kw)


def config_from_file(path) -> ReconstructionConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read())


def config_to_text(cfg: ReconstructionConfig) -> str:
    """Serialize to the same grammar (used for the config echo in run dirs)."""
    lines = []
    for section, names in _SECTIONS.items():
        lines.append(f"[{section}]")
        for name in names:
            value = getattr(cfg, name)
            if name in _LIST_KEYS:
                for item in value:
                    lines.append(f"{_LIST_KEYS[name]} = {item}")
            elif isinstance(value, bool):
                lines.append(f"{name} = {'true' if value else 'false'}")
            elif isinstance(value, float):
                lines.append(f"{name} = {value!r}")
            else:
                lines.append(f"{name} = {value}")
        lines.append("")
    return "\n".join(lines)
