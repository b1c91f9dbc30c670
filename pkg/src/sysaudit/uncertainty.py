"""Per-feature Gaussian uncertainty envelopes.

Each named feature carries a fractional width ``f``; the absolute width of a
value ``x`` is ``f * max(|x|, floor)`` (or ``f * |x|`` with the floor
disabled).  Perturbations are confined to ``|delta| <= n_sigma * sigma``.
Masked features, and padding rows of track sets, have ``sigma = 0`` and are
never moved.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .bench import EVENT, ETMISS, QUARK_GLUON, EVENT_FEATURES
from .errors import ConfigurationError, ShapeError


@dataclass(frozen=True)
class UncertaintyModel:
    widths: Mapping[str, float]
    n_sigma: float = 3.0
    masked: tuple[str, ...] = ()
    floor: float | None = 1.0
    limits: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "widths", dict(self.widths))
        object.__setattr__(self, "masked", tuple(self.masked))
        object.__setattr__(self, "limits", {k: (float(a), float(b)) for k, (a, b) in dict(self.limits).items()})
        if self.n_sigma < 0:
            raise ConfigurationError("n_sigma must be non-negative")
        if any(f < 0 for f in self.widths.values()):
            raise ConfigurationError("fractional widths must be non-negative")
        if self.floor is not None and self.floor < 0:
            raise ConfigurationError("floor must be non-negative")

    def with_n_sigma(self, n_sigma: float) -> "UncertaintyModel":
        return replace(self, n_sigma=n_sigma)

    def fractions(self, names: Sequence[str]) -> np.ndarray:
        """Fractional width per column of ``names`` (0 for masked columns)."""
        out = np.zeros(len(names))
        for i, name in enumerate(names):
            if name in self.masked:
                continue
            if name not in self.widths:
                raise ConfigurationError(f"no uncertainty declared for feature {name!r}")
            out[i] = self.widths[name]
        return out

    def perturbed(self, names: Sequence[str]) -> np.ndarray:
        return self.fractions(names) > 0

    def bounds(self, names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([self.limits.get(n, (-np.inf, np.inf))[0] for n in names])
        hi = np.array([self.limits.get(n, (-np.inf, np.inf))[1] for n in names])
        return lo, hi

    def to_dict(self) -> dict:
        return {"widths": dict(sorted(self.widths.items())), "n_sigma": self.n_sigma,
                "masked": list(self.masked), "floor": self.floor,
                "limits": {k: list(v) for k, v in sorted(self.limits.items())}}


def _row_mask(x: np.ndarray, row_mask) -> np.ndarray:
    if row_mask is None:
        return np.ones(x.shape[:-1], dtype=bool)
    row_mask = np.asarray(row_mask) > 0
    if row_mask.shape != x.shape[:-1]:
        raise ShapeError(f"row mask {row_mask.shape} does not match data {x.shape}")
    return row_mask


def sigma(x, model: UncertaintyModel, names: Sequence[str], row_mask=None) -> np.ndarray:
    """Absolute widths with the same shape as ``x`` (last axis = features)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != len(names):
        raise ShapeError(f"data has {x.shape[-1]} features, names list {len(names)}")
    f = model.fractions(names)
    scale = np.abs(x) if model.floor is None else np.maximum(np.abs(x), model.floor)
    s = f * scale
    return np.where(_row_mask(x, row_mask)[..., None], s, 0.0)


def project(x_adv, x_nominal, model: UncertaintyModel, names: Sequence[str], row_mask=None,
            sig: np.ndarray | None = None) -> np.ndarray:
    """Clamp ``x_adv`` into the n_sigma box around ``x_nominal``.

    Optional global limits are intersected with the box; masked entries are
    restored to the nominal value exactly.
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x0 = np.asarray(x_nominal, dtype=np.float64)
    if x_adv.shape != x0.shape:
        raise ShapeError(f"adversarial {x_adv.shape} and nominal {x0.shape} differ")
    s = sigma(x0, model, names, row_mask) if sig is None else sig
    half = model.n_sigma * s
    lo, hi = x0 - half, x0 + half
    if model.limits:
        glo, ghi = model.bounds(names)
        lo2, hi2 = np.maximum(lo, glo), np.minimum(hi, ghi)
        ok = lo2 <= hi2
        lo, hi = np.where(ok, lo2, lo), np.where(ok, hi2, hi)
    out = np.minimum(np.maximum(x_adv, lo), hi)
    return np.where(s > 0, out, x0)


@dataclass
class Deviation:
    """Perturbations ``delta`` and standardized deviations ``z``.

    ``valid`` marks the entries that may be perturbed (sigma > 0).
    """

    delta: np.ndarray
    z: np.ndarray
    valid: np.ndarray


def standardize(x_adv, x_nominal, model: UncertaintyModel, names: Sequence[str], row_mask=None) -> Deviation:
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x0 = np.asarray(x_nominal, dtype=np.float64)
    if x_adv.shape != x0.shape:
        raise ShapeError(f"adversarial {x_adv.shape} and nominal {x0.shape} differ")
    s = sigma(x0, model, names, row_mask)
    valid = s > 0
    delta = np.where(valid, x_adv - x0, 0.0)
    z = np.divide(delta, s, out=np.zeros_like(delta), where=valid)
    return Deviation(delta, z, valid)


def inverse_sigma(s: np.ndarray) -> np.ndarray:
    return np.divide(1.0, s, out=np.zeros_like(s), where=s > 0)


def default_uncertainty(task: str, n_sigma: float = 3.0) -> UncertaintyModel:
    """Default fractional widths per benchmark task."""
    if task == EVENT:
        widths = {}
        for name in EVENT_FEATURES:
            if name.endswith("_pt") or name in ("met", "ht"):
                widths[name] = 0.02
            elif name.endswith("_eta") or name.endswith("_phi"):
                widths[name] = 0.001
        # impact-parameter widths are declared for completeness; the event table has none
        widths.update({"d0": 0.005, "z0": 0.005})
        limits = {n: (-np.pi, np.pi) for n in EVENT_FEATURES if n.endswith("_phi")}
        limits.update({n: (0.0, np.inf) for n in EVENT_FEATURES if n.endswith("_pt") or n in ("met", "ht")})
        return UncertaintyModel(widths, n_sigma, masked=("n_jets",), limits=limits)
    if task == QUARK_GLUON:
        widths = {"pt": 0.02, "eta": 0.001, "phi": 0.001, "d0": 0.005, "z0": 0.005}
        return UncertaintyModel(widths, n_sigma, masked=("charge",),
                                limits={"phi": (-np.pi, np.pi), "pt": (0.0, np.inf)})
    if task == ETMISS:
        widths = {"px": 0.04, "py": 0.001, "pz": 0.04, "d0": 0.002}
        return UncertaintyModel(widths, n_sigma)
    raise ConfigurationError(f"unknown task {task!r}")
