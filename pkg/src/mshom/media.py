"""Periodic two-phase media, sources and exchange-correlation models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError

TENSORS = ("A", "eta", "mu")
_ALIASES = {"a": "A", "A": "A", "eta": "eta", "mu": "mu", "Vc": "Vc", "vc": "Vc"}


def _spd(name: str, value) -> np.ndarray:
    t = np.asarray(value, dtype=float)
    if t.shape == ():
        t = t * np.eye(3)
    elif t.shape == (3,):
        t = np.diag(t)
    if t.shape != (3, 3) or not np.all(np.isfinite(t)):
        raise InvalidArgumentError(f"{name} must be a finite 3x3 tensor")
    if not np.allclose(t, t.T, rtol=0, atol=1e-14 * max(1.0, np.abs(t).max())):
        raise InvalidArgumentError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(t).min() <= 0:
        raise InvalidArgumentError(f"{name} is not positive definite")
    t = t.copy()
    t.setflags(write=False)
    return t


@dataclass(frozen=True)
class PeriodicMedium:
    """Two-phase 1-periodic medium: one axis-aligned box inclusion per unit cell.

    The inclusion occupies the open box ``(lower, upper)`` in cell
    coordinates. A cube of side ``s`` centred in the cell is
    ``lower = 0.5 - s/2``, ``upper = 0.5 + s/2``; a laminate normal to axis
    ``k`` spans the full cell along the other two axes.
    """

    epsilon: float = 0.25
    lower: tuple = (0.25, 0.25, 0.25)
    upper: tuple = (0.75, 0.75, 0.75)
    a_in: np.ndarray = field(default_factory=lambda: np.eye(3))
    a_out: np.ndarray = field(default_factory=lambda: np.eye(3))
    eta_in: np.ndarray = field(default_factory=lambda: np.eye(3))
    eta_out: np.ndarray = field(default_factory=lambda: np.eye(3))
    mu_in: np.ndarray = field(default_factory=lambda: np.eye(3))
    mu_out: np.ndarray = field(default_factory=lambda: np.eye(3))
    vc_in: float = 0.0
    vc_out: float = 0.0
    N: float = 10.0
    unsafe: bool = False

    def __post_init__(self):
        for name in ("a_in", "a_out", "eta_in", "eta_out", "mu_in", "mu_out"):
            object.__setattr__(self, name, _spd(name, getattr(self, name)))
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != 3 or len(hi) != 3 or any(not (0.0 <= l < u <= 1.0) for l, u in zip(lo, hi)):
            raise InvalidArgumentError(f"inclusion box {lo}..{hi} must lie in the unit cell")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        eps = float(self.epsilon)
        if not 0.0 < eps < 1.0:
            raise InvalidArgumentError(f"epsilon must lie in (0, 1), got {eps}")
        inv = 1.0 / eps
        if abs(inv - round(inv)) > 1e-9 * inv:
            raise InvalidArgumentError(f"1/epsilon must be an integer, got {inv}")
        object.__setattr__(self, "epsilon", 1.0 / round(inv))
        if self.N < 0:
            raise InvalidArgumentError("electron number density N must be >= 0")

    # ----- construction helpers -----
    @classmethod
    def cube(cls, side: float = 0.5, center: Sequence[float] = (0.5, 0.5, 0.5), **kw) -> "PeriodicMedium":
        c = np.asarray(center, dtype=float)
        if side <= 0 or np.any(c - side / 2 <= 0) or np.any(c + side / 2 >= 1):
            raise InvalidArgumentError("cube inclusion must lie strictly inside the unit cell")
        return cls(lower=tuple(c - side / 2), upper=tuple(c + side / 2), **kw)

    @classmethod
    def laminate(cls, axis: int = 0, fraction: float = 0.5, **kw) -> "PeriodicMedium":
        lo, hi = [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]
        lo[axis], hi[axis] = 0.5 - fraction / 2, 0.5 + fraction / 2
        return cls(lower=tuple(lo), upper=tuple(hi), **kw)

    def replace(self, **changes) -> "PeriodicMedium":
        params = {k: getattr(self, k) for k in self.__dataclass_fields__}
        params.update(changes)
        return PeriodicMedium(**params)

    # ----- derived quantities -----
    @property
    def inclusion_fraction(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    @property
    def cells_per_side(self) -> int:
        return int(round(1.0 / self.epsilon))

    def tensor_pair(self, which: str):
        which = _ALIASES[which]
        return {"A": (self.a_in, self.a_out), "eta": (self.eta_in, self.eta_out),
                "mu": (self.mu_in, self.mu_out)}[which]

    def face_coordinates(self):
        """Inclusion face coordinates strictly inside (0, 1), per axis."""
        return [[v for v in (l, u) if 0.0 < v < 1.0] for l, u in zip(self.lower, self.upper)]

    def inside(self, xi: np.ndarray) -> np.ndarray:
        xi = np.mod(np.asarray(xi, dtype=float), 1.0)
        lo, hi = np.array(self.lower), np.array(self.upper)
        return np.all((xi > lo) & (xi < hi), axis=-1)

    def sampler(self, which: str, inverse: bool = False, physical: bool = False):
        """Vectorised coefficient function of cell coordinates (or of ``x`` with ``xi = x/eps``)."""
        which = _ALIASES[which]
        scale = 1.0 / self.epsilon if physical else 1.0
        if which == "Vc":
            vin, vout = self.vc_in, self.vc_out
            return lambda p: np.where(self.inside(np.asarray(p) * scale), vin, vout)
        tin, tout = self.tensor_pair(which)
        if inverse:
            tin, tout = np.linalg.inv(tin), np.linalg.inv(tout)

        def f(p):
            ins = self.inside(np.asarray(p) * scale)
            return np.where(ins[..., None, None], tin, tout)

        return f

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "inclusion": {"lower": list(self.lower), "upper": list(self.upper)},
            "a_in": self.a_in.tolist(), "a_out": self.a_out.tolist(),
            "eta_in": self.eta_in.tolist(), "eta_out": self.eta_out.tolist(),
            "mu_in": self.mu_in.tolist(), "mu_out": self.mu_out.tolist(),
            "vc_in": self.vc_in, "vc_out": self.vc_out, "N": self.N, "unsafe": self.unsafe,
        }


# cube-inclusion presets; contrast sharpens from "contrast-low" to "contrast-high",
# "xc-cube" is the preset used with the cube-root exchange-correlation model
CASES = {
    "contrast-low": {"a_in": 0.1, "mu_out": 0.01},
    "contrast-mid": {"a_in": 0.05, "mu_out": 0.005},
    "contrast-high": {"a_in": 0.02, "mu_out": 0.0025},
    "xc-cube": {"a_in": 0.025, "mu_out": 0.01},
}


def case_medium(case: str, epsilon: float = 0.25, N: float = 10.0, side: float = 0.5) -> PeriodicMedium:
    """Centred-cube medium with the A/mu contrasts of a named case; eta is the identity."""
    if case not in CASES:
        raise InvalidArgumentError(f"unknown case {case!r}; known: {sorted(CASES)}")
    c = CASES[case]
    return PeriodicMedium.cube(
        side, epsilon=epsilon, N=N,
        a_in=c["a_in"] * np.eye(3), a_out=np.eye(3),
        mu_in=np.eye(3), mu_out=c["mu_out"] * np.eye(3),
        vc_in=0.0, vc_out=1.0,
    )


def constant_medium(epsilon: float = 0.25, N: float = 10.0, vc: float = 1.0) -> PeriodicMedium:
    return PeriodicMedium.cube(0.5, epsilon=epsilon, N=N, vc_in=vc, vc_out=vc)


def sample(medium: PeriodicMedium, which: str, xi):
    """Coefficient value at cell coordinate(s) ``xi`` (wrapped modulo 1)."""
    return medium.sampler(which)(np.asarray(xi, dtype=float))


@dataclass(frozen=True)
class SymmetryReport:
    ok: bool
    violations: tuple = ()

    def __bool__(self):
        return self.ok


def validate_symmetry(medium: PeriodicMedium) -> SymmetryReport:
    """Check diagonal tensors and middle-plane symmetric inclusion geometry."""
    bad = []
    for name in ("a_in", "a_out", "eta_in", "eta_out", "mu_in", "mu_out"):
        t = getattr(medium, name)
        if np.abs(t - np.diag(np.diag(t))).max() > 0:
            bad.append(("diagonal", f"{name} has off-diagonal entries"))
    for d in range(3):
        if abs(medium.lower[d] + medium.upper[d] - 1.0) > 1e-12:
            bad.append(("mirror", f"inclusion not symmetric about the middle plane normal to axis {d + 1}"))
    return SymmetryReport(not bad, tuple(bad))


# ---------------------------------------------------------------------------
# Source
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SourceSpec:
    """Divergence-free current source ``f`` and its time derivative ``F``.

    ``cosine-ramp``: ``f = amp (1 - cos(pi t)) (y^2+1, z^2+1, x^2+1)``.
    """

    formula: str = "cosine-ramp"
    amplitude: float = 1000.0

    def __post_init__(self):
        if self.formula not in ("cosine-ramp", "zero"):
            raise InvalidArgumentError(f"unknown source formula {self.formula!r}")


def _profile(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.stack([x[..., 1] ** 2 + 1, x[..., 2] ** 2 + 1, x[..., 0] ** 2 + 1], axis=-1)


def eval_source(spec: SourceSpec, x, t: float):
    """Return ``(f, F)`` at point(s) ``x`` and time ``t``."""
    if t < 0:
        raise InvalidArgumentError("source time must be >= 0")
    prof = _profile(x)
    if spec.formula == "zero":
        return np.zeros_like(prof), np.zeros_like(prof)
    f = spec.amplitude * (1.0 - np.cos(np.pi * t)) * prof
    F = spec.amplitude * np.pi * np.sin(np.pi * t) * prof
    return f, F


# ---------------------------------------------------------------------------
# Exchange-correlation
# ---------------------------------------------------------------------------

@dataclass
class XcSpec:
    kind: str = "none"
    table: tuple | None = None  # (rho_grid, values) for kind="custom-table"
    clamped: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.kind not in ("none", "cube-root", "custom-table"):
            raise InvalidArgumentError(f"unknown xc kind {self.kind!r}")
        if self.kind == "custom-table" and self.table is None:
            raise InvalidArgumentError("custom-table xc needs a (rho, value) table")


def eval_xc(spec: XcSpec, rho):
    """Exchange-correlation potential; negative densities are clamped to 0 and counted."""
    r = np.asarray(rho, dtype=float)
    neg = r < 0
    if np.any(neg):
        spec.clamped += int(np.count_nonzero(neg))
        r = np.where(neg, 0.0, r)
    if spec.kind == "none":
        out = np.zeros_like(r)
    elif spec.kind == "cube-root":
        out = -np.cbrt(3.0 * r)
    else:
        grid, vals = spec.table
        out = np.interp(r, grid, vals)
    return out if out.ndim else float(out)
