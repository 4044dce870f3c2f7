"""Homogenized tensors from cell functions, and their certification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mesh_fem as fem
from .media import PeriodicMedium, _ALIASES


def _coefficient_at_quad(medium: PeriodicMedium, which: str, mesh: fem.BoxMesh, inverse=False):
    return fem.sample_tensor(medium.sampler(which, inverse=inverse), mesh.quadrature_points)


def scalar_tensor_raw(mesh: fem.BoxMesh, C_q: np.ndarray, thetas) -> np.ndarray:
    """Unsymmetrized ``int_Q c (e_j + grad theta_j)`` column by column."""
    T = np.empty((3, 3))
    for j in range(3):
        g = np.zeros(C_q.shape[:2] + (3,))
        g[..., j] = 1.0
        if thetas[j] is not None:
            g = g + fem.nodal_grad_at_quad(mesh, thetas[j])
        T[:, j] = fem.integrate(mesh, np.einsum("eqik,eqk->eqi", C_q, g)) / mesh.volume
    return T


def curl_tensor_raw(mesh: fem.BoxMesh, Cinv_q: np.ndarray, Thetas) -> np.ndarray:
    """Unsymmetrized ``int_Q c^-1 (e_p + curl Theta_p)`` column by column."""
    T = np.empty((3, 3))
    for p in range(3):
        g = np.zeros(Cinv_q.shape[:2] + (3,))
        g[..., p] = 1.0
        if Thetas[p] is not None:
            g = g + fem.edge_curl_at_quad(mesh, Thetas[p])
        T[:, p] = fem.integrate(mesh, np.einsum("eqik,eqk->eqi", Cinv_q, g)) / mesh.volume
    return T


def _symmetrize(T: np.ndarray):
    asym = float(np.abs(T - T.T).max())
    return 0.5 * (T + T.T), asym


def homogenize_scalar(medium: PeriodicMedium, which: str, cell_set, variant: str | None = None,
                      return_asymmetry: bool = False):
    """Effective tensor ``int_Q (c_ij + c_ik d_k theta_j)``, symmetrized."""
    variant = variant or cell_set.provenance
    which = _ALIASES[which]
    mesh = cell_set.mesh
    thetas = [cell_set.theta1(which, j, variant).values for j in range(3)]
    T, asym = _symmetrize(scalar_tensor_raw(mesh, _coefficient_at_quad(medium, which, mesh), thetas))
    return (T, asym) if return_asymmetry else T


def homogenize_inverse(medium: PeriodicMedium, which: str, cell_set, return_asymmetry: bool = False):
    """Inverse effective tensor ``int_Q c^-1 (I + curl Theta_1)``, symmetrized."""
    which = _ALIASES[which]
    mesh = cell_set.mesh
    Thetas = [cell_set.Theta1(which, p).values for p in range(3)]
    Cinv = _coefficient_at_quad(medium, which, mesh, inverse=True)
    T, asym = _symmetrize(curl_tensor_raw(mesh, Cinv, Thetas))
    return (T, asym) if return_asymmetry else T


def mean_potential(medium: PeriodicMedium) -> float:
    f = medium.inclusion_fraction
    return medium.vc_in * f + medium.vc_out * (1.0 - f)


@dataclass
class EffectiveTensors:
    A_hat: np.ndarray
    eta_hat: np.ndarray
    mu_hat: np.ndarray
    inv_eta_hat: np.ndarray
    inv_mu_hat: np.ndarray
    mean_Vc: float
    provenance: str = "periodic"
    cell_divisions: int = 0
    asymmetry: dict = field(default_factory=dict)

    NAMES = ("A_hat", "eta_hat", "mu_hat", "inv_eta_hat", "inv_mu_hat")

    def to_dict(self) -> dict:
        out = {n: np.asarray(getattr(self, n)).tolist() for n in self.NAMES}
        out.update(mean_Vc=self.mean_Vc, provenance=self.provenance, cell_divisions=self.cell_divisions,
                   asymmetry=dict(self.asymmetry))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EffectiveTensors":
        return cls(**{n: np.array(d[n], dtype=float) for n in cls.NAMES}, mean_Vc=float(d["mean_Vc"]),
                   provenance=d.get("provenance", "periodic"), cell_divisions=int(d.get("cell_divisions", 0)),
                   asymmetry=dict(d.get("asymmetry", {})))

    @classmethod
    def constant(cls, medium: PeriodicMedium) -> "EffectiveTensors":
        """Tensors of a medium whose in/out values coincide (no cell solve needed)."""
        return cls(medium.a_out.copy(), medium.eta_out.copy(), medium.mu_out.copy(),
                   np.linalg.inv(medium.eta_out), np.linalg.inv(medium.mu_out), mean_potential(medium))


def homogenize_all(medium: PeriodicMedium, cell_set, variant: str | None = None) -> EffectiveTensors:
    variant = variant or cell_set.provenance
    asym = {}
    out = {}
    for name, which in (("A_hat", "A"), ("eta_hat", "eta"), ("mu_hat", "mu")):
        out[name], asym[name] = homogenize_scalar(medium, which, cell_set, variant, return_asymmetry=True)
    for name, which in (("inv_eta_hat", "eta"), ("inv_mu_hat", "mu")):
        out[name], asym[name] = homogenize_inverse(medium, which, cell_set, return_asymmetry=True)
    return EffectiveTensors(**out, mean_Vc=mean_potential(medium), provenance=variant,
                            cell_divisions=cell_set.mesh.divisions[0], asymmetry=asym)


# ---------------------------------------------------------------------------
# Certification
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    bound: float
    diagnostic: bool = False


@dataclass
class CertificateReport:
    checks: list

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks if not c.diagnostic)

    def failures(self):
        return [c for c in self.checks if not c.passed and not c.diagnostic]

    def to_dict(self):
        return [c.__dict__.copy() for c in self.checks]


def voigt_reuss(medium: PeriodicMedium, which: str, inverse: bool = False):
    """Per-axis (harmonic, arithmetic) mean bracket of the constituent diagonal values."""
    tin, tout = medium.tensor_pair(which)
    if inverse:
        tin, tout = np.linalg.inv(tin), np.linalg.inv(tout)
    f = medium.inclusion_fraction
    din, dout = np.diag(tin), np.diag(tout)
    harm = 1.0 / (f / din + (1 - f) / dout)
    arith = f * din + (1 - f) * dout
    return harm, arith


def certify(tensors: EffectiveTensors, medium: PeriodicMedium, sym_tol: float = 1e-10,
            bracket_rtol: float = 1e-9, consistency_tol: float = 0.15) -> CertificateReport:
    checks = []
    targets = {"A_hat": ("A", False), "eta_hat": ("eta", False), "mu_hat": ("mu", False),
               "inv_eta_hat": ("eta", True), "inv_mu_hat": ("mu", True)}
    for name, (which, inverse) in targets.items():
        T = np.asarray(getattr(tensors, name))
        norm = max(np.abs(T).max(), 1e-300)
        asym = float(np.abs(T - T.T).max())
        checks.append(CheckResult(f"{name}.symmetry", asym <= sym_tol * norm, asym, sym_tol * norm))
        eig = np.linalg.eigvalsh(0.5 * (T + T.T))
        checks.append(CheckResult(f"{name}.spd", bool(eig.min() > 0), float(eig.min()), 0.0))
        harm, arith = voigt_reuss(medium, which, inverse)
        d = np.diag(T)
        slack = bracket_rtol * np.maximum(np.abs(harm), np.abs(arith))
        viol = float(np.max(np.maximum(harm - slack - d, d - arith - slack)))
        checks.append(CheckResult(f"{name}.bracket_axes", viol <= 0, viol, 0.0))
        lo, hi = harm.min() - slack.max(), arith.max() + slack.max()
        ev_viol = float(max(lo - eig.min(), eig.max() - hi))
        checks.append(CheckResult(f"{name}.bracket_eigs", ev_viol <= 0, ev_viol, 0.0))
    for which, diag in (("eta", False), ("mu", True)):
        P = np.asarray(getattr(tensors, f"inv_{which}_hat")) @ np.asarray(getattr(tensors, f"{which}_hat"))
        dev = float(np.abs(P - np.eye(3)).max())
        checks.append(CheckResult(f"{which}.inverse_consistency", dev <= consistency_tol, dev, consistency_tol,
                                  diagnostic=diag))
    return CertificateReport(checks)
