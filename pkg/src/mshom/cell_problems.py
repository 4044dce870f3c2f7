"""Scalar and curl-curl cell problems on the unit cell Q = (0,1)^3."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import mesh_fem as fem
from .effective import curl_tensor_raw, scalar_tensor_raw
from .errors import InvalidArgumentError, MisalignmentError, MshomError
from .media import PeriodicMedium, _ALIASES
from .mesh_fem import EdgeField, ScalarField

SCALAR_TOL = 1e-11
CURL_TOL = 1e-10
_KEYS = {"A": "a", "eta": "eta", "mu": "mu"}


def check_alignment(medium: PeriodicMedium, divisions: int, per_cell: bool = True):
    """Raise unless every inclusion face lies on a grid plane of ``divisions`` cells per unit."""
    for axis, faces in enumerate(medium.face_coordinates()):
        for f in faces:
            k = f * divisions
            if abs(k - round(k)) > 1e-9 * max(1.0, divisions):
                where = "cell" if per_cell else "fine"
                raise MisalignmentError(
                    f"inclusion face {f} (axis {axis + 1}) is not a multiple of 1/{divisions} on the {where} mesh")


@dataclass
class CellFunctionSet:
    """All cell functions on one cell mesh, keyed by name.

    Names: ``theta1_<c>_<variant>_<k>``, ``theta2_<c>_<k><l>``,
    ``Theta1_<c>_<p>``, ``Theta2_<c>_<p>``, ``zeta_<c>_<p>`` with
    ``c`` in ``a``/``eta``/``mu`` and zero-based axes.
    """

    mesh: fem.BoxMesh
    fields: dict = field(default_factory=dict)
    provenance: str = "periodic"
    tensors: dict = field(default_factory=dict)  # effective values fed to second-order problems
    medium_hash: str = ""

    def theta1(self, which, k, variant="dirichlet") -> ScalarField:
        return self.fields[f"theta1_{_KEYS[_ALIASES[which]]}_{variant}_{k}"]

    def theta2(self, which, k, l) -> ScalarField:
        return self.fields[f"theta2_{_KEYS[_ALIASES[which]]}_{k}{l}"]

    def Theta1(self, which, p) -> EdgeField:
        return self.fields[f"Theta1_{_KEYS[_ALIASES[which]]}_{p}"]

    def Theta2(self, which, p) -> EdgeField:
        return self.fields[f"Theta2_{_KEYS[_ALIASES[which]]}_{p}"]

    def zeta(self, which, p) -> ScalarField:
        return self.fields[f"zeta_{_KEYS[_ALIASES[which]]}_{p}"]

    def scalar_names(self):
        return [n for n, f in self.fields.items() if isinstance(f, ScalarField)]

    def vector_names(self):
        return [n for n, f in self.fields.items() if isinstance(f, EdgeField)]


class _Cell:
    """Per-mesh cache of assembled cell operators for one medium."""

    def __init__(self, medium: PeriodicMedium, divisions: int):
        check_alignment(medium, divisions)
        self.medium = medium
        self.mesh = fem.unit_cube_mesh(divisions)
        self._coef = {}
        self._sys = {}

    def coef(self, which, inverse=False):
        key = (which, inverse)
        if key not in self._coef:
            self._coef[key] = fem.sample_tensor(self.medium.sampler(which, inverse=inverse),
                                                self.mesh.quadrature_points)
        return self._coef[key]

    def scalar_system(self, which, boundary):
        key = ("scalar", which, boundary)
        if key not in self._sys:
            self._sys[key] = fem.assemble_scalar(self.mesh, self.coef(which), boundary=boundary)
        return self._sys[key]

    def laplacian(self):
        key = ("laplace",)
        if key not in self._sys:
            self._sys[key] = fem.assemble_scalar(self.mesh, 1.0, boundary="dirichlet-zero")
        return self._sys[key]

    def saddle(self, which):
        key = ("saddle", which)
        if key not in self._sys:
            K = fem.assemble_curl_curl(self.mesh, self.coef(which, inverse=True))
            self._sys[key] = (K, fem.saddle_point_system(K, self.edge_mass(), self.mesh))
        return self._sys[key]

    def edge_mass(self):
        key = ("edge_mass",)
        if key not in self._sys:
            self._sys[key] = fem.assemble_mass(self.mesh, "edge").matrix
        return self._sys[key]


def _cell(medium, cell_divisions, ctx):
    if ctx is not None:
        return ctx
    return _Cell(medium, cell_divisions)


def solve_scalar_first(medium: PeriodicMedium, which: str, k: int, variant: str = "dirichlet",
                       cell_divisions: int = 16, ctx: _Cell | None = None) -> ScalarField:
    """First-order cell function: ``(c grad theta_k, grad v) = -(c e_k, grad v)``."""
    which = _ALIASES[which]
    if variant not in ("periodic", "dirichlet"):
        raise InvalidArgumentError(f"unknown variant {variant!r}")
    c = _cell(medium, cell_divisions, ctx)
    boundary = "periodic-pinned" if variant == "periodic" else "dirichlet-zero"
    sys = c.scalar_system(which, boundary)
    rhs = fem.nodal_grad_load(c.mesh, -c.coef(which)[..., :, k])
    x = fem.solve(sys.with_rhs(rhs), SCALAR_TOL)
    if variant == "periodic":
        x = fem.zero_mean(c.mesh, x)
    return ScalarField(c.mesh, x)


def second_order_load(mesh, C_q, theta_l: np.ndarray, k: int, l: int, c_hat_kl: float) -> np.ndarray:
    """Load vector of the second-order scalar problem for the SPD form ``(c grad u, grad v)``."""
    th_q = fem.nodal_at_quad(mesh, theta_l)
    grad_q = fem.nodal_grad_at_quad(mesh, theta_l)
    div_part = fem.nodal_grad_load(mesh, -C_q[..., :, k] * th_q[..., None])
    src = np.einsum("eqj,eqj->eq", C_q[..., k, :], grad_q) + C_q[..., k, l] - c_hat_kl
    return div_part + fem.nodal_load(mesh, src)


def solve_scalar_second(medium: PeriodicMedium, which: str, k: int, l: int, first_order: ScalarField,
                        effective_entry: float, cell_divisions: int = 16, ctx: _Cell | None = None) -> ScalarField:
    """Second-order Dirichlet cell function ``theta_kl``."""
    which = _ALIASES[which]
    c = _cell(medium, cell_divisions, ctx)
    if not first_order.mesh.same_as(c.mesh):
        raise InvalidArgumentError("first-order field lives on a different cell mesh")
    rhs = second_order_load(c.mesh, c.coef(which), first_order.values, k, l, effective_entry)
    x = fem.solve(c.scalar_system(which, "dirichlet-zero").with_rhs(rhs), SCALAR_TOL)
    return ScalarField(c.mesh, x)


def _solve_saddle(c: _Cell, which: str, edge_rhs: np.ndarray) -> np.ndarray:
    K, S = c.saddle(which)
    Pe = K.prolongation
    ne = Pe.shape[1]
    b = np.concatenate([Pe.T @ edge_rhs, np.zeros(S.size - ne)])
    y = fem.solve_reduced(S.matrix, b, "indefinite", CURL_TOL)
    u = Pe @ y[:ne]
    return _remove_gradient(c, u)


def _remove_gradient(c: _Cell, u: np.ndarray) -> np.ndarray:
    """Subtract the M-orthogonal projection of ``u`` onto discrete gradients.

    The curl is unchanged; this tightens the discrete divergence constraint
    left by the Krylov tolerance down to the CG tolerance.
    """
    G = c.mesh.gradient_matrix
    rhs = G.T @ (c.edge_mass() @ u)
    if not np.any(rhs):
        return u
    q = fem.solve(c.laplacian().with_rhs(rhs), SCALAR_TOL)
    return u - G @ q


def solve_curl_first(medium: PeriodicMedium, which: str, p: int, cell_divisions: int = 16,
                     ctx: _Cell | None = None) -> EdgeField:
    """First-order curl cell function with perfect-conductor trace and zero divergence."""
    which = _ALIASES[which]
    c = _cell(medium, cell_divisions, ctx)
    rhs = fem.edge_curl_load(c.mesh, -c.coef(which, inverse=True)[..., :, p])
    return EdgeField(c.mesh, _solve_saddle(c, which, rhs))


def g_tilde_at_quad(c: _Cell, which: str, p: int, Theta1: EdgeField, inv_effective: np.ndarray) -> np.ndarray:
    Cinv = c.coef(which, inverse=True)
    curl = fem.edge_curl_at_quad(c.mesh, Theta1.values)
    return -np.einsum("eqij,eqj->eqi", Cinv, curl) - Cinv[..., :, p] + np.asarray(inv_effective)[:, p]


def solve_zeta(medium: PeriodicMedium, which: str, p: int, Theta1: EdgeField, inv_effective,
               cell_divisions: int = 16, ctx: _Cell | None = None) -> ScalarField:
    """Auxiliary potential: ``(grad zeta, grad w) = -(G~, grad w)``, zero trace."""
    which = _ALIASES[which]
    c = _cell(medium, cell_divisions, ctx)
    G = g_tilde_at_quad(c, which, p, Theta1, inv_effective)
    x = fem.solve(c.laplacian().with_rhs(fem.nodal_grad_load(c.mesh, -G)), SCALAR_TOL)
    return ScalarField(c.mesh, x)


def curl_second_load(c: _Cell, which: str, p: int, Theta1: EdgeField, zeta2: ScalarField, inv_effective):
    Cinv = c.coef(which, inverse=True)
    th_q = fem.edge_at_quad(c.mesh, Theta1.values)
    G = g_tilde_at_quad(c, which, p, Theta1, inv_effective) + fem.nodal_grad_at_quad(c.mesh, zeta2.values)
    return fem.edge_curl_load(c.mesh, -np.einsum("eqij,eqj->eqi", Cinv, th_q)) + fem.edge_load(c.mesh, G)


def solve_curl_second(medium: PeriodicMedium, which: str, p: int, Theta1: EdgeField, zeta2: ScalarField,
                      inv_effective, cell_divisions: int = 16, ctx: _Cell | None = None) -> EdgeField:
    which = _ALIASES[which]
    c = _cell(medium, cell_divisions, ctx)
    rhs = curl_second_load(c, which, p, Theta1, zeta2, inv_effective)
    return EdgeField(c.mesh, _solve_saddle(c, which, rhs))


def medium_hash(medium: PeriodicMedium, cell_divisions: int | None = None, extra: dict | None = None) -> str:
    d = medium.to_dict()
    d.pop("epsilon", None)
    d.pop("N", None)
    if cell_divisions is not None:
        d["cell_divisions"] = cell_divisions
    if extra:
        d.update(extra)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def solve_all(medium: PeriodicMedium, cell_divisions: int = 16, second_order_source: str = "periodic",
              verify: bool = True) -> CellFunctionSet:
    """Solve every cell problem for one medium; invariants checked before returning."""
    c = _Cell(medium, cell_divisions)
    out = CellFunctionSet(c.mesh, provenance=second_order_source,
                          medium_hash=medium_hash(medium, cell_divisions, {"source": second_order_source}))

    def run(name, fn, *args, **kw):
        try:
            f = fn(*args, ctx=c, **kw)
        except MshomError as e:
            e.args = (f"cell problem {name}: {e.args[0] if e.args else e}",) + tuple(e.args[1:])
            raise
        out.fields[name] = f
        return f

    for which in ("A", "eta", "mu"):
        key = _KEYS[which]
        for variant in ("periodic", "dirichlet"):
            for k in range(3):
                run(f"theta1_{key}_{variant}_{k}", solve_scalar_first, medium, which, k, variant)
        thetas = [out.theta1(which, j, second_order_source).values for j in range(3)]
        c_hat = 0.5 * (lambda T: T + T.T)(scalar_tensor_raw(c.mesh, c.coef(which), thetas))
        out.tensors[f"{key}_hat"] = c_hat
        for k in range(3):
            for l in range(3):
                run(f"theta2_{key}_{k}{l}", solve_scalar_second, medium, which, k, l,
                    out.theta1(which, l, "dirichlet"), c_hat[k, l])
    for which in ("eta", "mu"):
        key = _KEYS[which]
        for p in range(3):
            run(f"Theta1_{key}_{p}", solve_curl_first, medium, which, p)
        Thetas = [out.Theta1(which, p).values for p in range(3)]
        T = curl_tensor_raw(c.mesh, c.coef(which, inverse=True), Thetas)
        inv_hat = 0.5 * (T + T.T)
        out.tensors[f"inv_{key}_hat"] = inv_hat
        for p in range(3):
            z = run(f"zeta_{key}_{p}", solve_zeta, medium, which, p, out.Theta1(which, p), inv_hat)
            run(f"Theta2_{key}_{p}", solve_curl_second, medium, which, p, out.Theta1(which, p), z, inv_hat)
    if verify:
        problems = verify_invariants(out)
        if problems:
            raise MshomError("cell function invariants violated: " + "; ".join(problems))
    return out


def divergence_defect(cells: CellFunctionSet, u: np.ndarray) -> float:
    """max over nodal w of |(u, grad w)| / (||u|| ||grad w||), via the M-weighted dual norm."""
    mesh = cells.mesh
    M = fem.assemble_mass(mesh, "edge").matrix
    unorm = np.sqrt(u @ (M @ u))
    if unorm == 0:
        return 0.0
    lap = fem.assemble_scalar(mesh, 1.0, boundary="dirichlet-zero")
    r = mesh.gradient_matrix.T @ (M @ u)
    q = fem.solve(lap.with_rhs(r), 1e-12)
    # sup_w (r.w)/||grad w||_M = sqrt(r . L^-1 r)
    return float(np.sqrt(max(r @ q, 0.0)) / unorm)


def verify_invariants(cells: CellFunctionSet, tol_mean: float = 1e-10, tol_div: float = 1e-8) -> list:
    mesh = cells.mesh
    problems = []
    bn, be = mesh.boundary_nodes, mesh.boundary_edges
    for name, f in cells.fields.items():
        if isinstance(f, ScalarField):
            if "periodic" in name:
                mean = fem.integrate(mesh, fem.nodal_at_quad(mesh, f.values))
                if abs(mean) > tol_mean:
                    problems.append(f"{name}: mean {mean:.2e}")
            elif np.any(f.values[bn] != 0.0):
                problems.append(f"{name}: nonzero boundary trace")
        else:
            if np.any(f.values[be] != 0.0):
                problems.append(f"{name}: nonzero tangential trace")
            d = divergence_defect(cells, f.values)
            if d > tol_div:
                problems.append(f"{name}: divergence defect {d:.2e}")
    return problems


# ---------------------------------------------------------------------------
# Binary snapshot
# ---------------------------------------------------------------------------

SNAPSHOT_MAGIC = b"MSHOMCEL"
SNAPSHOT_VERSION = 1


def write_cell_snapshot(cells: CellFunctionSet, path) -> None:
    """Versioned binary snapshot: header, JSON metadata, then (name, kind, divisions, float64 dofs) records."""
    meta = json.dumps({"provenance": cells.provenance, "medium_hash": cells.medium_hash,
                       "tensors": {k: np.asarray(v).tolist() for k, v in cells.tensors.items()}}).encode()
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<II", SNAPSHOT_VERSION, len(cells.fields)))
        fh.write(struct.pack("<3i", *cells.mesh.divisions))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for name, f in cells.fields.items():
            b = name.encode()
            kind = 0 if isinstance(f, ScalarField) else 1
            vals = np.ascontiguousarray(f.values, dtype="<f8")
            fh.write(struct.pack("<H", len(b)))
            fh.write(b)
            fh.write(struct.pack("<B3iQ", kind, *f.mesh.divisions, len(vals)))
            fh.write(vals.tobytes())


def read_cell_snapshot(path) -> CellFunctionSet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != SNAPSHOT_MAGIC:
        raise InvalidArgumentError(f"{path}: not a cell snapshot")
    off = 8
    version, nfields = struct.unpack_from("<II", data, off)
    off += 8
    if version != SNAPSHOT_VERSION:
        raise InvalidArgumentError(f"{path}: unsupported snapshot version {version}")
    div = struct.unpack_from("<3i", data, off)
    off += 12
    (mlen,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off:off + mlen].decode())
    off += mlen
    mesh = fem.unit_cube_mesh(div[0]) if len(set(div)) == 1 else fem.BoxMesh((0, 0, 0), (1, 1, 1), div)
    cells = CellFunctionSet(mesh, provenance=meta["provenance"], medium_hash=meta["medium_hash"],
                            tensors={k: np.array(v) for k, v in meta["tensors"].items()})
    for _ in range(nfields):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        kind, d0, d1, d2, count = struct.unpack_from("<B3iQ", data, off)
        off += struct.calcsize("<B3iQ")
        vals = np.frombuffer(data, dtype="<f8", count=count, offset=off).copy()
        off += 8 * count
        cells.fields[name] = (ScalarField if kind == 0 else EdgeField)(mesh, vals)
    return cells
