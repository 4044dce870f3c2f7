"""Structured hexahedral meshes with trilinear nodal and lowest-order edge elements.

Numbering conventions
---------------------
Nodes are numbered lexicographically with x fastest::

    node(i, j, k) = i + (nx + 1) * (j + (ny + 1) * k)

Edges come in three blocks (x-, y-, then z-directed), each lexicographic with
x fastest. Every edge points along +axis, i.e. from the lower to the higher
global node index. An edge degree of freedom is the line integral of the
field along the edge.

Element-local nodes use ``a = a0 + 2*a1 + 4*a2`` with ``a_d`` the offset
bit along axis ``d``. Element-local edges are ``0..3`` for x-edges
(``b1 + 2*b2``), ``4..7`` for y-edges (``4 + b0 + 2*b2``) and ``8..11``
for z-edges (``8 + b0 + 2*b1``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AssemblyError, ConvergenceError, InvalidArgumentError, OutOfDomainError

Sampler = Union[Callable[[np.ndarray], np.ndarray], float, np.ndarray]

_G = 0.5 / np.sqrt(3.0)
GAUSS_1D = np.array([0.5 - _G, 0.5 + _G])
# 2x2x2 Gauss points on the reference cube [0,1]^3, q = q0 + 2*q1 + 4*q2
QUAD_REF = np.array(
    [[GAUSS_1D[q & 1], GAUSS_1D[(q >> 1) & 1], GAUSS_1D[(q >> 2) & 1]] for q in range(8)]
)
QUAD_WEIGHTS = np.full(8, 1.0 / 8.0)

_BITS = np.array([[(a >> d) & 1 for d in range(3)] for a in range(8)])


def _lin(bit, s):
    return s if bit else 1.0 - s


def _dlin(bit):
    return 1.0 if bit else -1.0


def q1_basis(ref: np.ndarray, h: np.ndarray):
    """Trilinear shape functions and physical gradients at reference points.

    Returns ``(values, grads)`` with shapes ``(n, 8)`` and ``(n, 8, 3)``.
    """
    ref = np.atleast_2d(ref)
    n = ref.shape[0]
    vals = np.ones((n, 8))
    grads = np.ones((n, 8, 3))
    for a in range(8):
        for d in range(3):
            b = _BITS[a, d]
            f = _lin(b, ref[:, d])
            vals[:, a] *= f
            for g in range(3):
                grads[:, a, g] *= (_dlin(b) / h[d]) if g == d else f
    return vals, grads


def edge_basis(ref: np.ndarray, h: np.ndarray):
    """Lowest-order hexahedral edge shape functions and their curls.

    Returns ``(values, curls)``, both of shape ``(n, 12, 3)``.
    """
    ref = np.atleast_2d(ref)
    sx, sy, sz = ref[:, 0], ref[:, 1], ref[:, 2]
    hx, hy, hz = h
    n = ref.shape[0]
    vals = np.zeros((n, 12, 3))
    curls = np.zeros((n, 12, 3))
    for b1 in (0, 1):
        for b2 in (0, 1):
            loc = b1 + 2 * b2
            vals[:, loc, 0] = _lin(b1, sy) * _lin(b2, sz) / hx
            curls[:, loc, 1] = _lin(b1, sy) * _dlin(b2) / (hx * hz)
            curls[:, loc, 2] = -_dlin(b1) * _lin(b2, sz) / (hx * hy)
    for b0 in (0, 1):
        for b2 in (0, 1):
            loc = 4 + b0 + 2 * b2
            vals[:, loc, 1] = _lin(b0, sx) * _lin(b2, sz) / hy
            curls[:, loc, 0] = -_lin(b0, sx) * _dlin(b2) / (hy * hz)
            curls[:, loc, 2] = _dlin(b0) * _lin(b2, sz) / (hx * hy)
    for b0 in (0, 1):
        for b1 in (0, 1):
            loc = 8 + b0 + 2 * b1
            vals[:, loc, 2] = _lin(b0, sx) * _lin(b1, sy) / hz
            curls[:, loc, 0] = _lin(b0, sx) * _dlin(b1) / (hy * hz)
            curls[:, loc, 1] = -_dlin(b0) * _lin(b1, sy) / (hx * hz)
    return vals, curls


class BoxMesh:
    """Uniform axis-aligned hexahedral mesh of a box."""

    def __init__(self, origin, extents, divisions):
        origin = np.asarray(origin, dtype=float).reshape(3)
        extents = np.asarray(extents, dtype=float).reshape(3)
        div = np.asarray(divisions).reshape(3)
        if not np.all(np.isfinite(extents)) or np.any(extents <= 0):
            raise InvalidArgumentError(f"extents must be positive, got {extents.tolist()}")
        if np.any(div != np.round(div)) or np.any(div < 1):
            raise InvalidArgumentError(f"divisions must be integers >= 1, got {div.tolist()}")
        self.origin = origin
        self.extents = extents
        self.divisions = tuple(int(d) for d in div)
        self.h = extents / np.array(self.divisions, dtype=float)

    def __repr__(self):
        return f"BoxMesh(origin={self.origin.tolist()}, extents={self.extents.tolist()}, divisions={self.divisions})"

    def same_as(self, other: "BoxMesh") -> bool:
        return (
            self.divisions == other.divisions
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-14)
            and np.allclose(self.extents, other.extents, rtol=0, atol=1e-14)
        )

    # ----- counts -----
    @property
    def n_nodes(self) -> int:
        nx, ny, nz = self.divisions
        return (nx + 1) * (ny + 1) * (nz + 1)

    @property
    def n_elements(self) -> int:
        nx, ny, nz = self.divisions
        return nx * ny * nz

    @property
    def edge_block_sizes(self):
        nx, ny, nz = self.divisions
        return (nx * (ny + 1) * (nz + 1), (nx + 1) * ny * (nz + 1), (nx + 1) * (ny + 1) * nz)

    @property
    def n_edges(self) -> int:
        return sum(self.edge_block_sizes)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    @property
    def element_volume(self) -> float:
        return float(np.prod(self.h))

    # ----- geometry and connectivity -----
    def node_index(self, i, j, k):
        nx, ny, _ = self.divisions
        return np.asarray(i) + (nx + 1) * (np.asarray(j) + (ny + 1) * np.asarray(k))

    @cached_property
    def node_ijk(self) -> np.ndarray:
        nx, ny, nz = self.divisions
        k, j, i = np.meshgrid(np.arange(nz + 1), np.arange(ny + 1), np.arange(nx + 1), indexing="ij")
        return np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)

    @cached_property
    def node_coords(self) -> np.ndarray:
        return self.origin + self.node_ijk * self.h

    @cached_property
    def element_ijk(self) -> np.ndarray:
        nx, ny, nz = self.divisions
        k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        return np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)

    @cached_property
    def element_nodes(self) -> np.ndarray:
        ijk = self.element_ijk
        cols = [self.node_index(*(ijk + _BITS[a]).T) for a in range(8)]
        return np.stack(cols, axis=1)

    @cached_property
    def element_edges(self) -> np.ndarray:
        nx, ny, nz = self.divisions
        ox = 0
        oy, oz = self.edge_block_sizes[0], self.edge_block_sizes[0] + self.edge_block_sizes[1]
        i, j, k = self.element_ijk.T
        out = np.empty((self.n_elements, 12), dtype=np.int64)
        for b1 in (0, 1):
            for b2 in (0, 1):
                out[:, b1 + 2 * b2] = ox + i + nx * ((j + b1) + (ny + 1) * (k + b2))
        for b0 in (0, 1):
            for b2 in (0, 1):
                out[:, 4 + b0 + 2 * b2] = oy + (i + b0) + (nx + 1) * (j + ny * (k + b2))
        for b0 in (0, 1):
            for b1 in (0, 1):
                out[:, 8 + b0 + 2 * b1] = oz + (i + b0) + (nx + 1) * ((j + b1) + (ny + 1) * k)
        return out

    @cached_property
    def _edge_data(self):
        """(edge_nodes, axis, lower-node ijk) per edge."""
        nx, ny, nz = self.divisions
        blocks = []
        for axis, shape in enumerate([(nx, ny + 1, nz + 1), (nx + 1, ny, nz + 1), (nx + 1, ny + 1, nz)]):
            k, j, i = np.meshgrid(np.arange(shape[2]), np.arange(shape[1]), np.arange(shape[0]), indexing="ij")
            ijk = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
            step = np.zeros(3, dtype=int)
            step[axis] = 1
            a = self.node_index(*ijk.T)
            b = self.node_index(*(ijk + step).T)
            blocks.append((np.stack([a, b], axis=1), np.full(len(a), axis), ijk))
        nodes = np.concatenate([b[0] for b in blocks])
        axes = np.concatenate([b[1] for b in blocks])
        ijk = np.concatenate([b[2] for b in blocks])
        return nodes, axes, ijk

    @property
    def edge_nodes(self) -> np.ndarray:
        return self._edge_data[0]

    @property
    def edge_axis(self) -> np.ndarray:
        return self._edge_data[1]

    @cached_property
    def edge_midpoints(self) -> np.ndarray:
        return 0.5 * (self.node_coords[self.edge_nodes[:, 0]] + self.node_coords[self.edge_nodes[:, 1]])

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        ijk = self.node_ijk
        n = np.array(self.divisions)
        return np.any((ijk == 0) | (ijk == n), axis=1)

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        _, axes, ijk = self._edge_data
        n = np.array(self.divisions)
        on = (ijk == 0) | (ijk == n)
        # an edge lies in the boundary if it sits on a face normal to one of the other two axes
        mask = np.zeros(len(axes), dtype=bool)
        for d in range(3):
            mask |= on[:, d] & (axes != d)
        return mask

    @cached_property
    def gradient_matrix(self) -> sp.csr_matrix:
        """Discrete gradient mapping nodal Q1 dofs to edge dofs (exact)."""
        en = self.edge_nodes
        ne = len(en)
        rows = np.repeat(np.arange(ne), 2)
        cols = en.ravel()
        vals = np.tile([-1.0, 1.0], ne)
        return sp.csr_matrix((vals, (rows, cols)), shape=(ne, self.n_nodes))

    @cached_property
    def element_centers(self) -> np.ndarray:
        return self.origin + (self.element_ijk + 0.5) * self.h

    @cached_property
    def quadrature_points(self) -> np.ndarray:
        """Physical Gauss points, shape (n_elements, 8, 3)."""
        corner = self.origin + self.element_ijk * self.h
        return corner[:, None, :] + QUAD_REF[None, :, :] * self.h

    @cached_property
    def quad_weights(self) -> np.ndarray:
        return QUAD_WEIGHTS * self.element_volume

    @cached_property
    def q1_at_quad(self):
        return q1_basis(QUAD_REF, self.h)

    @cached_property
    def edge_at_quad(self):
        return edge_basis(QUAD_REF, self.h)

    def locate(self, points: np.ndarray, tol: float = 1e-12):
        """Element index and reference coordinates of each point in the closed box."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = (pts - self.origin) / self.h
        n = np.array(self.divisions)
        slack = tol * np.maximum(1.0, n)
        if np.any(rel < -slack) or np.any(rel > n + slack):
            bad = np.where(np.any((rel < -slack) | (rel > n + slack), axis=1))[0][0]
            raise OutOfDomainError(f"point {pts[bad].tolist()} lies outside {self!r}")
        idx = np.clip(np.floor(rel).astype(np.int64), 0, n - 1)
        ref = np.clip(rel - idx, 0.0, 1.0)
        elem = idx[:, 0] + n[0] * (idx[:, 1] + n[1] * idx[:, 2])
        return elem, ref


def build_box_mesh(origin, extents, divisions) -> BoxMesh:
    return BoxMesh(origin, extents, divisions)


def unit_cube_mesh(n: int) -> BoxMesh:
    return BoxMesh((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (n, n, n))


@dataclass(frozen=True)
class ScalarField:
    mesh: BoxMesh
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != self.mesh.n_nodes:
            raise InvalidArgumentError(f"expected {self.mesh.n_nodes} nodal values, got {len(self.values)}")


@dataclass(frozen=True)
class EdgeField:
    mesh: BoxMesh
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != self.mesh.n_edges:
            raise InvalidArgumentError(f"expected {self.mesh.n_edges} edge values, got {len(self.values)}")


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------

def _restriction(mask_free: np.ndarray) -> sp.csr_matrix:
    free = np.flatnonzero(mask_free)
    return sp.csr_matrix((np.ones(len(free)), (free, np.arange(len(free)))), shape=(len(mask_free), len(free)))


def periodic_map(mesh: BoxMesh) -> np.ndarray:
    """Representative periodic dof for every node (opposite faces identified)."""
    nx, ny, nz = mesh.divisions
    i, j, k = mesh.node_ijk.T
    return (i % nx) + nx * ((j % ny) + ny * (k % nz))


def prolongation(mesh: BoxMesh, space: str, boundary: str) -> sp.csr_matrix:
    """Matrix mapping free dofs to full-space dofs for a boundary treatment."""
    n = mesh.n_nodes if space == "nodal" else mesh.n_edges
    if boundary in (None, "none"):
        return sp.identity(n, format="csr")
    if space == "nodal" and boundary == "dirichlet-zero":
        return _restriction(~mesh.boundary_nodes)
    if space == "edge" and boundary == "tangential-zero":
        return _restriction(~mesh.boundary_edges)
    if space == "nodal" and boundary in ("periodic", "periodic-pinned"):
        rep = periodic_map(mesh)
        m = int(np.prod(mesh.divisions))
        P = sp.csr_matrix((np.ones(n), (np.arange(n), rep)), shape=(n, m))
        if boundary == "periodic-pinned":
            P = P[:, 1:].tocsr()
        return P
    raise InvalidArgumentError(f"unsupported boundary {boundary!r} for {space} space")


@dataclass(frozen=True)
class SparseSystem:
    """Assembled full-space matrix with a constraint given by a prolongation.

    The solved problem is ``P^T A P y = P^T b`` with solution ``x = P y``.
    ``kind`` selects the Krylov method: ``spd`` (CG), ``indefinite``
    (MINRES) or ``general`` (BiCGStab).
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    prolongation: sp.csr_matrix
    kind: str = "spd"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def size(self) -> int:
        return self.prolongation.shape[1]

    @property
    def reduced_matrix(self) -> sp.csr_matrix:
        if "A" not in self._cache:
            P = self.prolongation
            self._cache["A"] = (P.T @ self.matrix @ P).tocsr()
        return self._cache["A"]

    def reduced_rhs(self, rhs=None) -> np.ndarray:
        b = self.rhs if rhs is None else rhs
        return self.prolongation.T @ b

    def with_rhs(self, rhs) -> "SparseSystem":
        out = SparseSystem(self.matrix, np.asarray(rhs), self.prolongation, self.kind)
        out._cache.update(self._cache)
        return out

    def expand(self, y) -> np.ndarray:
        return self.prolongation @ y


# ---------------------------------------------------------------------------
# Sampling helpers
# ---------------------------------------------------------------------------

def _first_bad_element(arr: np.ndarray) -> int:
    bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
    return int(np.flatnonzero(bad)[0])


def sample_tensor(sampler: Sampler, pts: np.ndarray) -> np.ndarray:
    """Evaluate a tensor sampler at points ``(..., 3)`` giving ``(..., 3, 3)``."""
    out = np.asarray(sampler(pts) if callable(sampler) else sampler, dtype=float)
    lead = pts.shape[:-1]
    if out.shape == () or out.shape == lead:
        if not np.all(np.isfinite(out)):
            out = np.broadcast_to(out, lead)
            e = int(np.flatnonzero(~np.isfinite(out.reshape(out.shape[0], -1)).all(axis=1))[0])
            raise AssemblyError(f"non-finite coefficient in element {e}", element=e)
        out = out[..., None, None] * np.eye(3)
    out = np.broadcast_to(out, lead + (3, 3))
    if not np.all(np.isfinite(out)):
        e = _first_bad_element(out)
        raise AssemblyError(f"non-finite coefficient in element {e}", element=e)
    return out


def sample_scalar(sampler: Sampler, pts: np.ndarray, dtype=float) -> np.ndarray:
    out = np.asarray(sampler(pts) if callable(sampler) else sampler, dtype=dtype)
    out = np.broadcast_to(out, pts.shape[:-1])
    if not np.all(np.isfinite(out)):
        e = _first_bad_element(out)
        raise AssemblyError(f"non-finite coefficient in element {e}", element=e)
    return out


def _scatter_matrix(local: np.ndarray, dofs: np.ndarray, n: int) -> sp.csr_matrix:
    nl = dofs.shape[1]
    rows = np.repeat(dofs, nl, axis=1).ravel()
    cols = np.tile(dofs, (1, nl)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _scatter_vector(local: np.ndarray, dofs: np.ndarray, n: int) -> np.ndarray:
    if np.iscomplexobj(local):
        return _scatter_vector(local.real, dofs, n) + 1j * _scatter_vector(local.imag, dofs, n)
    return np.bincount(dofs.ravel(), weights=local.ravel(), minlength=n)


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def assemble_scalar(mesh: BoxMesh, coefficient_sampler: Sampler, reaction_sampler: Sampler | None = None,
                    boundary: str = "dirichlet-zero") -> SparseSystem:
    """Q1 stiffness ``(c grad u, grad v) + (r u, v)`` with a zero right-hand side."""
    pts = mesh.quadrature_points
    C = sample_tensor(coefficient_sampler, pts)
    N, G = mesh.q1_at_quad
    w = mesh.quad_weights
    Ke = np.einsum("qai,eqij,qbj,q->eab", G, C, G, w, optimize=True)
    if reaction_sampler is not None:
        r = sample_scalar(reaction_sampler, pts)
        Ke = Ke + np.einsum("qa,eq,qb,q->eab", N, r, N, w, optimize=True)
    A = _scatter_matrix(Ke, mesh.element_nodes, mesh.n_nodes)
    return SparseSystem(A, np.zeros(mesh.n_nodes), prolongation(mesh, "nodal", boundary), "spd")


def assemble_curl_curl(mesh: BoxMesh, inv_coeff_sampler: Sampler, boundary: str = "tangential-zero") -> SparseSystem:
    """Edge-element ``(c curl u, curl v)``; ``c`` is the inverse coefficient."""
    C = sample_tensor(inv_coeff_sampler, mesh.quadrature_points)
    _, Cu = mesh.edge_at_quad
    Ke = np.einsum("qai,eqij,qbj,q->eab", Cu, C, Cu, mesh.quad_weights, optimize=True)
    A = _scatter_matrix(Ke, mesh.element_edges, mesh.n_edges)
    return SparseSystem(A, np.zeros(mesh.n_edges), prolongation(mesh, "edge", boundary), "spd")


def assemble_mass(mesh: BoxMesh, space: str = "nodal", weight_sampler: Sampler = 1.0,
                  boundary: str = "none") -> SparseSystem:
    """Weighted L2 mass matrix in the nodal or edge space."""
    pts = mesh.quadrature_points
    w = mesh.quad_weights
    if space == "nodal":
        r = sample_scalar(weight_sampler, pts)
        N, _ = mesh.q1_at_quad
        Me = np.einsum("qa,eq,qb,q->eab", N, r, N, w, optimize=True)
        A = _scatter_matrix(Me, mesh.element_nodes, mesh.n_nodes)
    elif space == "edge":
        C = sample_tensor(weight_sampler, pts)
        V, _ = mesh.edge_at_quad
        Me = np.einsum("qai,eqij,qbj,q->eab", V, C, V, w, optimize=True)
        A = _scatter_matrix(Me, mesh.element_edges, mesh.n_edges)
    else:
        raise InvalidArgumentError(f"unknown space {space!r}")
    return SparseSystem(A, np.zeros(A.shape[0]), prolongation(mesh, space, boundary), "spd")


def saddle_point_system(curl_system: SparseSystem, edge_mass: sp.spmatrix, mesh: BoxMesh) -> SparseSystem:
    """Block system ``[[K, B], [B^T, 0]]`` enforcing ``(u, grad q) = 0``.

    The multiplier ``q`` is nodal with zero trace, so ``grad q`` is a
    tangential-zero edge field. The returned system works directly in the
    reduced (free) coordinates: edge unknowns first, then multipliers.
    """
    Pe = curl_system.prolongation
    Pn = prolongation(mesh, "nodal", "dirichlet-zero")
    K = curl_system.reduced_matrix
    B = (Pe.T @ edge_mass @ mesh.gradient_matrix @ Pn).tocsr()
    A = sp.bmat([[K, B], [B.T, None]], format="csr")
    n = A.shape[0]
    return SparseSystem(A, np.zeros(n), sp.identity(n, format="csr"), "indefinite")


# ---------------------------------------------------------------------------
# Field evaluation at quadrature points and load vectors
# ---------------------------------------------------------------------------

def nodal_at_quad(mesh: BoxMesh, values: np.ndarray) -> np.ndarray:
    N, _ = mesh.q1_at_quad
    return values[mesh.element_nodes] @ N.T


def nodal_grad_at_quad(mesh: BoxMesh, values: np.ndarray) -> np.ndarray:
    _, G = mesh.q1_at_quad
    return np.einsum("ea,qai->eqi", values[mesh.element_nodes], G)


def edge_at_quad(mesh: BoxMesh, values: np.ndarray) -> np.ndarray:
    V, _ = mesh.edge_at_quad
    return np.einsum("ea,qai->eqi", values[mesh.element_edges], V)


def edge_curl_at_quad(mesh: BoxMesh, values: np.ndarray) -> np.ndarray:
    _, Cu = mesh.edge_at_quad
    return np.einsum("ea,qai->eqi", values[mesh.element_edges], Cu)


def nodal_load(mesh: BoxMesh, f_q: np.ndarray) -> np.ndarray:
    """``(f, v)`` for every nodal basis function; ``f_q`` has shape (ne, 8)."""
    N, _ = mesh.q1_at_quad
    local = np.einsum("eq,qa,q->ea", f_q, N, mesh.quad_weights)
    return _scatter_vector(local, mesh.element_nodes, mesh.n_nodes)


def nodal_grad_load(mesh: BoxMesh, g_q: np.ndarray) -> np.ndarray:
    """``(g, grad v)``; ``g_q`` has shape (ne, 8, 3)."""
    _, G = mesh.q1_at_quad
    local = np.einsum("eqi,qai,q->ea", g_q, G, mesh.quad_weights)
    return _scatter_vector(local, mesh.element_nodes, mesh.n_nodes)


def edge_load(mesh: BoxMesh, g_q: np.ndarray) -> np.ndarray:
    """``(g, w)`` for every edge basis function."""
    V, _ = mesh.edge_at_quad
    local = np.einsum("eqi,qai,q->ea", g_q, V, mesh.quad_weights)
    return _scatter_vector(local, mesh.element_edges, mesh.n_edges)


def edge_curl_load(mesh: BoxMesh, g_q: np.ndarray) -> np.ndarray:
    """``(g, curl w)`` for every edge basis function."""
    _, Cu = mesh.edge_at_quad
    local = np.einsum("eqi,qai,q->ea", g_q, Cu, mesh.quad_weights)
    return _scatter_vector(local, mesh.element_edges, mesh.n_edges)


def integrate(mesh: BoxMesh, f_q: np.ndarray):
    """Quadrature of a per-element, per-Gauss-point integrand over the mesh."""
    return np.tensordot(f_q, mesh.quad_weights, axes=([1], [0])).sum(axis=0)


def zero_mean(mesh: BoxMesh, values: np.ndarray) -> np.ndarray:
    mean = integrate(mesh, nodal_at_quad(mesh, values)) / mesh.volume
    return values - mean


# ---------------------------------------------------------------------------
# Linear solvers
# ---------------------------------------------------------------------------

def _jacobi(A: sp.csr_matrix, kind: str):
    d = A.diagonal()
    if kind == "indefinite":
        # zero diagonal marks multiplier rows: use the diagonal of B^T D^-1 B
        prim = np.abs(d) > 0
        if not prim.all():
            B = A[prim][:, ~prim]
            schur = np.asarray(B.multiply(B).T @ (1.0 / np.abs(d[prim]))).ravel()
            d = d.astype(float).copy()
            d[~prim] = np.where(schur > 0, schur, 1.0)
        d = np.abs(d)
    d = np.where(np.abs(d) > 0, d, 1.0)
    inv = 1.0 / d
    return spla.LinearOperator(A.shape, matvec=lambda x: inv * x, dtype=A.dtype)


def solve_reduced(A: sp.spmatrix, b: np.ndarray, kind: str = "spd", tolerance: float = 1e-10,
                  method: str = "auto", maxiter: int | None = None, x0=None, precondition: bool = True,
                  restarts: int = 3) -> np.ndarray:
    """Solve ``A x = b`` to a true relative residual of ``tolerance``."""
    n = A.shape[0]
    complex_ = np.iscomplexobj(A.data) or np.iscomplexobj(b)
    dtype = complex if complex_ else float
    if n == 0:
        return np.zeros(0, dtype=dtype)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n, dtype=dtype)
    if method == "auto":
        method = "bicgstab" if complex_ or kind == "general" else ("minres" if kind == "indefinite" else "cg")
    if method == "direct":
        x = spla.spsolve(A.tocsc(), b)
        res = np.linalg.norm(b - A @ x) / bnorm
        if not np.isfinite(res) or res > tolerance:
            raise ConvergenceError(f"direct solve residual {res:.3e} above {tolerance:.1e}", res)
        return x
    maxiter = 10 * n if maxiter is None else maxiter
    M = _jacobi(A, kind) if precondition else None
    x = None if x0 is None else np.asarray(x0, dtype=dtype)
    res = np.inf
    for _ in range(restarts + 1):
        if method == "cg":
            x, _info = spla.cg(A, b, x0=x, rtol=tolerance * 0.5, maxiter=maxiter, M=M)
        elif method == "minres":
            x, _info = spla.minres(A, b, x0=x, rtol=tolerance * 0.1, maxiter=maxiter, M=M)
        elif method == "bicgstab":
            x, _info = spla.bicgstab(A, b, x0=x, rtol=tolerance * 0.5, maxiter=maxiter, M=M)
        else:
            raise InvalidArgumentError(f"unknown method {method!r}")
        res = np.linalg.norm(b - A @ x) / bnorm
        if not np.isfinite(res):
            break
        if res <= tolerance:
            return x
    raise ConvergenceError(f"{method} failed: relative residual {res:.3e} > {tolerance:.1e} (dim {n})", res)


def solve(system: SparseSystem, tolerance: float = 1e-10, method: str = "auto", maxiter: int | None = None,
          x0=None, precondition: bool = True) -> np.ndarray:
    """Solve a constrained system; returns the full-space solution vector."""
    A = system.reduced_matrix
    b = system.reduced_rhs()
    # constraint reduction can leave pure round-off from a consistent zero load
    if np.linalg.norm(b) <= 1e-14 * np.linalg.norm(system.rhs):
        return system.expand(np.zeros(A.shape[0], dtype=np.result_type(A.dtype, b.dtype)))
    y0 = None
    if x0 is not None:
        y0 = x0 if len(x0) == A.shape[0] else system.prolongation.T @ x0
    y = solve_reduced(A, b, system.kind, tolerance, method, maxiter, y0, precondition)
    return system.expand(y)


# ---------------------------------------------------------------------------
# Point evaluation
# ---------------------------------------------------------------------------

def _points(point):
    p = np.asarray(point, dtype=float)
    return np.atleast_2d(p), p.ndim == 1


def interpolate(field: ScalarField | EdgeField, point):
    """Evaluate a nodal (trilinear) or edge (vector) field at point(s)."""
    pts, single = _points(point)
    mesh = field.mesh
    elem, ref = mesh.locate(pts)
    if isinstance(field, ScalarField):
        N, _ = q1_basis(ref, mesh.h)
        out = np.einsum("pa,pa->p", field.values[mesh.element_nodes[elem]], N)
    else:
        V, _ = edge_basis(ref, mesh.h)
        out = np.einsum("pa,pai->pi", field.values[mesh.element_edges[elem]], V)
    return out[0] if single else out


def interpolate_gradient(field: ScalarField, point):
    pts, single = _points(point)
    mesh = field.mesh
    elem, ref = mesh.locate(pts)
    _, G = q1_basis(ref, mesh.h)
    out = np.einsum("pa,pai->pi", field.values[mesh.element_nodes[elem]], G)
    return out[0] if single else out


def interpolate_curl(field: EdgeField, point):
    pts, single = _points(point)
    mesh = field.mesh
    elem, ref = mesh.locate(pts)
    _, Cu = edge_basis(ref, mesh.h)
    out = np.einsum("pa,pai->pi", field.values[mesh.element_edges[elem]], Cu)
    return out[0] if single else out


def edge_interpolant(mesh: BoxMesh, func: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Edge dofs (line integrals, 2-point Gauss) of a vector function ``(n,3)->(n,3)``."""
    a = mesh.node_coords[mesh.edge_nodes[:, 0]]
    b = mesh.node_coords[mesh.edge_nodes[:, 1]]
    t = b - a
    total = np.zeros(mesh.n_edges)
    for g in GAUSS_1D:
        total += 0.5 * np.einsum("ei,ei->e", func(a + g * t), t)
    return total


def edge_values_from_samples(mesh: BoxMesh, samples_a: np.ndarray, samples_b: np.ndarray) -> np.ndarray:
    """Edge dofs from vector samples at the two Gauss points of every edge."""
    t = mesh.node_coords[mesh.edge_nodes[:, 1]] - mesh.node_coords[mesh.edge_nodes[:, 0]]
    return 0.5 * (np.einsum("ei,ei->e", samples_a, t) + np.einsum("ei,ei->e", samples_b, t))


def edge_gauss_points(mesh: BoxMesh):
    a = mesh.node_coords[mesh.edge_nodes[:, 0]]
    t = mesh.node_coords[mesh.edge_nodes[:, 1]] - a
    return a + GAUSS_1D[0] * t, a + GAUSS_1D[1] * t


def _average_to_nodes(mesh: BoxMesh, per_element: np.ndarray) -> np.ndarray:
    out = np.zeros((mesh.n_nodes,) + per_element.shape[1:])
    count = np.bincount(mesh.element_nodes.ravel(), minlength=mesh.n_nodes).astype(float)
    flat = per_element.reshape(per_element.shape[0], -1)
    acc = np.stack([np.bincount(mesh.element_nodes.ravel(), weights=np.repeat(flat[:, c], 8),
                                minlength=mesh.n_nodes) for c in range(flat.shape[1])], axis=1)
    out = acc / count[:, None]
    return out.reshape((mesh.n_nodes,) + per_element.shape[1:])


def edge_to_nodal(mesh: BoxMesh, values: np.ndarray) -> np.ndarray:
    """Nodal 3-vectors by volume-weighted averaging of element-centre evaluations."""
    V, _ = edge_basis(np.full((1, 3), 0.5), mesh.h)
    centre = values[mesh.element_edges] @ V[0]
    return _average_to_nodes(mesh, centre)


def edge_curl_to_nodal(mesh: BoxMesh, values: np.ndarray) -> np.ndarray:
    """Nodal 3-vectors of the curl, averaged from element centres."""
    _, Cu = edge_basis(np.full((1, 3), 0.5), mesh.h)
    centre = values[mesh.element_edges] @ Cu[0]
    return _average_to_nodes(mesh, centre)
