"""Space-time error norms, run configuration, result manifest, CSV/VTK writers."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import mesh_fem as fem
from .errors import ConfigError, InvalidArgumentError, OutputError

NORMS = ("L2", "H1", "L2vec", "Hcurl")
COLUMNS = ("rho_L2", "rho_H1", "E_L2", "E_Hcurl")


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------

def norm_matrix(mesh: fem.BoxMesh, norm: str):
    """Gram matrix of a spatial norm with identity coefficients and no boundary constraint."""
    if norm == "L2":
        return fem.assemble_mass(mesh).matrix
    if norm == "H1":
        return fem.assemble_scalar(mesh, 1.0, boundary="none").matrix + fem.assemble_mass(mesh).matrix
    if norm == "L2vec":
        return fem.assemble_mass(mesh, "edge").matrix
    if norm == "Hcurl":
        return fem.assemble_curl_curl(mesh, 1.0, boundary="none").matrix + fem.assemble_mass(mesh, "edge").matrix
    raise InvalidArgumentError(f"unknown norm {norm!r}; expected one of {NORMS}")


def _series_values(series, mesh: fem.BoxMesh | None, norm: str):
    vals = []
    for item in series:
        if isinstance(item, (fem.ScalarField, fem.EdgeField)):
            if mesh is None:
                mesh = item.mesh
            elif not item.mesh.same_as(mesh):
                raise InvalidArgumentError("series fields live on mismatched meshes")
            vals.append(np.asarray(item.values))
        else:
            vals.append(np.asarray(item))
    if mesh is None:
        raise InvalidArgumentError("a mesh is needed for raw arrays")
    n = mesh.n_nodes if norm in ("L2", "H1") else mesh.n_edges
    for v in vals:
        if v.shape != (n,):
            raise InvalidArgumentError(f"field of shape {v.shape} does not match the mesh ({n} dofs)")
    return mesh, vals


def spatial_norms(series, norm: str, mesh: fem.BoxMesh | None = None, matrix=None) -> np.ndarray:
    mesh, vals = _series_values(series, mesh, norm)
    G = norm_matrix(mesh, norm) if matrix is None else matrix
    return np.array([np.sqrt(max(np.real(np.vdot(v, G @ v)), 0.0)) for v in vals])


def trapezoid_time(spatial: np.ndarray, dt: float) -> float:
    """sqrt of the trapezoidal time integral of squared spatial norms."""
    s2 = np.asarray(spatial, dtype=float) ** 2
    if len(s2) < 2:
        raise InvalidArgumentError("a time series needs at least two samples")
    if not dt > 0:
        raise InvalidArgumentError("dt must be positive")
    return float(np.sqrt(dt * (s2.sum() - 0.5 * (s2[0] + s2[-1]))))


def spacetime_norm(series, norm: str, dt: float, mesh: fem.BoxMesh | None = None, matrix=None) -> float:
    return trapezoid_time(spatial_norms(series, norm, mesh, matrix), dt)


# ---------------------------------------------------------------------------
# Error table
# ---------------------------------------------------------------------------

@dataclass
class ErrorTable:
    """Relative space-time errors; ``rows[case][column] = (e0, e1, e2)``."""

    rows: dict = field(default_factory=dict)

    def add(self, case: str, entries: dict):
        for col in COLUMNS:
            vals = entries[col]
            if any(not np.isfinite(v) or v < 0 for v in vals):
                raise InvalidArgumentError(f"invalid error entries for {case}/{col}: {vals}")
        self.rows[case] = {c: tuple(float(v) for v in entries[c]) for c in COLUMNS}

    def entries(self, case: str | None = None) -> list:
        cases = [case] if case else list(self.rows)
        return [v for c in cases for col in COLUMNS for v in self.rows[c][col]]

    def ordered(self, case: str) -> dict:
        """Per column: does e2 < e1 < e0 hold?"""
        return {col: (lambda e: e[2] < e[1] < e[0])(self.rows[case][col]) for col in COLUMNS}

    def to_dict(self) -> dict:
        return {c: {col: list(v) for col, v in r.items()} for c, r in self.rows.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorTable":
        t = cls()
        for c, r in d.items():
            t.add(c, r)
        return t

    def format(self) -> str:
        lines = ["case," + ",".join(f"{col}_e{i}" for col in COLUMNS for i in range(3))]
        for c, r in self.rows.items():
            lines.append(c + "," + ",".join(f"{v:.6e}" for col in COLUMNS for v in r[col]))
        return "\n".join(lines)


def reconstruction_series(traj, cells, medium, fine: fem.BoxMesh, orders=(0, 1, 2), stride: int = 1) -> dict:
    """Reconstructed density (fine nodes) and electric edge dofs (fine edges) per order and step."""
    from .reconstruction import ExpansionPlan

    ga, gb = fem.edge_gauss_points(fine)
    both = np.vstack([ga, gb])
    ne = fine.n_edges
    nodes = ExpansionPlan(traj.mesh, cells, medium.epsilon, fine.node_coords)
    edges = ExpansionPlan(traj.mesh, cells, medium.epsilon, both)
    out = {o: {"rho": [], "E": []} for o in orders}
    for n in range(0, len(traj), stride):
        s = traj[n]
        psi0 = np.asarray(s.psi, dtype=complex)
        base = fem.interpolate(fem.EdgeField(traj.mesh, s.E), both)
        for o in orders:
            out[o]["rho"].append(medium.N * np.abs(nodes.scalar(psi0, o)) ** 2)
            Ev = edges.electric(s.E, o, base=base)
            out[o]["E"].append(fem.edge_values_from_samples(fine, Ev[:ne], Ev[ne:]))
    return {o: {k: np.array(v) for k, v in d.items()} for o, d in out.items()}


def error_table(reference, recon: dict, dt: float, case: str = "run", table: ErrorTable | None = None,
                stride: int = 1) -> ErrorTable:
    """Relative errors of orders 0/1/2 against the reference, in the four norm columns."""
    mesh = reference.mesh
    ref_rho = reference.series("rho")[::stride]
    ref_E = reference.series("E")[::stride]
    step = dt * stride
    entries = {}
    for col, ref, key, norm in (("rho_L2", ref_rho, "rho", "L2"), ("rho_H1", ref_rho, "rho", "H1"),
                                ("E_L2", ref_E, "E", "L2vec"), ("E_Hcurl", ref_E, "E", "Hcurl")):
        G = norm_matrix(mesh, norm)
        den = spacetime_norm(ref, norm, step, mesh, G)
        if den <= 0:
            raise InvalidArgumentError(f"reference has zero {col} norm")
        vals = []
        for o in (0, 1, 2):
            rec = recon[o][key]
            if rec.shape != ref.shape:
                raise InvalidArgumentError(f"order-{o} {key} series shape {rec.shape} != reference {ref.shape}")
            vals.append(spacetime_norm(ref - rec, norm, step, mesh, G) / den)
        entries[col] = vals
    table = ErrorTable() if table is None else table
    table.add(case, entries)
    return table


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_TENSOR = {"oneOf": [{"type": "number", "exclusiveMinimum": 0},
                     {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
                     {"type": "array", "items": {"type": "array", "items": {"type": "number"},
                                                 "minItems": 3, "maxItems": 3}, "minItems": 3, "maxItems": 3}]}
_TRIPLE = {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "minItems": 3, "maxItems": 3}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["case"],
    "properties": {
        "case": {"type": "string"},
        "medium": {
            "type": "object", "additionalProperties": False,
            "properties": {"lower": _TRIPLE, "upper": _TRIPLE, "a_in": _TENSOR, "a_out": _TENSOR,
                           "eta_in": _TENSOR, "eta_out": _TENSOR, "mu_in": _TENSOR, "mu_out": _TENSOR,
                           "vc_in": {"type": "number"}, "vc_out": {"type": "number"}},
        },
        "epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "N": {"type": "number", "minimum": 0},
        "cell_divisions": {"type": "integer", "minimum": 2},
        "coarse_divisions": {"type": "integer", "minimum": 2},
        "fine_divisions_per_cell": {"type": "integer", "minimum": 2},
        "solver": {
            "type": "object", "additionalProperties": False,
            "properties": {"dt": {"type": "number", "exclusiveMinimum": 0},
                           "T": {"type": "number", "exclusiveMinimum": 0},
                           "outer_tol": {"type": "number", "exclusiveMinimum": 0},
                           "inner_tol": {"type": "number", "exclusiveMinimum": 0},
                           "outer_max": {"type": "integer", "minimum": 1},
                           "inner_max": {"type": "integer", "minimum": 1},
                           "mixing_alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
        },
        "xc": {"enum": ["none", "cube-root"]},
        "source": {
            "type": "object", "additionalProperties": False,
            "properties": {"formula": {"enum": ["cosine-ramp", "zero"]}, "amplitude": {"type": "number"}},
        },
        "output_stride": {"type": "integer", "minimum": 0},
        "error_stride": {"type": "integer", "minimum": 1},
        "dof_cap": {"type": "integer", "minimum": 1},
        "orders": {"type": "array", "items": {"enum": [0, 1, 2]}, "minItems": 1, "uniqueItems": True},
    },
}

DEFAULTS = {
    "epsilon": 0.25, "N": 10.0, "cell_divisions": 16, "coarse_divisions": 8, "fine_divisions_per_cell": 8,
    "solver": {"dt": 0.005, "T": 0.1, "outer_tol": 1e-6, "inner_tol": 1e-6, "outer_max": 30, "inner_max": 100,
               "mixing_alpha": 0.3},
    "xc": "none", "source": {"formula": "cosine-ramp", "amplitude": 1000.0}, "output_stride": 0,
    "error_stride": 1, "dof_cap": 2_000_000, "orders": [0, 1, 2], "medium": {},
}


def _with_defaults(raw: dict) -> dict:
    out = json.loads(json.dumps(DEFAULTS))
    for k, v in raw.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = v
    return out


def validate_config(raw: dict) -> dict:
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from None
    return _with_defaults(raw)


def load_config(path) -> dict:
    """Schema-validated config with defaults filled in."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return validate_config(raw)


def write_json(obj, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e


def write_config(config: dict, path) -> None:
    write_json(config, path)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"not serializable: {type(o).__name__}")


def write_manifest(results: dict, path) -> None:
    """Manifest: config echo, tensors, iteration counts, error table, timings (whatever is present)."""
    write_json(results, path)


def medium_from_config(cfg: dict):
    from .media import CASES, PeriodicMedium, case_medium, constant_medium

    case = cfg["case"]
    if case == "constant":
        base = constant_medium(cfg["epsilon"], cfg["N"])
    elif case in CASES:
        base = case_medium(case, cfg["epsilon"], cfg["N"])
    elif case == "custom":
        base = PeriodicMedium(epsilon=cfg["epsilon"], N=cfg["N"])
    else:
        raise ConfigError(f"unknown case {case!r}; expected constant, custom or one of {sorted(CASES)}")
    try:
        return base.replace(**cfg.get("medium", {})) if cfg.get("medium") else base
    except InvalidArgumentError as e:
        raise ConfigError(f"config error at medium: {e}") from None


# ---------------------------------------------------------------------------
# CSV / VTK
# ---------------------------------------------------------------------------

def write_csv(path, field_name: str, step: int, t: float, values: np.ndarray) -> None:
    """Rows ``field,step,t,index,value(s)``; complex values give real and imaginary columns."""
    values = np.asarray(values)
    if np.iscomplexobj(values):
        cols, data = ["real", "imag"], np.stack([values.real, values.imag], axis=-1)
    elif values.ndim == 1:
        cols, data = ["value"], values[:, None]
    else:
        cols, data = [f"value{c}" for c in range(values.shape[1])], values
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["field", "step", "t", "index"] + cols)
            for i, row in enumerate(data):
                w.writerow([field_name, step, repr(float(t)), i] + [repr(float(v)) for v in row])
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e


def read_csv(path):
    """Return ``(field, step, t, values)``; complex if the file has real/imag columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = list(r)
    data = np.array([[float(v) for v in row[4:]] for row in rows])
    if header[4:] == ["real", "imag"]:
        values = data[:, 0] + 1j * data[:, 1]
    elif header[4:] == ["value"]:
        values = data[:, 0]
    else:
        values = data
    return rows[0][0], int(rows[0][1]), float(rows[0][2]), values


def write_vtk(path, mesh: fem.BoxMesh, point_vectors: dict, point_scalars: dict | None = None,
              title: str = "mshom") -> None:
    """Legacy ASCII STRUCTURED_GRID file with nodal vector and scalar data."""
    nx, ny, nz = mesh.divisions
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET STRUCTURED_GRID",
             f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}", f"POINTS {mesh.n_nodes} double"]
    lines += [" ".join(repr(float(c)) for c in p) for p in mesh.node_coords]
    lines.append(f"POINT_DATA {mesh.n_nodes}")
    for name, v in point_vectors.items():
        lines.append(f"VECTORS {name} double")
        lines += [" ".join(repr(float(c)) for c in row) for row in np.asarray(v).reshape(-1, 3)]
    for name, v in (point_scalars or {}).items():
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [repr(float(x)) for x in np.asarray(v).ravel()]
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e


def read_vtk(path):
    """Parse a file written by :func:`write_vtk`; returns ``(dims, points, data)``."""
    tok = Path(path).read_text(encoding="utf-8").split("\n")
    dims = tuple(int(v) for v in tok[4].split()[1:])
    npts = int(tok[5].split()[1])
    points = np.array([[float(v) for v in tok[6 + i].split()] for i in range(npts)])
    data = {}
    i = 7 + npts
    while i < len(tok) and tok[i].strip():
        kind, name = tok[i].split()[:2]
        if kind == "VECTORS":
            data[name] = np.array([[float(v) for v in tok[i + 1 + j].split()] for j in range(npts)])
            i += 1 + npts
        else:
            data[name] = np.array([float(tok[i + 2 + j]) for j in range(npts)])
            i += 2 + npts
    return dims, points, data


def write_snapshots(traj, out_dir, stride: int, prefix: str = "") -> list:
    """CSV (psi, rho) and VTK (E, H, Jq) files every ``stride`` steps; returns the paths."""
    if stride <= 0:
        return []
    out_dir = Path(out_dir)
    mesh = traj.mesh
    paths = []
    for n in range(0, len(traj), stride):
        s = traj[n]
        for name, vals in (("psi", s.psi), ("rho", s.rho)):
            p = out_dir / f"{prefix}{name}_{n}.csv"
            write_csv(p, name, n, s.t, vals)
            paths.append(p)
        for name, vals in (("E", fem.edge_to_nodal(mesh, s.E)), ("H", s.H), ("Jq", s.Jq)):
            p = out_dir / f"{prefix}{name}_{n}.vtk"
            write_vtk(p, mesh, {name: vals}, title=f"{name} step {n} t={s.t!r}")
            paths.append(p)
    return paths
