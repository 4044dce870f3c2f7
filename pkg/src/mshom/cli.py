"""``mshom`` command line: cells -> homogenize -> run -> reference -> reconstruct -> compare."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import cell_problems as cp
from . import coupled_solver as cs
from . import effective as ef
from . import metrics_io as mio
from . import reference_solver as rs
from .errors import (ConfigError, ConvergenceError, DofCapError, InvalidArgumentError, MisalignmentError,
                     MshomError, OutputError, StencilError)
from .media import SourceSpec, XcSpec

log = logging.getLogger("mshom")

STAGES = ("cells", "homogenize", "run", "reference", "reconstruct", "compare")
CELLS_FILE = "cells.bin"
TENSORS_FILE = "tensors.json"
HOM_FILE = "homogenized.npz"
REF_FILE = "reference.npz"
RECON_FILE = "reconstruction.npz"
TABLE_CSV = "error_table.csv"
MANIFEST = "manifest.json"

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_INTERNAL = 0, 1, 2, 3


class Pipeline:
    """Stages reading and writing their artifacts in one output directory."""

    def __init__(self, cfg: dict, out: Path, cache: Path | None, orders):
        self.cfg = cfg
        self.out = out
        self.cache = cache
        self.orders = tuple(orders)
        self.medium = mio.medium_from_config(cfg)
        s = cfg["solver"]
        self.params = cs.SolverParams(dt=s["dt"], T=s["T"], outer_tol=s["outer_tol"], inner_tol=s["inner_tol"],
                                      outer_max=s["outer_max"], inner_max=s["inner_max"],
                                      mixing_alpha=s["mixing_alpha"])
        self.source = SourceSpec(cfg["source"]["formula"], cfg["source"]["amplitude"])
        self.timings: dict = {}
        self.manifest_path = out / MANIFEST

    # ----- helpers -----
    def _manifest(self) -> dict:
        import json
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text(encoding="utf-8"))
        return {}

    def _update_manifest(self, **items):
        m = self._manifest()
        m.update(items)
        m["config"] = self.cfg
        m.setdefault("timings", {}).update(self.timings)
        m["version"] = __version__
        mio.write_manifest(m, self.manifest_path)

    def _need(self, name: str) -> Path:
        p = self.out / name
        if not p.exists():
            raise ConfigError(f"missing artifact {p}; run the earlier stage first")
        return p

    def _xc(self):
        return XcSpec(self.cfg["xc"])

    @property
    def medium_hash(self) -> str:
        return cp.medium_hash(self.medium, self.cfg["cell_divisions"], {"source": "periodic"})

    # ----- stages -----
    def cells(self):
        target = self.out / CELLS_FILE
        cached = self.cache / f"cells_{self.medium_hash}.bin" if self.cache else None
        if cached is not None and cached.exists():
            log.info("cells: reusing cached snapshot %s", cached)
            cells = cp.read_cell_snapshot(cached)
            if cells.medium_hash != self.medium_hash:
                raise ConfigError(f"cached snapshot {cached} has a different medium hash")
            self.out.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(cached, target)
        else:
            cells = cp.solve_all(self.medium, self.cfg["cell_divisions"])
            cp.write_cell_snapshot(cells, target)
            if cached is not None:
                cached.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(target, cached)
        self._write_tensors(cells)
        return cells

    def _write_tensors(self, cells):
        tensors = ef.homogenize_all(self.medium, cells)
        cert = ef.certify(tensors, self.medium)
        mio.write_json({"tensors": tensors.to_dict(), "certificate": cert.to_dict(), "ok": cert.ok,
                        "medium_hash": self.medium_hash}, self.out / TENSORS_FILE)
        self._update_manifest(tensors=tensors.to_dict(), certificate=cert.to_dict(), medium_hash=self.medium_hash)
        if not cert.ok:
            names = ", ".join(c.name for c in cert.failures())
            raise ConvergenceError(f"effective tensors failed certification: {names}")
        return tensors

    def homogenize(self):
        cells = cp.read_cell_snapshot(self._need(CELLS_FILE))
        return self._write_tensors(cells)

    def _tensors(self):
        import json
        d = json.loads(self._need(TENSORS_FILE).read_text(encoding="utf-8"))
        return ef.EffectiveTensors.from_dict(d["tensors"])

    @staticmethod
    def _iterations(traj) -> dict:
        return {"outer": [d.outer_iterations for d in traj.diagnostics],
                "inner_max": [max(d.inner_iterations) for d in traj.diagnostics],
                "gauss_residual": [d.gauss_residual for d in traj.diagnostics]}

    def run(self):
        traj = cs.run(self.medium, self._tensors(), self.params, self._xc(), self.cfg["coarse_divisions"],
                      self.source)
        traj.save(self.out / HOM_FILE)
        mio.write_snapshots(traj, self.out / "run", self.cfg["output_stride"])
        self._update_manifest(homogenized_iterations=self._iterations(traj),
                              homogenized_ground_energy=traj.meta["ground_energy"])
        return traj

    def reference(self):
        traj = rs.run_reference(self.medium, self.cfg["fine_divisions_per_cell"], self.params, self._xc(),
                                self.source, dof_cap=self.cfg["dof_cap"])
        traj.save(self.out / REF_FILE)
        mio.write_snapshots(traj, self.out / "reference", self.cfg["output_stride"])
        self._update_manifest(reference_iterations=self._iterations(traj),
                              reference_ground_energy=traj.meta["ground_energy"])
        return traj

    def reconstruct(self):
        cells = cp.read_cell_snapshot(self._need(CELLS_FILE))
        hom = cs.HomogenizedTrajectory.load(self._need(HOM_FILE))
        fine = rs.reference_mesh(self.medium, self.cfg["fine_divisions_per_cell"], self.cfg["dof_cap"])
        stride = self.cfg["error_stride"]
        rec = mio.reconstruction_series(hom, cells, self.medium, fine, (0, 1, 2), stride)
        arrays = {f"{k}_{o}": v for o, d in rec.items() for k, v in d.items()}
        np.savez_compressed(self.out / RECON_FILE, stride=stride, **arrays)
        if self.cfg["output_stride"] > 0:
            self._write_ms_snapshots(hom, cells, fine)
        self._update_manifest(reconstruction={"stride": stride, "orders": list(self.orders),
                                              "edge_recovery": "element-centre averaging to nodes",
                                              "difference_quotients": "central inside, third-order one-sided ends"})
        return rec

    def _write_ms_snapshots(self, hom, cells, fine):
        from .reconstruction import reconstruct
        for o in self.orders:
            for n in range(0, len(hom), self.cfg["output_stride"]):
                f = reconstruct(hom, cells, self.medium, o, fine, n)
                mio.write_csv(self.out / "reconstruct" / f"ms{o}_psi_{n}.csv", "psi", n, f.t, f.psi_ms)
                mio.write_vtk(self.out / "reconstruct" / f"ms{o}_EH_{n}.vtk", fine, {"E": f.E_ms, "H": f.H_ms})

    def compare(self):
        ref = rs.ReferenceTrajectory.load(self._need(REF_FILE))
        with np.load(self._need(RECON_FILE)) as z:
            stride = int(z["stride"])
            rec = {o: {"rho": z[f"rho_{o}"], "E": z[f"E_{o}"]} for o in (0, 1, 2)}
        table = mio.error_table(ref, rec, self.params.dt, self.cfg["case"], stride=stride)
        lines = ["case,column,e0,e1,e2"]
        for col in mio.COLUMNS:
            lines.append(",".join([self.cfg["case"], col] + [repr(v) for v in table.rows[self.cfg["case"]][col]]))
        try:
            (self.out / TABLE_CSV).write_text("\n".join(lines) + "\n", encoding="utf-8")
        except OSError as e:
            raise OutputError(f"cannot write {self.out / TABLE_CSV}: {e}") from e
        self._update_manifest(error_table=table.to_dict(), ordering=table.ordered(self.cfg["case"]))
        print(table.format())
        return table

    def stage(self, name: str):
        t = time.perf_counter()
        try:
            return getattr(self, name)()
        finally:
            self.timings[name] = time.perf_counter() - t


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mshom", description="Multiscale Maxwell-Schroedinger homogenization pipeline.")
    p.add_argument("--version", action="version", version=f"mshom {__version__}")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(STAGES + ("all",)) + "}")
    for name in STAGES + ("all",):
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--out", default="mshom_out", help="output directory (default: mshom_out)")
        s.add_argument("--cache", help="directory of cached cell snapshots keyed by medium hash")
        s.add_argument("--order", type=int, choices=(0, 1, 2), action="append",
                       help="reconstruction order(s) for snapshot output (default: all)")
        s.add_argument("--verbose", action="store_true")
    return p


@contextlib.contextmanager
def _thread_limit():
    n = os.environ.get("MSHOM_THREADS")
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=int(n)):
        yield


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    if not args.config:
        parser.print_usage(sys.stderr)
        print(f"mshom {args.command}: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = "config"
    try:
        cfg = mio.load_config(args.config)
        orders = args.order or cfg["orders"]
        pipe = Pipeline(cfg, Path(args.out), Path(args.cache) if args.cache else None, orders)
        pipe.out.mkdir(parents=True, exist_ok=True)
        stages = STAGES if args.command == "all" else (args.command,)
        with _thread_limit():
            for stage in stages:
                log.info("stage %s", stage)
                pipe.stage(stage)
        pipe._update_manifest()
        return EXIT_OK
    except (ConfigError, InvalidArgumentError, MisalignmentError, DofCapError, StencilError, OutputError) as e:
        print(f"mshom: stage {stage} failed: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as e:
        hist = ", ".join(f"{r:.3e}" for r in e.history[-5:]) if e.history else "n/a"
        res = f"{e.residual:.3e}" if e.residual is not None else "n/a"
        print(f"mshom: stage {stage} failed to converge: {e} (residual {res}; last residuals {hist})",
              file=sys.stderr)
        return EXIT_CONVERGENCE
    except MshomError as e:
        print(f"mshom: stage {stage} failed: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as e:  # noqa: BLE001
        print(f"mshom: internal error in stage {stage}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
