"""Command line: ``hfscatter simulate|probe|invert-vint|invert-vext --config FILE``.

Exit status 0 on success, 1 for configuration or missing-input errors, 2 for
numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import platform
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, MissingInputError, Scenario, config_hash, dump_config, load_config
from .dynamics import OrbitalSet, pseudo_conformal_diagnostic
from .external import full_vext_pipeline, write_sinogram_csv
from .fieldio import sha256_file, write_fields, write_sidecar
from .interaction import (DEFAULT_LAMBDAS, PicardReconstructor, assemble_T, collect_slim,
                          vint_from_vhat, write_spectrum_csv)
from .probe import ProbeConfig, expansion_check, vhat_field, write_probe_csv
from .scattering import apply_S, solve_scattering_solution

log = logging.getLogger("hfscatter")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage
        self.cause = exc


class Run:
    """Output directory bookkeeping and the manifest."""

    def __init__(self, command: str, cfg: dict, out: Path, threads: int | None):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.files: list[Path] = []
        self.stages: dict[str, float] = {}
        self.diagnostics: dict = {}
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except (ConfigError, MissingInputError):
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise StageError(name, exc) from exc
        finally:
            self.stages[name] = time.perf_counter() - t0

    def write_manifest(self):
        cfg_path = self.path("config.yaml")
        cfg_path.write_text(dump_config(self.cfg))
        manifest = {
            "command": self.command,
            "config_hash": config_hash(self.cfg),
            "tool_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "threads": self.threads,
            "seed": self.cfg["seed"],
            "wall_time": self.stages,
            "diagnostics": self.diagnostics,
            "files": {str(p.relative_to(self.out)): sha256_file(p) for p in sorted(set(self.files))},
        }
        write_sidecar(self.out / "manifest.json", manifest)


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def cmd_simulate(sc: Scenario, run: Run):
    phi = sc.base_states()
    vi, ve, scat = sc.v_int, sc.v_ext, sc.scatter
    every = sc.cfg["simulate"]["sample_every"]
    with run.stage("trajectory"):
        traj = solve_scattering_solution(phi, vi, ve, scat, sample_every=every)
    with run.stage("scattering"):
        out = apply_S(phi, vi, ve, scat)
    with run.stage("write"):
        rows = []
        for k, (t, s) in enumerate(zip(traj.times, traj.states)):
            norms = s.norms()
            pc = pseudo_conformal_diagnostic(s, vi, ve) if t > 0 else float("nan")
            sup = np.abs(s.orbitals).reshape(s.count, -1).max(axis=1)
            name = f"snapshots/u_{k:05d}"
            write_fields(run.path(name + ".hfsf"), s.grid, list(s.orbitals))
            write_sidecar(run.path(name + ".json"),
                          {"t": t, "norms": norms, "diagnostics": {"pseudo_conformal": pc,
                                                                   "sup_norms": sup}})
            rows.append([t, *norms, *sup, pc])
        n = traj.states[0].count
        with open(run.path("trajectory.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"norm_{j}" for j in range(n)] + [f"sup_{j}" for j in range(n)]
                       + ["pseudo_conformal"])
            for r in rows:
                w.writerow([_fmt(v) for v in r])
        write_fields(run.path("psi.hfsf"), out.psi.grid, list(out.psi.orbitals))
        write_sidecar(run.path("psi.json"), out.to_dict())
    run.diagnostics.update({
        "consistency_residual": out.consistency_residual,
        "tail_estimate": out.tail_estimate,
        "flagged": out.flagged,
        "max_norm_drift": traj.max_norm_drift(),
    })
    if out.flagged:
        raise StageError("scattering", RuntimeError(
            f"consistency residual {out.consistency_residual:.3e} exceeds 10 x tail_tol"))


def cmd_probe(sc: Scenario, run: Run):
    pr = sc.cfg["probe"]
    cfg = ProbeConfig(sc.base_states(), sc.direction, pr["speeds"], pr["lam"])
    with run.stage("expansion"):
        res = expansion_check(cfg, sc.v_int, sc.v_ext, sc.scatter_for_speed)
    with run.stage("write"):
        write_probe_csv(res, run.path("probe.csv"))
    run.diagnostics.update({"remainder_slopes": res.slopes, "warnings": res.warnings})


def _read_slim(path: Path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1] + 1j * data[:, 2]


def cmd_invert_vint(sc: Scenario, run: Run):
    vi_cfg = sc.cfg["inversion"]["vint"]
    j = vi_cfg["orbital"]
    lams = DEFAULT_LAMBDAS if vi_cfg["lambdas"] is None else tuple(vi_cfg["lambdas"])
    phi = sc.base_states()
    grid = sc.grid
    truth_model = sc.v_int
    source = vi_cfg["source"]
    if source == "file":
        path = None if vi_cfg["path"] is None else Path(vi_cfg["path"])
        if path is None or not path.exists():
            if not vi_cfg["generate"]:
                raise MissingInputError(
                    f"missing input: probe data {path} not found and generation is disabled")
            source = "scattering"
    with run.stage("operator"):
        op = assemble_T(phi, j, lams, T_H=sc.scatter.T, dt_H=vi_cfg["kernel_dt"])
    truth = op.restrict(vhat_field(truth_model, grid))
    rng = np.random.default_rng(sc.cfg["seed"])
    with run.stage("data"):
        if source == "synthetic":
            clean = op.matrix @ truth
            noise = rng.standard_normal(clean.size) + 1j * rng.standard_normal(clean.size)
            scale = np.linalg.norm(clean)
            noise *= vi_cfg["noise"] * scale / max(np.linalg.norm(noise), np.finfo(float).tiny)
            slim = clean + noise
            delta = float(np.linalg.norm(noise))
        elif source == "scattering":
            pr = sc.cfg["probe"]
            cfg = ProbeConfig(phi, sc.direction, pr["speeds"], 0.0)
            data = collect_slim(cfg, j, sc.v_int, sc.v_ext, sc.scatter_for_speed, lams)
            slim, delta = data.values, max(data.noise_level, np.finfo(float).eps * np.linalg.norm(data.values))
        else:
            file_lams, slim = _read_slim(path)
            if not np.allclose(file_lams, lams):
                raise ConfigError("inversion.vint.lambdas: do not match the probe data file")
            delta = vi_cfg["noise"] * float(np.linalg.norm(slim))
    with run.stage("reconstruct"):
        est = PicardReconstructor(vi_cfg["rule"], vi_cfg["n_components"], delta, vi_cfg["tau"],
                                  vi_cfg["ratio"]).fit(op)
        vhat_band = est.predict(slim, truth=truth)
        diag = est.diagnostics_
        vhat = op.embed(vhat_band)
        vpos, imag = vint_from_vhat(vhat)
    with run.stage("write"):
        write_spectrum_csv(est.system_, diag, run.path("spectrum.csv"))
        with open(run.path("slim.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lambda", "re", "im"])
            for lam, s in zip(lams, slim):
                w.writerow([_fmt(lam), _fmt(s.real), _fmt(s.imag)])
        write_fields(run.path("vhat.hfsf"), grid, [vhat.values])
        write_fields(run.path("vint.hfsf"), grid, [vpos.values])
        tn = np.linalg.norm(truth)
        proj = est.system_.phi[:, :diag.n_star]
        target = proj @ (proj.conj().T @ truth)
        metrics = {
            "n_star": diag.n_star,
            "delta": delta,
            "imag_ratio": imag,
            "projection_residual": diag.projection_residual,
            "error_full_band": float(np.linalg.norm(vhat_band - truth) / tn) if tn else float(np.linalg.norm(vhat_band)),
            "error_retained": float(np.linalg.norm(vhat_band - target) / np.linalg.norm(target))
            if np.linalg.norm(target) else float(np.linalg.norm(vhat_band)),
        }
        write_sidecar(run.path("metrics.json"), metrics)
    run.diagnostics.update(metrics)


def cmd_invert_vext(sc: Scenario, run: Run):
    ve_cfg = sc.cfg["inversion"]["vext"]
    pr = sc.cfg["probe"]
    with run.stage("pipeline"):
        res = full_vext_pipeline(sc.base_states(), sc.v_int, sc.v_ext, pr["speeds"],
                                 sc.scatter_for_speed, ve_cfg["directions"], ve_cfg["a"],
                                 ve_cfg["orbital"], ve_cfg["eps_div"])
    with run.stage("write"):
        write_sinogram_csv(res.sinogram, run.path("sinogram.csv"))
        write_fields(run.path("vext.hfsf"), sc.grid, [res.estimate.values])
        metrics = {"relative_l2_error": res.error, **res.stats}
        write_sidecar(run.path("metrics.json"), metrics)
    run.diagnostics.update(metrics)


COMMANDS = {
    "simulate": cmd_simulate,
    "probe": cmd_probe,
    "invert-vint": cmd_invert_vint,
    "invert-vext": cmd_invert_vext,
}


def _threads(arg: int | None) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get("HFSCATTER_THREADS")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"HFSCATTER_THREADS must be an integer, got {env!r}") from exc
    return None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hfscatter", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="scenario YAML file")
        s.add_argument("--out", help="output directory (overrides output_dir)")
        s.add_argument("--threads", type=int, help="thread limit (default: HFSCATTER_THREADS)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        threads = _threads(args.threads)
        out = Path(args.out or cfg["output_dir"])
        run = Run(args.command, cfg, out, threads)
        with threadpool_limits(limits=threads):
            COMMANDS[args.command](Scenario(cfg), run)
        run.write_manifest()
    except (ConfigError, MissingInputError) as exc:
        print(f"hfscatter: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"hfscatter: error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, (ConfigError, MissingInputError)):
            return EXIT_CONFIG
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
