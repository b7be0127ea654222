"""Command-line runner: phantom -> simulate -> build-kernel -> recon -> eval -> report.

Every stage reads its inputs from and writes its outputs to ``--out-dir``;
``manifest.json`` there lists every file written so far.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .evaluate import (BIAS_SD_COLUMNS, MSE_COLUMNS, MetricError, RoiMask, ensemble_bias_sd, image_mse_db,
                       noise_sd_background, roi_mean, write_table)
from .io import (FormatError, read_image, read_json, read_kernel, read_sparse, write_image, write_json,
                 write_kernel, write_params, write_pgm, write_sparse, write_trace)
from .kernel import KernelError, identity_kernel, kernel_from_composites
from .neural import NetworkError
from .phantom import (REGION_NAMES, DynamicStudy, Phantom, PhantomError, composite_frames, default_tac_table,
                      make_phantom, prior_composites, simulate_study, synthesize_frames)
from .recon import ReconError, reconstruct
from .tomo import GeometryError, Grid, ProjGeometry, build_system_matrix

log = logging.getLogger("neuralkem")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
CLI_METHODS = ("mlem", "kem", "dip-ot", "neural-kem", "dip-admm")


class Run:
    """Output directory plus the manifest of everything written into it."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Path, reproducible: bool = False):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.reproducible = reproducible
        path = self.out / "manifest.json"
        self.manifest = read_json(path) if path.exists() else {}
        if self.manifest.get("config_digest", cfg.digest()) != cfg.digest():
            log.warning("config differs from the one recorded in %s; starting a fresh manifest", path)
            self.manifest = {}
        self.manifest.update({"tool": "neuralkem", "version": __version__, "config_digest": cfg.digest(),
                              "seed": cfg.seed})
        self.manifest.setdefault("stages", {})

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, stage: str, files, **extra) -> None:
        entry = self.manifest["stages"].setdefault(stage, {"files": []})
        names = set(entry["files"]) | {str(Path(f).relative_to(self.out)) for f in files}
        entry["files"] = sorted(names)
        entry.update(extra)
        if not self.reproducible:
            entry["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        write_json(self.out / "manifest.json", self.manifest)


# --- shared builders ---------------------------------------------------------

def build_grid(cfg: ExperimentConfig) -> Grid:
    g = cfg.grid
    return Grid(g.nx, g.ny, g.pixel_size, g.nz or None, g.slice_thickness or None)


def build_projector(cfg: ExperimentConfig, grid: Grid):
    geom = ProjGeometry.covering(grid, cfg.geometry.n_angles or None, cfg.geometry.bin_size or None)
    return geom, build_system_matrix(grid, geom)


def _realizations(cfg: ExperimentConfig) -> range:
    return range(cfg.simulation.realizations)


def _study_dir(r: int) -> str:
    return f"real{r:03d}"


def load_study(run: Run, r: int) -> DynamicStudy:
    d = run.out / "study" / _study_dir(r)
    noisy, meta = read_image(d / "noisy.f64")
    background, _ = read_image(d / "background.f64")
    noisefree, _ = read_image(d / "noisefree.f64")
    truth, _ = read_image(run.out / "phantom" / "truth.f64")
    cfg = run.cfg
    schedule = cfg.schedule.build()
    m = schedule.n_frames
    return DynamicStudy(build_grid(cfg), schedule, truth.reshape(m, -1), noisefree.reshape(m, -1),
                        background.reshape(m, -1), noisy.reshape(m, -1), np.array(meta["frame_scales"]),
                        int(meta["seed"]), int(meta["realization"]), {"background_fraction": meta["background_fraction"]})


# --- stages -------------------------------------------------------------------

def cmd_phantom(run: Run) -> None:
    cfg = run.cfg
    grid = build_grid(cfg)
    phantom = make_phantom(grid, cfg.phantom.shapes, REGION_NAMES, cfg.phantom.supersample)
    schedule = cfg.schedule.build()
    tacs = default_tac_table(schedule)
    truth = synthesize_frames(phantom, tacs, schedule)
    files = write_image(run.path("phantom", "labels.f64"), phantom.label_map.astype(np.float64), grid.shape,
                        regions=list(REGION_NAMES), units="label")
    files += write_image(run.path("phantom", "truth.f64"), truth, grid.shape, units="activity",
                         frame_starts_s=list(schedule.starts), frame_durations_s=list(schedule.durations))
    tac_path = run.path("phantom", "tac.csv")
    write_table(tac_path, ("region",) + tuple(f"frame{m}" for m in range(schedule.n_frames)),
                [(name, *tacs.row(name)) for name in tacs.region_names])
    run.record("phantom", files + [tac_path], shape=list(grid.shape), n_frames=schedule.n_frames)
    log.info("phantom %s with %d frames", grid.shape, schedule.n_frames)


def cmd_simulate(run: Run) -> None:
    cfg = run.cfg
    grid = build_grid(cfg)
    geom, P = build_projector(cfg, grid)
    truth, _ = read_image(run.out / "phantom" / "truth.f64")
    schedule = cfg.schedule.build()
    truth = truth.reshape(schedule.n_frames, -1)
    sim = cfg.simulation
    files = [write_sparse(run.path("study", "system.nksm"), P)]
    files.append(write_json(run.path("study", "geometry.json"),
                            {"n_angles": geom.n_angles, "n_bins": geom.n_bins, "bin_size": geom.bin_size,
                             "n_planes": geom.n_planes}))
    totals = []
    for r in _realizations(cfg):
        study = simulate_study(P, grid, truth, schedule, sim.background_fraction,
                               target_total_counts=sim.total_counts or None,
                               frame_counts=None if sim.total_counts else sim.frame_counts,
                               seed=cfg.seed, realization=r)
        d = ("study", _study_dir(r))
        meta = {"frame_scales": list(map(float, study.frame_scales)), "seed": cfg.seed, "realization": r,
                "background_fraction": sim.background_fraction, "units": "counts"}
        files += write_image(run.path(*d, "noisy.f64"), study.noisy_sinos, geom.shape, **meta)
        files += write_image(run.path(*d, "background.f64"), study.background_sinos, geom.shape, **meta)
        files += write_image(run.path(*d, "noisefree.f64"), study.noisefree_sinos, geom.shape, **meta)
        totals.append(study.noisy_sinos.sum(axis=1).tolist())
    run.record("simulate", files, counts_per_frame=totals)
    log.info("simulated %d realisation(s); frame counts %s", len(totals), totals[0])


def cmd_build_kernel(run: Run) -> None:
    cfg = run.cfg
    grid = build_grid(cfg)
    P = read_sparse(run.out / "study" / "system.nksm")
    kc = cfg.kernel
    labels = read_image(run.out / "phantom" / "labels.f64")[0].ravel().astype(int)
    phantom = Phantom(labels, grid, REGION_NAMES)
    files = []
    for r in _realizations(cfg):
        if kc.prior_total_counts > 0:
            z = prior_composites(P, phantom, kc.prior_total_counts, kc.composite_windows,
                                 cfg.simulation.background_fraction, cfg.seed, r, kc.composite_iters,
                                 kc.composite_source)
        else:
            z = composite_frames(load_study(run, r), kc.composite_windows, P, kc.composite_iters,
                                 kc.composite_source)
        files += write_image(run.path("kernel", f"{_study_dir(r)}_composites.f64"), z, grid.shape,
                             windows_s=[list(w) for w in kc.composite_windows], units="activity")
        if kc.k == 0:
            model = identity_kernel(grid.n_pixels)
        else:
            window = kc.window or None
            model = kernel_from_composites(z, kc.k, kc.sigma, window, grid.shape if window else None,
                                           kc.row_normalize)
        files += write_kernel(run.path("kernel", f"{_study_dir(r)}.nksm"), model)
    run.record("build-kernel", files)
    log.info("kernel k=%d sigma=%g for %d realisation(s)", kc.k, kc.sigma, len(list(_realizations(cfg))))


def _recon_job(args):
    rcfg, P, K, y, r_bg, z, x0 = args
    return reconstruct(rcfg, P, y, r_bg, K, z, x0)


def cmd_recon(run: Run, method: str, threads: int = 1) -> None:
    cfg = run.cfg
    name = method.replace("-", "_")
    rcfg = cfg.recon_config(name)
    checkpoints = tuple(sorted(set(rcfg.checkpoints) | {i for i in cfg.eval.iterations if i <= rcfg.outer_iters}))
    rcfg = dataclasses.replace(rcfg, checkpoints=checkpoints)
    grid = build_grid(cfg)
    P = read_sparse(run.out / "study" / "system.nksm")
    x0 = None
    if cfg.init_image:
        x0 = read_image(cfg.resolve(cfg.init_image))[0].ravel()
    jobs, keys = [], []
    for r in _realizations(cfg):
        study = load_study(run, r)
        K = read_kernel(run.out / "kernel" / f"{_study_dir(r)}.nksm") if name in ("kem", "neural_kem") else None
        z = None
        if name in ("dip_ot", "neural_kem", "dip_admm"):
            z = read_image(run.out / "kernel" / f"{_study_dir(r)}_composites.f64")[0]
            z = z.reshape((-1, *grid.shape))
        for m in range(study.n_frames):
            jobs.append((rcfg, P.scaled(study.frame_factor(m)), K, study.noisy_sinos[m],
                         study.background_sinos[m], z, x0))
            keys.append((r, m))
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads, initializer=_single_thread) as pool:
            results = list(pool.map(_recon_job, jobs))
    else:
        results = [_recon_job(j) for j in jobs]
    files, rejected = [], {}
    for (r, m), res in zip(keys, results):
        stem = f"{_study_dir(r)}_frame{m:02d}"
        d = ("recon", method)
        files += write_image(run.path(*d, f"{stem}.f64"), res.x, grid.shape, method=name, realization=r, frame=m,
                             iterations=rcfg.outer_iters, units="activity")
        files.append(write_trace(run.path(*d, f"{stem}_trace.csv"), res.trace, wall_clock=not run.reproducible))
        its = sorted(res.checkpoints)
        if its:
            files += write_image(run.path(*d, f"{stem}_checkpoints.f64"), np.array([res.checkpoints[i] for i in its]),
                                 grid.shape, iterations=its, units="activity")
        if res.params is not None:
            files.append(write_params(run.path(*d, f"{stem}.nknp"), res.params))
            rejected[stem] = res.n_rejected
    run.record(f"recon:{method}", files, outer_iters=rcfg.outer_iters, guard_rejections=rejected)
    log.info("%s: %d reconstruction(s) written", method, len(results))


def _single_thread():
    import torch

    torch.set_num_threads(1)


def _recon_methods(run: Run) -> list[str]:
    base = run.out / "recon"
    return sorted(p.name for p in base.iterdir() if p.is_dir()) if base.exists() else []


def _checkpoint_stack(run: Run, method: str, stem: str):
    path = run.out / "recon" / method / f"{stem}_checkpoints.f64"
    data, meta = read_image(path)
    its = list(meta["iterations"])
    data = data.reshape(len(its), -1)
    return dict(zip(its, data))


def cmd_eval(run: Run) -> None:
    cfg = run.cfg
    schedule = cfg.schedule.build()
    truth = read_image(run.out / "phantom" / "truth.f64")[0].reshape(schedule.n_frames, -1)
    labels = read_image(run.out / "phantom" / "labels.f64")[0].ravel().astype(int)
    rois = {name: RoiMask.from_mask(name, labels == REGION_NAMES.index(name)) for name in cfg.eval.rois}
    background = RoiMask.from_mask(cfg.eval.background_roi, labels == REGION_NAMES.index(cfg.eval.background_roi))
    methods = _recon_methods(run)
    if not methods:
        raise FileNotFoundError("no reconstructions found; run the recon stage first")
    mse_rows, bias_rows, noise_rows = [], [], []
    n_real = cfg.simulation.realizations
    for method in methods:
        for m in range(schedule.n_frames):
            stacks = [_checkpoint_stack(run, method, f"{_study_dir(r)}_frame{m:02d}") for r in range(n_real)]
            for it in cfg.eval.iterations:
                if it not in stacks[0]:
                    continue
                mses = [image_mse_db(s[it], truth[m]) for s in stacks]
                mse_rows.append((method, m, it, float(np.median(mses))))
                noise_rows.append((method, m, it, float(np.mean([noise_sd_background(s[it], background)
                                                                   for s in stacks]))))
                if n_real >= 2:
                    for name, roi in rois.items():
                        c_true = roi_mean(truth[m], roi)
                        if c_true <= 0:
                            continue
                        res = ensemble_bias_sd([roi_mean(s[it], roi) for s in stacks], c_true)
                        bias_rows.append((method, m, name, res.bias, res.sd, it))
    files = [write_table(run.path("eval", "mse.csv"), MSE_COLUMNS, mse_rows),
             write_table(run.path("eval", "noise.csv"), ("method", "frame", "iteration", "background_cv"), noise_rows)]
    if bias_rows:
        files.append(write_table(run.path("eval", "bias_sd.csv"), BIAS_SD_COLUMNS, bias_rows))
    else:
        log.warning("bias/SD needs at least two realisations; skipped")
    run.record("eval", files)


def cmd_report(run: Run) -> None:
    cfg = run.cfg
    grid = build_grid(cfg)
    schedule = cfg.schedule.build()
    mse = {}
    with (run.out / "eval" / "mse.csv").open() as fh:
        next(fh)
        for line in fh:
            method, frame, it, val = line.strip().split(",")
            mse[(method, int(frame), int(it))] = val
    last = max(cfg.eval.iterations)
    methods = _recon_methods(run)
    table = [(method, *(mse.get((method, m, last), "") for m in range(schedule.n_frames))) for method in methods]
    files = [write_table(run.path("report", f"mse_iter{last}.csv"),
                         ("method",) + tuple(f"frame{m}" for m in range(schedule.n_frames)), table)]
    windows = {}
    if cfg.eval.pgm and not grid.is_3d:
        truth = read_image(run.out / "phantom" / "truth.f64")[0].reshape(schedule.n_frames, *grid.shape)
        for m in range(schedule.n_frames):
            # one window per frame shared by all methods, taken from the truth
            window = (0.0, float(truth[m].max()))
            p = run.path("report", f"truth_frame{m:02d}.pgm")
            windows[p.name] = list(write_pgm(p, truth[m], window))
            files.append(p)
            for method in methods:
                x = read_image(run.out / "recon" / method / f"{_study_dir(0)}_frame{m:02d}.f64")[0]
                p = run.path("report", f"{method}_frame{m:02d}.pgm")
                windows[p.name] = list(write_pgm(p, x.reshape(grid.shape), window))
                files.append(p)
    run.record("report", files, pgm_windows=windows)


# --- entry point -------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neuralkem", description="Neural KEM dynamic PET reconstruction experiments")
    ap.add_argument("--config", type=Path, help="TOML experiment config (defaults if omitted)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out-dir", type=Path, default=Path("run"), help="output directory (default ./run)")
    ap.add_argument("--threads", type=int, default=1, help="worker processes for independent reconstructions")
    ap.add_argument("--reproducible", action="store_true",
                    help="omit wall-clock fields so reruns are byte-identical")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", help="rasterise the phantom and write true activity frames")
    sub.add_parser("simulate", help="simulate noisy sinograms for every realisation")
    sub.add_parser("build-kernel", help="composite priors and kernel matrix per realisation")
    rp = sub.add_parser("recon", help="reconstruct every frame and realisation")
    rp.add_argument("--method", required=True, choices=CLI_METHODS)
    sub.add_parser("eval", help="MSE, bias/SD and background-noise tables")
    sub.add_parser("report", help="summary table and 16-bit PGM images")
    sub.add_parser("dump-config", help="print the effective configuration as TOML")
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "dump-config":
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    try:
        run = Run(cfg, args.out_dir, args.reproducible)
        if args.command == "phantom":
            cmd_phantom(run)
        elif args.command == "simulate":
            cmd_simulate(run)
        elif args.command == "build-kernel":
            cmd_build_kernel(run)
        elif args.command == "recon":
            cmd_recon(run, args.method, args.threads)
        elif args.command == "eval":
            cmd_eval(run)
        elif args.command == "report":
            cmd_report(run)
    except (ConfigError, PhantomError, GeometryError, KernelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ReconError, NetworkError, MetricError, FormatError, FloatingPointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
