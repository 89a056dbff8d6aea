"""Pipeline orchestration and the `offsetcbct` command line.

Subcommands: `simulate`, `reconstruct` (plain FDK), `stage1`, `baseline-li`,
`stage2`, `report`.  Exit codes: 0 success, 2 configuration error,
3 numerical failure, 4 secondary component unavailable.  Set
``OFFSETCBCT_THREADS`` to pin the compute thread count.

Every stage writes its intermediate artifacts (filled sinogram, corrected
sinogram, volumes) in the shared raw+JSON format, so stages can be re-run
from disk with identical results and the learned denoiser stays a separate
process behind a file boundary.
"""

from __future__ import annotations

import argparse
import json
import os
import shlex
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import dcc, metrics, projector, reflect, simulate
from .core import (ScanGeometry, Sinogram, desk_geometry, load_sinogram,
                   load_volume, save_geometry, save_sinogram, save_volume,
                   subsample_offset)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_NO_SECONDARY = 4

METHODS = ("uncorrected", "baseline_li", "stage1", "stage2")


class ConfigError(Exception):
    pass


class SecondaryUnavailable(Exception):
    pass


# -- configuration -----------------------------------------------------


def _resolve_geometry(entry) -> ScanGeometry:
    if entry is None:
        return desk_geometry()
    if isinstance(entry, dict):
        return ScanGeometry.from_dict(entry)
    return ScanGeometry.from_dict(json.loads(Path(entry).read_text()))


def _resolve_phantom(entry) -> simulate.PhantomSpec:
    if entry is None:
        raise ConfigError("experiment config needs a 'phantom' entry")
    if isinstance(entry, dict):
        return simulate.PhantomSpec.from_json(entry)
    if isinstance(entry, str) and not entry.endswith(".json"):
        return simulate.bundled_phantom(entry)
    return simulate.PhantomSpec.from_json(entry)


def _resolve_spectrum(entry) -> simulate.EnergySpectrum:
    if entry is None:
        return simulate.default_spectrum()
    return simulate.EnergySpectrum.from_csv(entry)


def _resolve_noise(entry) -> simulate.NoiseConfig:
    if entry is None:
        raise ConfigError("experiment config needs a 'noise' entry")
    if isinstance(entry, dict):
        return simulate.NoiseConfig.from_json(entry)
    if isinstance(entry, str) and not entry.endswith(".json"):
        return simulate.bundled_noise(entry)
    return simulate.NoiseConfig.from_json(entry)


def load_experiment(path, overrides: dict | None = None) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read experiment config {path}: {exc}") from exc
    if overrides:
        cfg.update({k: v for k, v in overrides.items() if v is not None})
    cfg.setdefault("seed", 0)
    cfg.setdefault("nz", 33)
    cfg.setdefault("dcc", {})
    cfg.setdefault("max_log_attenuation", 12.0)
    return cfg


def _dcc_config(entry: dict) -> dcc.ConsistencyConfig:
    known = {"y0", "n_x", "x_range", "beta_margin_views", "support_threshold",
             "y0_margin_samples", "Lambda", "v_index", "restarts", "max_evals"}
    bad = set(entry) - known
    if bad:
        raise ConfigError(f"unknown dcc config keys: {sorted(bad)}")
    kwargs = dict(entry)
    if kwargs.get("x_range") is not None:
        kwargs["x_range"] = tuple(kwargs["x_range"])
    return dcc.ConsistencyConfig(**kwargs)


# -- pipeline stages ---------------------------------------------------


def run_simulate(config: dict, out_dir) -> Path:
    """Generate the noisy offset sinogram plus the monochromatic reference
    sinogram and reference volume for one experiment."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geometry = _resolve_geometry(config.get("geometry"))
    phantom_spec = _resolve_phantom(config.get("phantom"))
    spectrum = _resolve_spectrum(config.get("spectrum"))
    noise = _resolve_noise(config.get("noise"))
    support = phantom_spec.support_radius()
    if support >= geometry.R:
        raise ConfigError("phantom support reaches the source orbit")
    u_tan = geometry.R * support / np.sqrt(geometry.R ** 2 - support ** 2)
    if u_tan > geometry.ell_full + 1e-9:
        raise ConfigError(
            f"phantom support (radius {support:.1f} mm, tangent detector "
            f"coordinate {u_tan:.1f} mm) exceeds the full detector "
            f"half-extent {geometry.ell_full} mm")
    table = simulate.MaterialTable.build(spectrum.energies)
    e_star = config.get("e_star") or simulate.effective_energy(table, spectrum)
    seed = int(config.get("seed", 0))
    nz = int(config.get("nz", 33))

    labels = simulate.rasterize_phantom(phantom_spec, table)
    full = simulate.polychromatic_project(
        labels, table, spectrum, geometry,
        max_log_attenuation=float(config.get("max_log_attenuation", 12.0)))
    truncated = subsample_offset(full, geometry)
    noisy = simulate.add_noise(truncated, noise, seed)
    p_star = simulate.reference_sinogram(labels, table, e_star, geometry)
    mu_star = projector.fdk_reconstruct(p_star, geometry,
                                        grid=_grid_for(config, geometry))

    save_geometry(geometry, out / "geometry.json")
    phantom_spec.to_json(out / "phantom.json")
    save_sinogram(noisy, out / "P")
    save_sinogram(truncated, out / "P_clean")
    save_sinogram(p_star, out / "Pstar")
    save_volume(mu_star, out / "mu_star")
    resolved = dict(config)
    resolved["e_star"] = e_star
    resolved["mu_water"] = float(
        table.mu_at(e_star)[table.label_of("soft_tissue")])
    resolved["noise_resolved"] = {"I0": noise.I0, "sigma": noise.sigma}
    (out / "config.json").write_text(json.dumps(resolved, indent=1, sort_keys=True))
    return out


def _load_run(run_dir) -> tuple:
    run = Path(run_dir)
    try:
        config = json.loads((run / "config.json").read_text())
        geometry = ScanGeometry.from_dict(
            json.loads((run / "geometry.json").read_text()))
    except OSError as exc:
        raise ConfigError(f"{run} is not a simulation run directory: {exc}") from exc
    return run, config, geometry


def _grid_for(config: dict, geometry: ScanGeometry) -> projector.GridSpec:
    radius = float(config.get("grid_radius_mm", min(128.0, geometry.ell_full)))
    n_xy = int(round(2.0 * radius / geometry.voxel_pitch))
    return projector.GridSpec(shape=(n_xy, n_xy, int(config.get("nz", 33))),
                              pitch=geometry.voxel_pitch)


def run_reconstruct(run_dir, use_clean: bool = False) -> Path:
    """Plain (uncorrected) reconstruction: reflect, extrapolate, FDK."""
    run, config, geometry = _load_run(run_dir)
    sino = load_sinogram(run / ("P_clean" if use_clean else "P"))
    filled = reflect.reflect_fill(sino, geometry)
    padded = projector.extrapolate_truncation(filled)
    vol = projector.fdk_reconstruct(padded, geometry, grid=_grid_for(config, geometry))
    dest = run / "uncorrected"
    dest.mkdir(exist_ok=True)
    save_volume(vol, dest / "volume")
    return dest


def run_stage1(run_dir, dcc_overrides: dict | None = None) -> Path:
    """Stage 1: reflection, consistency fit, corrector, extrapolation, FDK."""
    run, config, geometry = _load_run(run_dir)
    cfg_entry = dict(config.get("dcc", {}))
    if dcc_overrides:
        cfg_entry.update({k: v for k, v in dcc_overrides.items() if v is not None})
    cfg = _dcc_config(cfg_entry)
    sino = load_sinogram(run / "P")
    dest = run / "stage1"
    dest.mkdir(exist_ok=True)

    filled = reflect.reflect_fill(sino, geometry)
    save_sinogram(filled, dest / "P_sharp")
    fit = dcc.fit_params(filled, cfg, geometry)
    (dest / "fit_report.json").write_text(
        json.dumps(fit.to_dict(), indent=1, sort_keys=True))
    corrected = dcc.corrector_apply(filled, fit.params)
    save_sinogram(corrected, dest / "P_cor")
    padded = projector.extrapolate_truncation(corrected)
    vol = projector.fdk_reconstruct(padded, geometry, grid=_grid_for(config, geometry))
    save_volume(vol, dest / "volume")
    return dest


def interpolate_metal_trace(sinogram: Sinogram, threshold: float) -> Sinogram:
    """Replace sinogram values above `threshold` by per-view linear
    interpolation across the trace in u (measured columns only).  Rows whose
    trace covers the whole detector are flagged and left untouched."""
    if threshold <= 0:
        raise ValueError("metal threshold must be positive")
    data = sinogram.data.copy()
    cols = np.flatnonzero(sinogram.measured_mask)
    skipped = 0
    for ib in range(data.shape[0]):
        for iv in range(data.shape[2]):
            vals = data[ib, cols, iv]
            trace = vals > threshold
            if not trace.any():
                continue
            if trace.all():
                skipped += 1
                continue
            keep = np.flatnonzero(~trace)
            vals[trace] = np.interp(np.flatnonzero(trace), keep, vals[keep])
            data[ib, cols, iv] = vals
    meta = dict(sinogram.meta)
    meta["li_threshold"] = float(threshold)
    if skipped:
        meta["li_rows_skipped"] = skipped
    return Sinogram(data=data, geometry=sinogram.geometry,
                    u_centers=sinogram.u_centers.copy(),
                    measured_mask=sinogram.measured_mask.copy(), meta=meta)


def run_baseline_li(run_dir, threshold: float | None = None) -> Path:
    """Linear-interpolation MAR baseline: inpaint the metal trace, then the
    stage-1 geometry steps (reflection, extrapolation, FDK) without the
    consistency corrector."""
    run, config, geometry = _load_run(run_dir)
    sino = load_sinogram(run / "P")
    if threshold is None:
        threshold = dcc.choose_lambda_threshold(sino.midplane())
    inpainted = interpolate_metal_trace(sino, threshold)
    filled = reflect.reflect_fill(inpainted, geometry)
    padded = projector.extrapolate_truncation(filled)
    vol = projector.fdk_reconstruct(padded, geometry, grid=_grid_for(config, geometry))
    dest = run / "baseline_li"
    dest.mkdir(exist_ok=True)
    save_volume(vol, dest / "volume")
    (dest / "baseline.json").write_text(json.dumps(
        {"threshold": float(threshold),
         "rows_skipped": inpainted.meta.get("li_rows_skipped", 0)}, indent=1))
    return dest


def run_stage2(run_dir, denoiser_cmd: str | None, model: str | None = None) -> Path:
    """Hand the stage-1 volume to the learned denoiser over the file boundary.

    `denoiser_cmd` is a command prefix (e.g. ``node .../cli.js``); it is
    invoked as ``<cmd> infer --model M --input IN --output OUT`` on the
    shared raw format.  A missing denoiser raises SecondaryUnavailable,
    which exits with the dedicated status code.
    """
    run, config, geometry = _load_run(run_dir)
    src = run / "stage1" / "volume"
    if not src.with_suffix(".json").exists():
        raise ConfigError("stage1 volume missing; run stage1 first")
    if not denoiser_cmd:
        raise SecondaryUnavailable("no denoiser command configured")
    parts = shlex.split(denoiser_cmd)
    exe = parts[0]
    from shutil import which

    if not (Path(exe).exists() or which(exe)):
        raise SecondaryUnavailable(f"denoiser executable {exe!r} not found")
    if model and not Path(model).exists():
        raise SecondaryUnavailable(f"denoiser model {model!r} not found")
    dest = run / "stage2"
    dest.mkdir(exist_ok=True)
    out_stem = dest / "volume"
    cmd = parts + ["infer", "--input", str(src), "--output", str(out_stem)]
    if model:
        cmd += ["--model", str(model)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise SecondaryUnavailable(
            f"denoiser failed with status {proc.returncode}: {proc.stderr.strip()}")
    result = load_volume(out_stem)
    original = load_volume(src)
    if result.data.shape != original.data.shape:
        raise ValueError("denoiser returned a volume of the wrong shape")
    return dest


def evaluate_run(run_dir) -> dict:
    """NRMSD/SSIM of every available method volume against the reference."""
    run, config, geometry = _load_run(run_dir)
    reference = load_volume(run / "mu_star")
    mask = metrics.roi_cylinder_mask(reference, 0.95 * geometry.ell)
    ref_vals = reference.data[mask]
    data_range = float(ref_vals.max() - ref_vals.min())
    rows = []
    for method in METHODS:
        stem = run / method / "volume"
        if not stem.with_suffix(".json").exists():
            rows.append({"method": method, "available": False})
            continue
        vol = load_volume(stem)
        rows.append({
            "method": method, "available": True,
            "nrmsd": round(metrics.nrmsd(vol, reference, mask), 4),
            "ssim": round(metrics.ssim_volume(vol, reference, data_range), 6),
        })
    return {"run": run.name, "name": config.get("name", run.name),
            "rows": rows}


def _format_table(results: list) -> str:
    header = f"{'run':24s}" + "".join(f"{m:>16s}" for m in METHODS)
    lines = ["NRMSD (%)", header, "-" * len(header)]
    for res in results:
        cells = []
        for m in METHODS:
            row = next(r for r in res["rows"] if r["method"] == m)
            cells.append(f"{row['nrmsd']:16.2f}" if row["available"]
                         else f"{'-':>16s}")
        lines.append(f"{res['name']:24s}" + "".join(cells))
    lines += ["", "SSIM", header, "-" * len(header)]
    for res in results:
        cells = []
        for m in METHODS:
            row = next(r for r in res["rows"] if r["method"] == m)
            cells.append(f"{row['ssim']:16.4f}" if row["available"]
                         else f"{'-':>16s}")
        lines.append(f"{res['name']:24s}" + "".join(cells))
    return "\n".join(lines) + "\n"


def run_report(root_dir, window_center: float = 500.0,
               window_width: float = 5000.0) -> list:
    """Metric table plus windowed PNG slice panels for one run directory or
    a directory of runs.  Returns the metric rows; raises ConfigError when
    nothing evaluable is found."""
    root = Path(root_dir)
    if (root / "config.json").exists():
        run_dirs = [root]
    else:
        run_dirs = sorted(d for d in root.iterdir()
                          if d.is_dir() and (d / "config.json").exists())
    results = []
    for run in run_dirs:
        res = evaluate_run(run)
        results.append(res)
        (run / "metrics.json").write_text(
            json.dumps(res, indent=1, sort_keys=True))
        _write_panel(run, window_center, window_width)
    table = _format_table(results)
    (root / "report.txt").write_text(table)
    sys.stdout.write(table)
    if not results:
        raise ConfigError(f"no completed runs under {root}")
    return results


def _write_panel(run_dir: Path, center: float, width: float):
    from PIL import Image

    run, config, geometry = _load_run(run_dir)
    mu_water = config.get("mu_water")
    panels = []
    for stem in [run / m / "volume" for m in METHODS] + [run / "mu_star"]:
        if not stem.with_suffix(".json").exists():
            continue
        vol = load_volume(stem)
        hu = projector.mu_to_hu(vol.mid_slice(), mu_water)
        panels.append(projector.window_image(hu, center, width).T[::-1, :])
    if not panels:
        return
    montage = np.concatenate(panels, axis=1)
    Image.fromarray(montage, mode="L").save(run / "panel.png")


# -- argument parsing --------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="offsetcbct",
        description="Offset-detector CBCT simulation and two-stage "
                    "beam-hardening artifact reduction")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate sinograms and references")
    sim.add_argument("--config", required=True, help="experiment JSON")
    sim.add_argument("--out", required=True, help="output run directory")
    sim.add_argument("--seed", type=int, default=None, help="override seed")

    rec = sub.add_parser("reconstruct", help="plain FDK (uncorrected)")
    rec.add_argument("--run", required=True)

    st1 = sub.add_parser("stage1", help="consistency-corrected reconstruction")
    st1.add_argument("--run", required=True)
    st1.add_argument("--Lambda", type=float, default=None,
                     help="override the corrector threshold")
    st1.add_argument("--y0", type=float, default=None,
                     help="override the consistency line height")

    bli = sub.add_parser("baseline-li", help="linear-interpolation MAR baseline")
    bli.add_argument("--run", required=True)
    bli.add_argument("--threshold", type=float, default=None,
                     help="metal trace threshold (default: histogram knee)")

    st2 = sub.add_parser("stage2", help="apply the learned slice denoiser")
    st2.add_argument("--run", required=True)
    st2.add_argument("--denoiser", default=os.environ.get("OFFSETCBCT_DENOISER"),
                     help="denoiser command prefix (or OFFSETCBCT_DENOISER)")
    st2.add_argument("--model", default=None, help="denoiser model artifact")

    rep = sub.add_parser("report", help="metrics table and slice panels")
    rep.add_argument("--run", required=True, help="run directory or parent")
    rep.add_argument("--window-center", type=float, default=500.0)
    rep.add_argument("--window-width", type=float, default=5000.0)
    return p


def main(argv=None) -> int:
    if os.environ.get("OFFSETCBCT_THREADS"):
        import numba

        numba.set_num_threads(int(os.environ["OFFSETCBCT_THREADS"]))
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            cfg = load_experiment(args.config, {"seed": args.seed})
            out = run_simulate(cfg, args.out)
            print(f"simulated -> {out}")
        elif args.command == "reconstruct":
            print(f"reconstructed -> {run_reconstruct(args.run)}")
        elif args.command == "stage1":
            overrides = {"Lambda": args.Lambda, "y0": args.y0}
            print(f"stage1 -> {run_stage1(args.run, overrides)}")
        elif args.command == "baseline-li":
            print(f"baseline-li -> {run_baseline_li(args.run, args.threshold)}")
        elif args.command == "stage2":
            print(f"stage2 -> {run_stage2(args.run, args.denoiser, args.model)}")
        elif args.command == "report":
            run_report(args.run, args.window_center, args.window_width)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SecondaryUnavailable as exc:
        print(f"secondary unavailable: {exc}", file=sys.stderr)
        return EXIT_NO_SECONDARY
    except (ValueError, OverflowError, FloatingPointError, KeyError) as exc:
        print(f"numerical failure in {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
