"""Command line interface: one subcommand per pipeline stage plus ``mar`` for the full run.

Exit codes: 0 success, 1 other stage failure, 2 usage or config error,
3 missing or malformed file, 4 no metal found, 5 in-painting solver failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .correction import CorrectionParams, build_corrected_sinogram
from .fdk import fdk_reconstruct, grid
from .inpaint import InpaintError, inpaint_sinogram
from .metal import DbscanParams, MetalNotFoundError, default_rho, metal_only_volume, metal_shadow, segment_metal
from .metrics import band_report, dice, format_report
from .pipeline import (
    ConfigError, SimulationConfig, StageError, export_slices, load_config, run_mar, simulate_inputs,
    write_registration,
)
from .projector import default_step
from .registration import register, registration_params
from .volume import BinaryMask3D, resample_rigid

log = logging.getLogger("raymar")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG, EXIT_IO, EXIT_NO_METAL, EXIT_INPAINT = 0, 1, 2, 3, 4, 5


def _overrides(args, mapping: dict) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for attr, key in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            out[key] = " ".join(str(v) for v in val) if isinstance(val, (list, tuple)) else str(val)
    return out


def _config(args, mapping: dict):
    return load_config(args.config, _overrides(args, mapping))


def _volume(path):
    v = io.read_volume(path)
    if isinstance(v, BinaryMask3D):
        raise io.FormatError(f"{path}: expected a volume, found a mask")
    return v


def _mask(path):
    m = io.read_volume(path)
    if not isinstance(m, BinaryMask3D):
        raise io.FormatError(f"{path}: expected a mask (uint8) file")
    return m


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_simulate(args):
    cfg = load_config(args.config, _overrides(args, {"phantom": "simulation.phantom", "seed": "output.seed",
                                                     "photons": "simulation.photons"}))
    if cfg.simulation is None:
        cfg.simulation = SimulationConfig()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = simulate_inputs(cfg, out)
    for k, p in paths.items():
        print(f"{k} = {p}")


def cmd_reconstruct(args):
    sino = io.read_sinogram(args.sinogram)
    if args.like:
        target = io.read_volume(args.like)
    else:
        target = grid(tuple(args.dims), tuple(args.spacing))
    vol = fdk_reconstruct(sino, target, args.window)
    io.write_volume(args.out, vol)
    print(f"volume = {args.out}")


def cmd_register(args):
    cfg = _config(args, {"seed": "output.seed", "generations": "registration.n_generations",
                         "particles": "registration.n_particles", "penalty": "registration.penalty_factor"})
    unc, pri = _volume(args.uncorrected), _volume(args.prior)
    r = cfg.registration
    params = registration_params(unc, pri, r.penalty_factor, r.stride)
    res = register(unc, pri, cfg.swarm(), params, polish=r.polish)
    write_registration(args.out, res.transform, res.value, res.polished)
    if args.aligned:
        io.write_volume(args.aligned, resample_rigid(pri, res.transform, unc))
    print(Path(args.out).read_text(), end="")


def cmd_segment_metal(args):
    cfg = _config(args, {"eps": "metal.eps", "min_pts": "metal.min_pts", "rho": "metal.rho",
                         "expected": "metal.expected_clusters"})
    vol = _volume(args.volume)
    m = cfg.metal
    dbp = DbscanParams(m.eps, m.min_pts) if m.eps is not None else DbscanParams.for_spacing(vol.spacing, m.min_pts)
    seg = segment_metal(vol, dbp, m.min_cluster, m.expected_clusters)
    io.write_volume(args.out, seg.mask)
    rho = m.rho if m.rho is not None else default_rho(vol, seg.mask, seg.bone_level)
    if args.metal_only:
        io.write_volume(args.metal_only, metal_only_volume(vol, seg.mask, rho))
    print(f"clusters = {seg.n_clusters}\nmetal_voxels = {seg.mask.count}\nnoise_voxels = {seg.n_noise}\n"
          f"threshold = {seg.threshold!r}\nrho = {rho!r}")


def cmd_correct(args):
    cfg = _config(args, {"h": "correction.h", "prior_trust": "correction.prior_trust",
                         "step": "correction.step", "rho": "metal.rho"})
    sino = io.read_sinogram(args.sinogram)
    unc, aligned, metal_vol = _volume(args.uncorrected), _volume(args.prior_aligned), _volume(args.metal_only)
    rho = cfg.metal.rho if cfg.metal.rho is not None else float(metal_vol.data.max())
    step = cfg.correction.step if cfg.correction.step is not None else default_step(unc)
    shadow = metal_shadow(metal_vol, sino.geometry, step, rho)
    cp = CorrectionParams(rho, cfg.correction.h, cfg.correction.prior_trust)
    corr = build_corrected_sinogram(sino, unc, aligned, metal_vol, shadow, step, cp)
    io.write_sinogram(args.out, corr)
    io.write_shadow(args.shadow_out, shadow)
    print(f"corrected = {args.out}\nshadow = {args.shadow_out}\nshadow_pixels = {shadow.count}")


def cmd_inpaint(args):
    cfg = _config(args, {"tolerance": "inpaint.tolerance", "max_iter": "inpaint.max_iter"})
    orig = io.read_sinogram(args.sinogram)
    corr = io.read_sinogram(args.corrected)
    shadow = io.read_shadow(args.shadow)
    new = inpaint_sinogram(orig, corr, shadow, cfg.inpaint.tolerance, cfg.inpaint.max_iter)
    io.write_sinogram(args.out, new)
    print(f"inpainted = {args.out}")


def cmd_evaluate(args):
    vol, truth = _volume(args.volume), _volume(args.truth)
    metal = _mask(args.metal_mask)
    values = band_report(vol, truth, metal)
    if args.reference:
        ref = band_report(_volume(args.reference), truth, metal)
        values.update({f"reference_{k}": v for k, v in ref.items()})
        values["band_rmse_reduction"] = 1.0 - values["rmse_band"] / ref["rmse_band"]
        values["outside_rmse_change"] = values["rmse_outside"] / ref["rmse_outside"] - 1.0
    if args.mask:
        values["dice"] = dice(_mask(args.mask), metal)
    text = format_report(values)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")


def cmd_mar(args):
    cfg = _config(args, {"seed": "output.seed", "output_dir": "paths.output_dir"})
    res = run_mar(cfg, resume=args.resume)
    print(res.report, end="")


def cmd_export(args):
    vol = _volume(args.volume)
    paths = export_slices(vol, args.axis, args.indices, tuple(args.window), args.out_dir, args.prefix)
    for p in paths:
        print(p)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raymar", description="Prior-based metal artifact reduction for cone-beam CT.")
    parser.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="pipeline config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        return p

    p = with_config(sub.add_parser("simulate", help="synthesize scan, misaligned prior and ground truth"))
    p.add_argument("--phantom", help="'spine' or a phantom file")
    p.add_argument("--photons", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="FDK reconstruction of a sinogram")
    p.add_argument("sinogram")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--like", help="volume whose grid to reconstruct on")
    g.add_argument("--dims", type=int, nargs=3)
    p.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    p.add_argument("--window", choices=("ramlak", "shepplogan"), default="shepplogan")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = with_config(sub.add_parser("register", help="align the prior volume to the uncorrected volume"))
    p.add_argument("uncorrected")
    p.add_argument("prior")
    p.add_argument("--out", required=True, help="text file for the 6 parameters and objective")
    p.add_argument("--aligned", help="write the resampled prior here")
    p.add_argument("--seed", type=int)
    p.add_argument("--generations", type=int)
    p.add_argument("--particles", type=int)
    p.add_argument("--penalty", type=float)
    p.set_defaults(func=cmd_register)

    p = with_config(sub.add_parser("segment-metal", help="BHT + DBSCAN metal segmentation"))
    p.add_argument("volume")
    p.add_argument("--out", required=True, help="mask file")
    p.add_argument("--metal-only", help="write the metal-only volume here")
    p.add_argument("--eps", type=float)
    p.add_argument("--min-pts", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--expected", type=int, help="expected number of implants")
    p.set_defaults(func=cmd_segment_metal)

    p = with_config(sub.add_parser("correct", help="ray profile correction over the metal shadow"))
    p.add_argument("sinogram")
    p.add_argument("--uncorrected", required=True)
    p.add_argument("--prior-aligned", required=True)
    p.add_argument("--metal-only", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shadow-out", required=True)
    p.add_argument("--h", type=float)
    p.add_argument("--prior-trust", type=float)
    p.add_argument("--step", type=float)
    p.add_argument("--rho", type=float)
    p.set_defaults(func=cmd_correct)

    p = with_config(sub.add_parser("inpaint", help="seamless in-painting of the corrected shadow"))
    p.add_argument("sinogram")
    p.add_argument("--corrected", required=True)
    p.add_argument("--shadow", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--max-iter", type=int)
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("evaluate", help="RMSE report against ground truth")
    p.add_argument("volume")
    p.add_argument("--truth", required=True)
    p.add_argument("--metal-mask", required=True, help="ground-truth metal mask")
    p.add_argument("--reference", help="uncorrected volume to compare against")
    p.add_argument("--mask", help="segmented metal mask, reported as Dice")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = with_config(sub.add_parser("mar", help="run the full pipeline"))
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--resume", action="store_true", help="reuse artifacts already in the output directory")
    p.set_defaults(func=cmd_mar)

    p = sub.add_parser("export", help="write volume slices as PGM images")
    p.add_argument("volume")
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--indices", type=int, nargs="+", required=True)
    p.add_argument("--window", type=float, nargs=2, required=True, metavar=("LO", "HI"))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--prefix", default="slice")
    p.set_defaults(func=cmd_export)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, MetalNotFoundError):
        return EXIT_NO_METAL
    if isinstance(exc, InpaintError):
        return EXIT_INPAINT
    if isinstance(exc, (FileNotFoundError, io.FormatError)):
        return EXIT_IO
    return EXIT_STAGE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        import numba

        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    np.seterr(all="ignore")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        print(f"raymar {args.command}: {exc}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
