"""End-to-end metal artifact reduction with every intermediate kept on disk.

Config files are INI style (``configparser``).  All keys are optional except
the input paths (or a ``[simulation]`` section that produces them)::

    [paths]
    prior_volume = prior.hdr            ; metal-free prior scan
    uncorrected_sinogram = scan.hdr     ; measured -log data
    uncorrected_volume =                ; optional; reconstructed when empty
    ground_truth = truth.hdr            ; optional, enables the metrics report
    ground_truth_metal = truth_metal.hdr
    output_dir = mar_out

    [simulation]                        ; present => synthesize the inputs
    phantom = spine                     ; 'spine' or a phantom file
    spectrum = default                  ; 'default' or a spectrum file
    reference_energy = 70
    photons = 1e6                       ; empty for noiseless data
    prior_motion = 4.15 -2.1 1.66 2 -3 1  ; tx ty tz (mm) rx ry rz (deg)
    sad = 647.7
    sdd = 1147.7
    det_bins = 256 64
    det_size = 340 240
    n_views = 180

    [registration]
    n_particles = 64
    n_generations = 300
    max_shift = 30                      ; mm
    max_angle = 15                      ; degrees
    w = 0.729
    c1 = 1.49445
    c2 = 1.49445
    penalty_factor = 2.0
    stride = 2
    polish = yes

    [metal]
    eps =                               ; mm, default 2 x max spacing
    min_pts = 10
    min_cluster = 20
    rho =                               ; 1/mm, default from the volume
    expected_clusters =

    [correction]
    h = 10
    prior_trust = 0.7
    step =                              ; mm, default half the smallest spacing

    [inpaint]
    tolerance = 1e-6
    max_iter = 10000

    [output]
    window = shepplogan
    reinsert_metal = no
    seed = 0
"""

from __future__ import annotations

import configparser
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import io
from .correction import CorrectionParams, build_corrected_sinogram
from .fdk import fdk_reconstruct
from .inpaint import inpaint_sinogram, seam_discontinuity
from .metal import DbscanParams, default_rho, metal_only_volume, metal_shadow, segment_metal
from .metrics import band_report, format_report
from .projector import default_step
from .registration import SwarmConfig, default_bounds, register, registration_params
from .simulation import (
    MaterialSpectrumModel, build_phantom, read_phantom, read_spectrum, simulate_polychromatic, spine_phantom,
)
from .volume import BinaryMask3D, ConeBeamGeometry, RigidTransform, Sinogram, Volume3D, resample_rigid

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid or incomplete pipeline configuration."""


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class PathsConfig:
    prior_volume: str = ""
    uncorrected_sinogram: str = ""
    uncorrected_volume: str = ""
    ground_truth: str = ""
    ground_truth_metal: str = ""
    output_dir: str = "mar_out"


@dataclass
class SimulationConfig:
    phantom: str = "spine"
    spectrum: str = "default"
    reference_energy: float = 70.0
    photons: float | None = 1e6
    prior_motion: tuple = (4.15, -2.1, 1.66, 2.0, -3.0, 1.0)
    sad: float = 647.7
    sdd: float = 1147.7
    det_bins: tuple = (256, 64)
    det_size: tuple = (340.0, 240.0)
    n_views: int = 180


@dataclass
class RegistrationConfig:
    n_particles: int = 64
    n_generations: int = 300
    max_shift: float = 30.0
    max_angle: float = 15.0
    w: float = 0.729
    c1: float = 1.49445
    c2: float = 1.49445
    penalty_factor: float = 2.0
    stride: int = 2
    polish: bool = True


@dataclass
class MetalConfig:
    eps: float | None = None
    min_pts: int = 10
    min_cluster: int = 20
    rho: float | None = None
    expected_clusters: int | None = None


@dataclass
class CorrectionConfig:
    h: float = 10.0
    prior_trust: float = 0.7
    step: float | None = None


@dataclass
class InpaintConfig:
    tolerance: float = 1e-6
    max_iter: int = 10000


@dataclass
class OutputConfig:
    window: str = "shepplogan"
    reinsert_metal: bool = False
    seed: int = 0


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    simulation: SimulationConfig | None = None
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    metal: MetalConfig = field(default_factory=MetalConfig)
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)
    inpaint: InpaintConfig = field(default_factory=InpaintConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def out_dir(self) -> Path:
        return Path(self.paths.output_dir)

    def swarm(self) -> SwarmConfig:
        r = self.registration
        return SwarmConfig(r.n_particles, r.n_generations, default_bounds(r.max_shift, r.max_angle),
                           r.w, r.c1, r.c2, self.output.seed)


_SECTIONS = {
    "paths": PathsConfig,
    "simulation": SimulationConfig,
    "registration": RegistrationConfig,
    "metal": MetalConfig,
    "correction": CorrectionConfig,
    "inpaint": InpaintConfig,
    "output": OutputConfig,
}


def _parse_value(default, text: str, key: str, optional: bool = False):
    text = text.strip()
    if optional and (text == "" or text.lower() == "none"):
        return None
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "yes", "true", "on"):
            return True
        if low in ("0", "no", "false", "off"):
            return False
        raise ConfigError(f"{key}: expected yes/no, got {text!r}")
    if text == "":
        if isinstance(default, str):
            return ""
        raise ConfigError(f"{key}: a value is required")
    try:
        if isinstance(default, tuple):
            kind = int if all(isinstance(v, int) for v in default) else float
            return tuple(kind(v) for v in text.replace(",", " ").split())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, str):
            return text
        # optional numbers default to None: accept int when it parses as one
        try:
            return int(text)
        except ValueError:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc


def _apply(section_obj, items: dict, section: str):
    names = {f.name: f for f in fields(section_obj)}
    updates = {}
    for key, text in items.items():
        if key not in names:
            raise ConfigError(f"[{section}]: unknown key {key!r}")
        optional = "None" in str(names[key].type)
        updates[key] = _parse_value(getattr(section_obj, key), text, f"{section}.{key}", optional)
    return replace(section_obj, **updates)


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read a config file (optional) and apply ``{"section.key": "value"}`` overrides."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if path is not None:
        if not cp.read(path):
            raise ConfigError(f"cannot read config file {path}")
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        sec, key = dotted.split(".", 1)
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp[sec][key] = str(value)
    cfg = PipelineConfig()
    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        current = getattr(cfg, sec)
        if current is None:
            current = _SECTIONS[sec]()
        setattr(cfg, sec, _apply(current, dict(cp[sec]), sec))
    _validate(cfg)
    return cfg


def _validate(cfg: PipelineConfig):
    try:
        cfg.swarm()
        CorrectionParams(1.0, cfg.correction.h, cfg.correction.prior_trust)
        if cfg.metal.eps is not None:
            DbscanParams(cfg.metal.eps, cfg.metal.min_pts)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.inpaint.tolerance <= 0 or cfg.inpaint.max_iter < 1:
        raise ConfigError("inpaint tolerance must be positive and max_iter >= 1")


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, tuple):
        return " ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_text(cfg: PipelineConfig) -> str:
    """Fully resolved config, defaults included, in the file grammar."""
    lines = []
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        if obj is None:
            continue
        lines.append(f"[{sec}]")
        for k, v in asdict(obj).items():
            lines.append(f"{k} = {_format_value(v)}")
        lines.append("")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

ARTIFACTS = {
    "uncorrected_sinogram": "uncorrected_sino.hdr",
    "uncorrected": "uncorrected.hdr",
    "prior": "prior.hdr",
    "ground_truth": "ground_truth.hdr",
    "ground_truth_metal": "ground_truth_metal.hdr",
    "registration": "registration.txt",
    "prior_aligned": "prior_aligned.hdr",
    "metal_mask": "metal_mask.hdr",
    "metal_only": "metal_only.hdr",
    "shadow": "shadow.hdr",
    "corrected_sinogram": "corrected_sino.hdr",
    "inpainted_sinogram": "inpainted_sino.hdr",
    "final": "final.hdr",
    "report": "report.txt",
}


@dataclass
class MarResult:
    final: Volume3D
    report: str
    metrics: dict
    outputs: dict


def write_registration(path, T: RigidTransform, value: float, polished: bool):
    t, r = T.t, T.r
    text = (
        f"tx = {t[0]!r}\nty = {t[1]!r}\ntz = {t[2]!r}\n"
        f"rx = {r[0]!r}\nry = {r[1]!r}\nrz = {r[2]!r}\n"
        f"center = {_format_value(T.center)}\n"
        f"objective = {value!r}\npolished = {'yes' if polished else 'no'}\n"
    )
    Path(path).write_text(text)


def read_registration(path) -> RigidTransform:
    vals = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            vals[k.strip()] = v.strip()
    try:
        center = tuple(float(x) for x in vals["center"].split())
        return RigidTransform(
            tuple(float(vals[k]) for k in ("tx", "ty", "tz")),
            tuple(float(vals[k]) for k in ("rx", "ry", "rz")),
            center,
        )
    except (KeyError, ValueError) as exc:
        raise io.FormatError(f"{path}: malformed registration result") from exc


def simulate_inputs(cfg: PipelineConfig, out: Path) -> dict:
    """Synthesize the scan, the misaligned metal-free prior and ground truth from ``[simulation]``."""
    s = cfg.simulation
    model = MaterialSpectrumModel.default() if s.spectrum == "default" else read_spectrum(s.spectrum)
    spec = spine_phantom() if s.phantom == "spine" else read_phantom(s.phantom)
    geom = ConeBeamGeometry(s.sad, s.sdd, s.det_bins, s.det_size, n_views=s.n_views)
    motion = np.asarray(s.prior_motion, dtype=float)
    if motion.shape != (6,):
        raise ConfigError("simulation.prior_motion needs 6 numbers")
    motion = RigidTransform(tuple(motion[:3]), tuple(np.deg2rad(motion[3:])))
    truth, labels = build_phantom(spec, model, s.reference_energy)
    _, prior_labels = build_phantom(spec.without("metal").transformed(motion.inverse()), model, s.reference_energy)
    seed = cfg.output.seed
    sino = simulate_polychromatic(labels, model, geom, photons=s.photons, seed=2 * seed + 1)
    prior_sino = simulate_polychromatic(prior_labels, model, geom, photons=s.photons, seed=2 * seed + 2)
    prior = fdk_reconstruct(prior_sino, spec.grid(), cfg.output.window)
    paths = {k: out / ARTIFACTS[k] for k in ("uncorrected_sinogram", "prior", "ground_truth", "ground_truth_metal")}
    io.write_sinogram(paths["uncorrected_sinogram"], sino)
    io.write_volume(paths["prior"], prior)
    io.write_volume(paths["ground_truth"], truth)
    io.write_volume(paths["ground_truth_metal"], labels.mask("metal"))
    return paths


class _Runner:
    def __init__(self, cfg: PipelineConfig, resume: bool):
        self.cfg = cfg
        self.resume = resume
        self.out = cfg.out_dir
        self.outputs = {}
        self.timings = {}

    def path(self, key) -> Path:
        return self.out / ARTIFACTS[key]

    def have(self, key) -> bool:
        return self.resume and self.path(key).exists()

    def persist(self, key, obj):
        # later stages use the stored (float32) copy, so a resumed run sees identical inputs
        if isinstance(obj, Sinogram):
            io.write_sinogram(self.path(key), obj)
            return io.read_sinogram(self.path(key))
        io.write_volume(self.path(key), obj)
        return io.read_volume(self.path(key))

    def stage(self, name, fn, *args):
        t0 = time.perf_counter()
        try:
            result = fn(*args)
        except (ConfigError, StageError):
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0
        log.info("stage %s done in %.1f s", name, self.timings[name])
        return result


def run_mar(cfg: PipelineConfig, resume: bool = False) -> MarResult:
    """Run register -> localize metal -> correct -> in-paint -> reconstruct.

    Every intermediate is written under ``cfg.paths.output_dir``.  With
    ``resume`` an existing artifact is loaded instead of recomputed, so a run
    can restart from any stage.  Failures raise :class:`StageError` naming the
    stage; artifacts written before it are kept.
    """
    run = _Runner(cfg, resume)
    run.out.mkdir(parents=True, exist_ok=True)
    p = cfg.paths
    if cfg.simulation is not None:
        if all(run.have(k) for k in ("uncorrected_sinogram", "prior", "ground_truth", "ground_truth_metal")):
            sim = {k: run.path(k) for k in ("uncorrected_sinogram", "prior", "ground_truth", "ground_truth_metal")}
        else:
            sim = run.stage("simulate", simulate_inputs, cfg, run.out)
        p = replace(p, uncorrected_sinogram=str(sim["uncorrected_sinogram"]), prior_volume=str(sim["prior"]),
                    ground_truth=str(sim["ground_truth"]), ground_truth_metal=str(sim["ground_truth_metal"]))
    if not p.uncorrected_sinogram or not p.prior_volume:
        raise ConfigError("paths.uncorrected_sinogram and paths.prior_volume are required (or a [simulation] section)")
    for name in (p.uncorrected_sinogram, p.prior_volume):
        if not io._paths(name)[0].exists():
            raise FileNotFoundError(f"input file {name} does not exist")

    sino = run.stage("load", io.read_sinogram, p.uncorrected_sinogram)
    prior = run.stage("load", io.read_volume, p.prior_volume)
    if isinstance(prior, BinaryMask3D):
        raise ConfigError("prior_volume holds a mask, not a volume")

    # uncorrected reconstruction
    if p.uncorrected_volume:
        unc = run.stage("load", io.read_volume, p.uncorrected_volume)
    elif run.have("uncorrected"):
        unc = io.read_volume(run.path("uncorrected"))
    else:
        unc = run.stage("reconstruct", fdk_reconstruct, sino, prior, cfg.output.window)
        unc = run.persist("uncorrected", unc)

    # registration
    if run.have("registration") and run.have("prior_aligned"):
        aligned = io.read_volume(run.path("prior_aligned"))
    else:
        def _register():
            r = cfg.registration
            params = registration_params(unc, prior, r.penalty_factor, r.stride)
            res = register(unc, prior, cfg.swarm(), params, polish=r.polish)
            write_registration(run.path("registration"), res.transform, res.value, res.polished)
            return resample_rigid(prior, res.transform, unc)

        aligned = run.persist("prior_aligned", run.stage("register", _register))

    # metal localization
    m = cfg.metal
    if run.have("metal_mask") and run.have("metal_only"):
        mask = io.read_volume(run.path("metal_mask"))
        metal_vol = io.read_volume(run.path("metal_only"))
        rho = float(metal_vol.data.max())
    else:
        def _segment():
            dbp = DbscanParams(m.eps, m.min_pts) if m.eps is not None else DbscanParams.for_spacing(unc.spacing, m.min_pts)
            seg = segment_metal(unc, dbp, m.min_cluster, m.expected_clusters)
            rho = m.rho if m.rho is not None else default_rho(unc, seg.mask, seg.bone_level)
            return seg.mask, rho

        mask, rho = run.stage("segment-metal", _segment)
        mask = run.persist("metal_mask", mask)
        metal_vol = run.persist("metal_only", metal_only_volume(unc, mask, rho))
        rho = float(metal_vol.data.max())

    step = cfg.correction.step if cfg.correction.step is not None else default_step(unc)
    if run.have("shadow"):
        shadow = io.read_shadow(run.path("shadow"))
    else:
        shadow = run.stage("shadow", metal_shadow, metal_vol, sino.geometry, step, rho)
        io.write_shadow(run.path("shadow"), shadow)

    if run.have("corrected_sinogram"):
        corr = io.read_sinogram(run.path("corrected_sinogram"))
    else:
        cp = CorrectionParams(rho, cfg.correction.h, cfg.correction.prior_trust)
        corr = run.stage("correct", build_corrected_sinogram, sino, unc, aligned, metal_vol, shadow, step, cp)
        corr = run.persist("corrected_sinogram", corr)

    if run.have("inpainted_sinogram"):
        new = io.read_sinogram(run.path("inpainted_sinogram"))
    else:
        new = run.stage("inpaint", inpaint_sinogram, sino, corr, shadow, cfg.inpaint.tolerance, cfg.inpaint.max_iter)
        new = run.persist("inpainted_sinogram", new)

    final = run.stage("reconstruct-final", fdk_reconstruct, new, unc, cfg.output.window)
    if cfg.output.reinsert_metal:
        final = final.with_data(np.where(mask.data, rho, final.data))
    io.write_volume(run.path("final"), final)

    metrics = {
        "rho": float(rho),
        "metal_voxels": int(mask.data.sum()),
        "shadow_pixels": shadow.count,
        "seam_discontinuity": seam_discontinuity(new, sino, shadow),
    }
    if p.ground_truth:
        truth = io.read_volume(p.ground_truth)
        gt_metal = io.read_volume(p.ground_truth_metal) if p.ground_truth_metal else mask
        before = band_report(unc, truth, gt_metal)
        after = band_report(final, truth, gt_metal)
        metrics.update({f"uncorrected_{k}": v for k, v in before.items()})
        metrics.update({f"corrected_{k}": v for k, v in after.items()})
        metrics["band_rmse_reduction"] = 1.0 - after["rmse_band"] / before["rmse_band"]
        metrics["outside_rmse_change"] = after["rmse_outside"] / before["rmse_outside"] - 1.0
    for name, secs in run.timings.items():
        metrics[f"time_{name.replace('-', '_')}_s"] = round(secs, 3)
    report = "# metrics\n" + format_report(metrics) + "\n# config\n" + config_text(cfg)
    run.path("report").write_text(report)
    return MarResult(final, report, metrics, {k: run.path(k) for k in ARTIFACTS if run.path(k).exists()})


# --------------------------------------------------------------------------
# slice export
# --------------------------------------------------------------------------

AXES = {"z": 0, "y": 1, "x": 2}


def window_to_bytes(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Linear window ``[lo, hi] -> [0, 255]`` with clamping."""
    if not hi > lo:
        raise ValueError("window needs lo < hi")
    scaled = np.clip((np.asarray(img, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8)


def write_pgm(path, img8: np.ndarray) -> Path:
    """Binary (P5) 8-bit portable graymap."""
    h, w = img8.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img8, dtype=np.uint8).tobytes())
    return path


def export_slices(vol: Volume3D, axis: str, indices, window, out_dir, prefix: str = "slice") -> list:
    """Write slices of ``vol`` across ``axis`` (``'z'`` transverse, ``'y'`` coronal, ``'x'`` sagittal) as PGM files."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}")
    lo, hi = window
    if not hi > lo:
        raise ValueError("window needs lo < hi")
    a = AXES[axis]
    n = vol.data.shape[a]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for idx in indices:
        idx = int(idx)
        if not 0 <= idx < n:
            raise IndexError(f"slice {idx} outside 0..{n - 1} along {axis}")
        img = np.take(vol.data, idx, axis=a)
        written.append(write_pgm(out_dir / f"{prefix}_{axis}{idx:04d}.pgm", window_to_bytes(img, lo, hi)))
    return written
