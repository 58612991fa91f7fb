"""Command-line driver: simulate, reconstruct, ablate, metrics, export-slices.

Every command takes a JSON experiment config (``--config``) and dotted
overrides (``--set optim.iterations=500``). Outputs land under
``output_dir`` with fixed names:

``ground_truth.raw``, ``projections.raw``
    written by ``simulate`` (each with a ``.json`` sidecar).
``recon_<method>.raw``, ``metrics_<method>.csv``, ``log_<method>.csv``, ``slices_<method>/``
    written by ``reconstruct``; gaussian methods also write ``cloud_<method>.bin``.
``ablate_<sweep>.csv``
    written by ``ablate``.
``metrics.csv``
    written by ``metrics``.

Exit codes: 0 success, 2 usage, 3 invalid config, 4 missing or malformed
input file, 5 reconstruction failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .density_control import DensityConfig
from .gaussian_model import save_cloud
from .geometry import GridSpec, make_semicircle_geometry
from .initializer import InitConfig, init_from_fbp, init_uniform
from .metrics import evaluate
from .optimizer import DivergenceError, OptimConfig, VoxelIterConfig, reconstruct_gaussian, reconstruct_voxel_iterative
from .phantom_io import (
    PRESETS,
    export_slices,
    load_projections,
    load_volume,
    save_projections,
    save_volume,
    simulate_phantom,
)
from .projector import RampFilter, fbp_reconstruct, forward_project

log = logging.getLogger("gaussct")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_RUN = 5

METHODS = ("fbp", "iterative", "gaussian", "gaussian-uniform")
SWEEPS = ("gaussian-count", "density-control")


class ConfigError(ValueError):
    pass


@dataclass
class SourceConfig:
    phantom: str | None = "abdomen"
    volume: str | None = None
    supersample: int = 2  # phantoms are projected from a grid this much finer

    def __post_init__(self):
        if (self.phantom is None) == (self.volume is None):
            raise ValueError("exactly one of phantom or volume must be set")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")
        if self.volume is not None and self.supersample != 1:
            raise ValueError("supersample must be 1 for a volume source")
        if self.phantom is not None and self.phantom not in PRESETS:
            raise ValueError(f"unknown phantom {self.phantom!r}; choose from {sorted(PRESETS)}")


@dataclass
class GridConfig:
    size: int = 64

    def __post_init__(self):
        if self.size < 2:
            raise ValueError("size must be >= 2")


@dataclass
class GeometryConfig:
    num_views: int = 20
    detector_shape: tuple = (128, 200)
    pixel_size: tuple = (0.025, 0.025)
    source_distance: float = 2.0
    detector_distance: float = 2.0

    def __post_init__(self):
        self.detector_shape = tuple(int(v) for v in self.detector_shape)
        self.pixel_size = tuple(float(v) for v in self.pixel_size)
        if self.num_views < 1:
            raise ValueError("num_views must be >= 1")
        # builds and validates the full geometry once
        self.build()

    def build(self):
        return make_semicircle_geometry(
            self.num_views, self.detector_shape, self.source_distance, self.detector_distance, self.pixel_size
        )


@dataclass
class FBPConfig:
    frequency_scaling: float = 1.0

    def __post_init__(self):
        RampFilter(frequency_scaling=self.frequency_scaling)


@dataclass
class ModelConfig:
    extent: float = 0.08  # truncation half-width d, world units
    checkpoint_every: int = 0  # 0 disables checkpoints

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


@dataclass
class AblateConfig:
    counts: list = field(default_factory=lambda: [2000, 5000, 10000, 15000, 25000])
    phantoms: list = field(default_factory=lambda: ["abdomen", "chest"])

    def __post_init__(self):
        if any(int(c) < 1 for c in self.counts):
            raise ValueError("counts must be positive")
        for p in self.phantoms:
            if p not in PRESETS:
                raise ValueError(f"unknown phantom {p!r}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "out"
    source: SourceConfig = field(default_factory=SourceConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    fbp: FBPConfig = field(default_factory=FBPConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    # library defaults carry the reference constants; these are retuned for the desk-scale loss
    init: InitConfig = field(default_factory=lambda: InitConfig(neighbor_radius=0.03, k_intensity=0.2))
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr_sigma_intensity=0.003))
    density: DensityConfig = field(default_factory=lambda: DensityConfig(grad_threshold=1e-3, max_gaussians=25_000))
    voxel: VoxelIterConfig = field(default_factory=VoxelIterConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    # per-phantom init fields applied over `init`; chest has its own reference k_sigma, with k_I scaled like abdomen
    phantom_init: dict = field(default_factory=lambda: {"chest": {"k_sigma": 0.25, "k_intensity": 0.1}})

    def __post_init__(self):
        for name, fields_ in self.phantom_init.items():
            if name not in PRESETS:
                raise ValueError(f"phantom_init: unknown phantom {name!r}")
            try:
                dataclasses.replace(self.init, **fields_)
            except TypeError as exc:
                raise ValueError(f"phantom_init.{name}: {exc}") from None

    def init_for_source(self) -> InitConfig:
        """``init`` with any ``phantom_init`` entry for the current phantom applied."""
        extra = self.phantom_init.get(self.source.phantom, {}) if self.source.phantom else {}
        return dataclasses.replace(self.init, **extra)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def grid_spec(self) -> GridSpec:
        return GridSpec.unit_cube(self.grid.size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        factory = known[name].default_factory
        base = factory() if factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(base):
            if not isinstance(value, dict):
                raise ConfigError(f"{name}: expected an object, got {type(value).__name__}")
            # keys not given keep this section's defaults
            merged = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)} | value
            kwargs[name] = _build(type(base), merged, f"{where}.{name}" if where else name)
        elif isinstance(value, list) and name in ("gradient_band", "detector_shape", "pixel_size"):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _set_path(doc: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read a JSON config (or start from defaults) and apply ``key.path=value`` overrides."""
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(doc, key.strip(), raw)
    return _build(ExperimentConfig, doc, "")


# --- commands -----------------------------------------------------------------


def _simulate(cfg: ExperimentConfig):
    """Ground truth on the reconstruction grid and its simulated projections."""
    spec = cfg.grid_spec()
    geom = cfg.geometry.build()
    if cfg.source.volume is not None:
        vol = load_volume(cfg.source.volume)
        if vol.spec != spec:
            raise ConfigError(f"source.volume has dims {vol.dims}, grid.size is {cfg.grid.size}")
        return vol, forward_project(vol, geom)
    return simulate_phantom(cfg.source.phantom, spec, geom, cfg.source.supersample)


def cmd_simulate(cfg: ExperimentConfig):
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    gt, proj = _simulate(cfg)
    save_volume(gt, out / "ground_truth.raw")
    save_projections(proj, out / "projections.raw")
    log.info("wrote %s views to %s", proj.geometry.num_views, out / "projections.raw")
    return proj, gt


def _inputs(cfg: ExperimentConfig):
    out = cfg.out
    proj_path = out / "projections.raw"
    if not proj_path.exists():
        raise FileNotFoundError(f"{proj_path} not found; run `simulate` first")
    proj = load_projections(proj_path)
    gt_path = out / "ground_truth.raw"
    reference = load_volume(gt_path) if gt_path.exists() else None
    return proj, reference


def run_method(method: str, cfg: ExperimentConfig, proj, reference=None, checkpoint_dir=None, check_invariants=False):
    """Run one pipeline; returns ``(volume, training log or None, cloud or None)``."""
    spec = cfg.grid_spec()
    fbp = fbp_reconstruct(proj, spec, RampFilter(frequency_scaling=cfg.fbp.frequency_scaling))
    if method == "fbp":
        return fbp, None, None
    if method == "iterative":
        init = fbp if cfg.voxel.init == "fbp" else None
        vol, tlog = reconstruct_voxel_iterative(proj, spec, cfg.voxel, init=init, reference=reference)
        return vol, tlog, None
    rng = np.random.default_rng(cfg.seed)
    if method == "gaussian":
        cloud = init_from_fbp(fbp, cfg.init_for_source(), cfg.model.extent, rng)
    elif method == "gaussian-uniform":
        cloud = init_uniform(fbp, cfg.init_for_source(), cfg.model.extent, rng)
    else:
        raise ValueError(f"unknown method {method!r}")
    k = cfg.model.checkpoint_every

    def checkpoint(step, c):
        if step % k == 0:
            save_cloud(c, Path(checkpoint_dir) / f"checkpoint_{method}_{step:06d}.bin", step)

    callback = checkpoint if checkpoint_dir is not None and k > 0 else None

    cloud, vol, tlog = reconstruct_gaussian(
        proj,
        cloud,
        spec,
        cfg.optim,
        cfg.density,
        reference=reference,
        seed=cfg.seed,
        check_invariants=check_invariants,
        callback=callback,
    )
    return vol, tlog, cloud


def _metrics_row(method, vol, reference, cloud, tlog):
    row = {"method": method, "psnr": "", "ssim": ""}
    if reference is not None:
        rep = evaluate(vol, reference)
        row["psnr"], row["ssim"] = repr(rep.psnr), repr(rep.ssim)
    row["num_gaussians"] = len(cloud) if cloud is not None else 0
    row["iterations"] = len(tlog.rows) if tlog is not None else 0
    row["final_loss"] = repr(tlog.rows[-1]["loss"]) if tlog is not None and tlog.rows else ""
    return row


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_reconstruct(cfg: ExperimentConfig, method: str) -> dict:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    out = cfg.out
    proj, reference = _inputs(cfg)
    vol, tlog, cloud = run_method(method, cfg, proj, reference, checkpoint_dir=out)
    save_volume(vol, out / f"recon_{method}.raw")
    # score what was written, so `metrics` on the files reproduces the row
    vol = load_volume(out / f"recon_{method}.raw")
    export_slices(vol, out / f"slices_{method}", "z")
    if tlog is not None:
        tlog.to_csv(out / f"log_{method}.csv")
    if cloud is not None:
        save_cloud(cloud, out / f"cloud_{method}.bin", len(tlog.rows))
    row = _metrics_row(method, vol, reference, cloud, tlog)
    _write_rows(out / f"metrics_{method}.csv", [row])
    print(f"{method}: psnr={row['psnr'] or 'n/a'} ssim={row['ssim'] or 'n/a'}")
    return row


def _phantom_cfg(cfg: ExperimentConfig, phantom: str) -> ExperimentConfig:
    return dataclasses.replace(cfg, source=SourceConfig(phantom=phantom, supersample=cfg.source.supersample))


def cmd_ablate(cfg: ExperimentConfig, sweep: str) -> list[dict]:
    if sweep not in SWEEPS:
        raise ValueError(f"unknown sweep {sweep!r}")
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if sweep == "gaussian-count":
        if not cfg.ablate.counts:
            raise ConfigError("ablate.counts: empty sweep")
        pcfg = _phantom_cfg(cfg, cfg.ablate.phantoms[0]) if cfg.source.volume is None else cfg
        gt, proj = _simulate(pcfg)
        for n in cfg.ablate.counts:
            run = dataclasses.replace(
                pcfg,
                init=dataclasses.replace(cfg.init, num_gaussians=int(n)),
                density=dataclasses.replace(cfg.density, enabled=False),
            )
            vol, tlog, cloud = run_method("gaussian", run, proj, gt)
            row = {"phantom": pcfg.source.phantom or "volume", "density_control": "off", "init_count": int(n)}
            row.update(_metrics_row("gaussian", vol, gt, cloud, tlog))
            rows.append(row)
    else:
        if not cfg.ablate.phantoms:
            raise ConfigError("ablate.phantoms: empty sweep")
        for phantom in cfg.ablate.phantoms:
            pcfg = _phantom_cfg(cfg, phantom)
            gt, proj = _simulate(pcfg)
            on = dataclasses.replace(pcfg, density=dataclasses.replace(cfg.density, enabled=True))
            vol, tlog, cloud = run_method("gaussian", on, proj, gt)
            row = {"phantom": phantom, "density_control": "on", "init_count": cfg.init.num_gaussians}
            row.update(_metrics_row("gaussian", vol, gt, cloud, tlog))
            rows.append(row)
            # off run starts with as many Gaussians as the on run ended with
            off = dataclasses.replace(
                pcfg,
                init=dataclasses.replace(cfg.init, num_gaussians=len(cloud)),
                density=dataclasses.replace(cfg.density, enabled=False),
            )
            vol, tlog, cloud = run_method("gaussian", off, proj, gt)
            row = {"phantom": phantom, "density_control": "off", "init_count": off.init.num_gaussians}
            row.update(_metrics_row("gaussian", vol, gt, cloud, tlog))
            rows.append(row)
    _write_rows(out / f"ablate_{sweep}.csv", rows)
    for r in rows:
        print(f"{r['phantom']} dc={r['density_control']} n0={r['init_count']} n={r['num_gaussians']} psnr={r['psnr']}")
    return rows


def cmd_metrics(path_a, path_b, out_path=None):
    a = load_volume(path_a)
    b = load_volume(path_b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    rep = evaluate(a, b)
    print(f"psnr={rep.psnr!r} ssim={rep.ssim!r}")
    if out_path is not None:
        _write_rows(Path(out_path), [{"psnr": repr(rep.psnr), "ssim": repr(rep.ssim)}])
    return rep


def cmd_export_slices(path, out_dir, axis):
    paths = export_slices(load_volume(path), out_dir, axis)
    print(f"wrote {len(paths)} slices to {out_dir}")
    return paths


# --- entry point --------------------------------------------------------------


def _set_threads(n):
    if n is None:
        env = os.environ.get("GAUSSCT_THREADS")
        if not env:
            return
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"GAUSSCT_THREADS must be an integer, got {env!r}") from None
    import numba

    if not 1 <= n <= numba.config.NUMBA_NUM_THREADS:
        raise ConfigError(f"threads must be in [1, {numba.config.NUMBA_NUM_THREADS}], got {n}")
    numba.set_num_threads(n)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--threads", type=int, help="worker threads (default: $GAUSSCT_THREADS or all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gaussct", description="Sparse-view cone-beam CT with 3D Gaussians.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="render the phantom and write projections")
    r = sub.add_parser("reconstruct", parents=[common], help="reconstruct from simulated projections")
    r.add_argument("method", choices=METHODS)
    a = sub.add_parser("ablate", parents=[common], help="run an ablation sweep")
    a.add_argument("sweep", choices=SWEEPS)
    m = sub.add_parser("metrics", parents=[common], help="PSNR / SSIM between two volumes")
    m.add_argument("volume_a")
    m.add_argument("volume_b")
    m.add_argument("--out", help="also write a one-row CSV here")
    e = sub.add_parser("export-slices", parents=[common], help="write PGM slices of a volume")
    e.add_argument("volume")
    e.add_argument("out_dir")
    e.add_argument("--axis", default="z", choices=("x", "y", "z"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _set_threads(args.threads)
        if args.command == "metrics":
            cmd_metrics(args.volume_a, args.volume_b, args.out)
            return EXIT_OK
        if args.command == "export-slices":
            cmd_export_slices(args.volume, args.out_dir, args.axis)
            return EXIT_OK
        cfg = load_config(args.config, args.set)
        cfg.out.mkdir(parents=True, exist_ok=True)
        (cfg.out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "reconstruct":
            cmd_reconstruct(cfg, args.method)
        else:
            cmd_ablate(cfg, args.sweep)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, PermissionError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DivergenceError, RuntimeError) as exc:
        print(f"reconstruction failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    except ValueError as exc:
        # malformed files and shape mismatches
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
