import csv
import json

import numpy as np
import pytest

from gaussct.cli import (
    EXIT_CONFIG,
    EXIT_INPUT,
    EXIT_OK,
    ConfigError,
    ExperimentConfig,
    load_config,
    main,
)
from gaussct.metrics import evaluate
from gaussct.phantom_io import load_projections, load_volume


def tiny_args(out):
    return [
        "--set", f"output_dir={out}",
        "--set", "grid.size=16",
        "--set", "geometry.detector_shape=[24,36]",
        "--set", "geometry.pixel_size=[0.1333,0.1389]",
        "--set", "init.num_gaussians=300",
        "--set", "optim.iterations=12",
        "--set", "voxel.iterations=12",
        "--set", "density.start_iteration=5",
        "--set", "density.interval=5",
        "--set", "model.extent=0.15",
    ]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_default_config_matches_desk_setup():
    cfg = ExperimentConfig()
    assert cfg.geometry.num_views == 20
    assert cfg.optim.lr_mu_start == 2e-4 and cfg.optim.lr_mu_end == 2e-6
    assert cfg.density.min_intensity == 0.001 and cfg.density.start_iteration == 100
    assert cfg.fbp.frequency_scaling == 1.0


def test_override_keeps_section_defaults():
    base = ExperimentConfig()
    cfg = load_config(None, ["init.num_gaussians=5"])
    assert cfg.init.num_gaussians == 5
    assert cfg.init.neighbor_radius == base.init.neighbor_radius == 0.03
    assert cfg.density == base.density


def test_phantom_init_applies_to_its_phantom_only():
    chest = load_config(None, ["source.phantom=chest"]).init_for_source()
    assert (chest.k_sigma, chest.k_intensity) == (0.25, 0.1)
    abdomen = load_config(None, []).init_for_source()
    assert (abdomen.k_sigma, abdomen.k_intensity) == (0.12, 0.2)
    with pytest.raises(ConfigError, match="phantom_init"):
        load_config(None, ['phantom_init={"pelvis": {}}'])
    with pytest.raises(ConfigError, match="k_sgma"):
        load_config(None, ['phantom_init={"chest": {"k_sgma": 1}}'])


def test_unknown_keys_rejected(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"optim": {"iteratons": 5}}))
    with pytest.raises(ConfigError, match="iteratons"):
        load_config(tmp_path / "c.json")
    with pytest.raises(ConfigError, match="colour"):
        load_config(None, ["colour=red"])


def test_overrides_and_field_messages(tmp_path):
    cfg = load_config(None, ["optim.iterations=7", "init.gradient_band=[20,80]", "source.phantom=chest"])
    assert cfg.optim.iterations == 7 and cfg.init.gradient_band == (20, 80) and cfg.source.phantom == "chest"
    with pytest.raises(ConfigError, match="source"):
        load_config(None, ["source.phantom=null"])
    with pytest.raises(ConfigError, match="density"):
        load_config(None, ["density.interval=0"])
    with pytest.raises(ConfigError, match="supersample"):
        load_config(None, ["source.supersample=0"])


def test_simulate_writes_stack(tmp_path):
    assert main(["simulate", *tiny_args(tmp_path)]) == EXIT_OK
    proj = load_projections(tmp_path / "projections.raw")
    assert proj.data.shape == (20, 24, 36)
    assert load_volume(tmp_path / "ground_truth.raw").data.shape == (16, 16, 16)
    assert main(["simulate", *tiny_args(tmp_path / "one"), "--set", "geometry.num_views=1"]) == EXIT_OK
    assert load_projections(tmp_path / "one" / "projections.raw").data.shape[0] == 1


def test_missing_source_is_config_error(tmp_path, capsys):
    code = main(["simulate", *tiny_args(tmp_path), "--set", "source.phantom=null"])
    assert code == EXIT_CONFIG
    assert "source" in capsys.readouterr().err


def test_reconstruct_before_simulate_is_input_error(tmp_path):
    assert main(["reconstruct", "fbp", *tiny_args(tmp_path)]) == EXIT_INPUT


def test_unknown_method_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["reconstruct", "nerp", *tiny_args(tmp_path)])
    assert exc.value.code == 2


@pytest.mark.parametrize("method", ["fbp", "iterative", "gaussian", "gaussian-uniform"])
def test_reconstruct_outputs(tmp_path, method):
    assert main(["simulate", *tiny_args(tmp_path)]) == EXIT_OK
    assert main(["reconstruct", method, *tiny_args(tmp_path)]) == EXIT_OK
    rows = read_csv(tmp_path / f"metrics_{method}.csv")
    assert len(rows) == 1 and rows[0]["method"] == method
    vol = load_volume(tmp_path / f"recon_{method}.raw")
    gt = load_volume(tmp_path / "ground_truth.raw")
    assert float(rows[0]["psnr"]) == evaluate(vol, gt).psnr
    assert len(list((tmp_path / f"slices_{method}").glob("*.pgm"))) == 16
    if method.startswith("gaussian"):
        assert (tmp_path / f"cloud_{method}.bin").exists()
        assert len(read_csv(tmp_path / f"log_{method}.csv")) == 12


def test_reconstruct_is_reproducible(tmp_path):
    for run in ("a", "b"):
        assert main(["simulate", *tiny_args(tmp_path / run)]) == EXIT_OK
        assert main(["reconstruct", "gaussian", *tiny_args(tmp_path / run)]) == EXIT_OK
    a = (tmp_path / "a" / "metrics_gaussian.csv").read_bytes()
    b = (tmp_path / "b" / "metrics_gaussian.csv").read_bytes()
    assert a == b


def test_checkpoints(tmp_path):
    main(["simulate", *tiny_args(tmp_path)])
    assert main(["reconstruct", "gaussian", *tiny_args(tmp_path), "--set", "model.checkpoint_every=4"]) == EXIT_OK
    names = sorted(p.name for p in tmp_path.glob("checkpoint_gaussian_*.bin"))
    assert names == ["checkpoint_gaussian_000004.bin", "checkpoint_gaussian_000008.bin", "checkpoint_gaussian_000012.bin"]


def test_ablate_sweeps(tmp_path):
    args = tiny_args(tmp_path)
    assert main(["ablate", "gaussian-count", *args, "--set", "ablate.counts=[100]"]) == EXIT_OK
    assert len(read_csv(tmp_path / "ablate_gaussian-count.csv")) == 1
    assert main(["ablate", "gaussian-count", *args, "--set", "ablate.counts=[]"]) == EXIT_CONFIG
    assert main(["ablate", "density-control", *args, "--set", 'ablate.phantoms=["chest"]']) == EXIT_OK
    rows = read_csv(tmp_path / "ablate_density-control.csv")
    assert [r["density_control"] for r in rows] == ["on", "off"]
    # off run is initialized with the on run's final count
    assert rows[1]["init_count"] == rows[0]["num_gaussians"]


def test_metrics_command(tmp_path, capsys):
    main(["simulate", *tiny_args(tmp_path)])
    gt = tmp_path / "ground_truth.raw"
    assert main(["metrics", str(gt), str(gt), "--out", str(tmp_path / "m.csv")]) == EXIT_OK
    row = read_csv(tmp_path / "m.csv")[0]
    assert row["psnr"] == "inf" and float(row["ssim"]) == 1.0
    main(["simulate", *tiny_args(tmp_path / "small"), "--set", "grid.size=12"])
    assert main(["metrics", str(gt), str(tmp_path / "small" / "ground_truth.raw")]) == EXIT_INPUT


def test_export_slices_command(tmp_path):
    main(["simulate", *tiny_args(tmp_path)])
    assert main(["export-slices", str(tmp_path / "ground_truth.raw"), str(tmp_path / "sl"), "--axis", "y"]) == EXIT_OK
    assert len(list((tmp_path / "sl").glob("slice_y_*.pgm"))) == 16


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("GAUSSCT_THREADS", "many")
    assert main(["simulate", *tiny_args(tmp_path)]) == EXIT_CONFIG
    monkeypatch.setenv("GAUSSCT_THREADS", "1")
    assert main(["simulate", *tiny_args(tmp_path)]) == EXIT_OK
    assert np.isfinite(load_projections(tmp_path / "projections.raw").data).all()
