import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from tvlab import cli_io
from tvlab.cli_io import (ENERGY_COLUMNS, METRIC_COLUMNS, ExperimentSpec, add_gaussian_noise,
                          build_parser, crop_patches, load_config, load_directory, load_image, main,
                          piecewise_constant_image, read_csv, regression_suite, run_experiment,
                          save_image, spec_from_args, textured_image, training_patches,
                          write_energy_csv, write_metric_csv)

DATA = Path(__file__).parent / "data"
WALL_CLOCK = {"wall_clock_seconds", "runtime_fs", "runtime_rs"}


# ---- images --------------------------------------------------------------------

@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_eight_bit_round_trip(tmp_path, suffix, rng):
    img = rng.integers(0, 256, (13, 17)).astype(np.float64)
    save_image(img, tmp_path / f"x{suffix}")
    np.testing.assert_array_equal(load_image(tmp_path / f"x{suffix}"), img)


def test_save_clips_and_rounds(tmp_path):
    save_image(np.array([[-20.0, 3.4, 3.6, 300.0]]), tmp_path / "c.png")
    np.testing.assert_array_equal(load_image(tmp_path / "c.png"), [[0, 3, 4, 255]])


def test_rgb_to_gray(tmp_path):
    rgb = np.zeros((2, 2, 3), np.uint8)
    rgb[0, 0] = (100, 100, 100)
    rgb[0, 1] = (255, 0, 0)
    rgb[1, 0] = (0, 255, 0)
    rgb[1, 1] = (0, 0, 255)
    Image.fromarray(rgb, "RGB").save(tmp_path / "rgb.png")
    g = load_image(tmp_path / "rgb.png")
    np.testing.assert_allclose(g, [[100, 0.299 * 255], [0.587 * 255, 0.114 * 255]], rtol=1e-12)
    assert g[0, 0] == 100.0


def test_image_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "missing.png")
    (tmp_path / "bad.png").write_bytes(b"not an image at all")
    with pytest.raises(ValueError):
        load_image(tmp_path / "bad.png")
    (tmp_path / "trunc.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(ValueError):
        load_image(tmp_path / "trunc.pgm")
    with pytest.raises(ValueError):
        load_image(tmp_path / "x.jpg")
    with pytest.raises(ValueError):
        save_image(np.zeros((3, 3)), tmp_path / "x.bmp")


def test_load_directory(tmp_path):
    save_image(np.full((4, 4), 9.0), tmp_path / "b.png")
    save_image(np.full((4, 4), 7.0), tmp_path / "a.pgm")
    (tmp_path / "notes.txt").write_text("skip me")
    items = load_directory(tmp_path)
    assert [n for n, _ in items] == ["a", "b"]
    assert items[0][1][0, 0] == 7.0


# ---- noise and synthetic data -------------------------------------------------------

def test_noise_contract(rng):
    img = rng.uniform(0, 255, (256, 256))
    np.testing.assert_array_equal(add_gaussian_noise(img, 0, seed=1), img)
    a = add_gaussian_noise(img, 15, seed=4)
    np.testing.assert_array_equal(a, add_gaussian_noise(img, 15, seed=4))
    assert abs((a - img).std() - 15) <= 0.05 * 15
    assert not np.array_equal(a, add_gaussian_noise(img, 15, seed=5))
    assert (add_gaussian_noise(np.zeros((64, 64)), 15, seed=0) < 0).any()
    with pytest.raises(ValueError):
        add_gaussian_noise(img, -1)


def test_synthetic_generators():
    pc = piecewise_constant_image(64, 64, seed=2)
    assert np.unique(pc).size <= 13
    np.testing.assert_array_equal(pc, piecewise_constant_image(64, 64, seed=2))
    tex = textured_image(64, 64, seed=2)
    assert tex.min() >= 20 - 1e-9 and tex.max() <= 235 + 1e-9
    suite = regression_suite(32)
    assert len(suite) == 20 and suite[0][0] == "pc00" and suite[10][0] == "tex00"


# ---- patches --------------------------------------------------------------------

def test_single_crop_reproducible():
    src = [np.arange(400.0).reshape(20, 20)]
    a = crop_patches(src, 8, 1, seed=3)
    b = crop_patches(src, 8, 1, seed=3)
    assert a.coords == b.coords
    k, r, c = a.coords[0]
    np.testing.assert_array_equal(a.train[0], src[0][r:r + 8, c:c + 8])


def test_split_sizes():
    ps = crop_patches([np.zeros((16, 16))], 4, 10, seed=0)
    assert len(ps.train) == 8 and len(ps.validation) == 2
    assert len(crop_patches([np.zeros((16, 16))], 4, 200).train) == 160


def test_constant_source_gives_constant_patches():
    ps = crop_patches([np.full((20, 30), 42.0)], 5, 12, seed=1)
    assert np.all(ps.all == 42.0)


def test_crop_errors():
    with pytest.raises(ValueError):
        crop_patches([np.zeros((5, 10))], 8, 1)
    with pytest.raises(ValueError):
        crop_patches([], 8, 1)


def test_training_patches_deterministic():
    a = training_patches(count=20, patch_size=16, seed=2)
    b = training_patches(count=20, patch_size=16, seed=2)
    np.testing.assert_array_equal(a.all, b.all)
    assert a.train.shape == (16, 16, 16)


# ---- CSV schemas ----------------------------------------------------------------

def test_energy_csv_golden(tmp_path):
    write_energy_csv([412.5, 300.25, 299.0], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_bytes() == (DATA / "golden_energy.csv").read_bytes()
    assert tuple(read_csv(tmp_path / "e.csv")[0]) == ENERGY_COLUMNS


def test_metric_csv_golden(tmp_path):
    rows = [dict(image_id="img0", psnr=30.5, ssim=0.9, energy_fs=120.0, energy_rs=120.0,
                 energy_rsnet=121.5, runtime_fs=0.25, runtime_rs=0.2, extra="dropped"),
            dict(image_id="img1", psnr=28.0, ssim=0.85, energy_fs=99.5, energy_rs=99.5,
                 energy_rsnet="", runtime_fs=0.5, runtime_rs=0.4)]
    write_metric_csv(rows, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_bytes() == (DATA / "golden_metrics.csv").read_bytes()
    assert METRIC_COLUMNS == ("image_id", "psnr", "ssim", "energy_fs", "energy_rs", "energy_rsnet",
                              "runtime_fs", "runtime_rs")


def test_numpy_scalars_written_plainly(tmp_path):
    write_energy_csv(np.array([1.5, 2.25]), tmp_path / "e.csv")
    assert "np." not in (tmp_path / "e.csv").read_text()


# ---- configuration and CLI ------------------------------------------------------------

def test_config_then_flags_precedence(tmp_path):
    (tmp_path / "cfg.yaml").write_text("lambda: 5\ninner-iters: 12\nseed: 4\n")
    args = build_parser().parse_args(["smooth", "--config", str(tmp_path / "cfg.yaml"), "--seed", "9"])
    spec = spec_from_args(args)
    assert (spec.lam, spec.inner_iters, spec.seed, spec.beta) == (5.0, 12, 9, 0.2)
    (tmp_path / "cfg.json").write_text(json.dumps({"inner_iters": 7, "beta": 0.1}))
    assert load_config(tmp_path / "cfg.json") == {"inner_iters": 7, "beta": 0.1}
    (tmp_path / "bad.json").write_text(json.dumps({"colour": 1}))
    with pytest.raises(ValueError):
        load_config(tmp_path / "bad.json")


def test_all_flags_accepted():
    args = build_parser().parse_args(
        ["train", "--lambda", "3", "--beta", "0.1", "--alpha", "5", "--inner-iters", "4",
         "--outer-iters", "6", "--weight-x", "0.9", "--blocks", "2", "--channels", "4", "--lr", "0.001",
         "--batch", "8", "--epochs", "2", "--seed", "1", "--out", "o", "--params", "p.bin"])
    spec = spec_from_args(args)
    assert (spec.alpha, spec.outer_iters, spec.weight_x, spec.blocks, spec.channels) == (5, 6, 0.9, 2, 4)
    assert (spec.lr, spec.batch, spec.epochs, spec.out, spec.params) == (0.001, 8, 2, "o", "p.bin")
    assert spec.solver_config().weights == pytest.approx((0.9, 0.1))


def test_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        ExperimentSpec(task="paint")
    with pytest.raises(FileNotFoundError):
        ExperimentSpec(task="smooth", inputs=[str(tmp_path / "none.png")])


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("TVLAB_OUT", str(tmp_path / "root"))
    assert ExperimentSpec(task="bench", seed=3).output_dir() == tmp_path / "root" / "bench-seed3"
    assert ExperimentSpec(task="bench", out=str(tmp_path / "x")).output_dir() == tmp_path / "x"


# ---- experiments ------------------------------------------------------------------

def small(task, out, **kw):
    opts = dict(size=24, n_images=2, inner_iters=20, epochs=2, repeats=1)
    opts.update(kw)
    return ExperimentSpec(task=task, out=str(out), **opts)


def test_compare_schema(tmp_path):
    out = run_experiment(small("compare", tmp_path / "cmp", n_images=5))
    rows = read_csv(out / "metrics.csv")
    assert len(rows) == 5
    assert tuple(rows[0]) == METRIC_COLUMNS
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["rsnet_source"] == "kernels_from_rs"
    # with the RS kernels the network reproduces the solver exactly
    for r in rows:
        assert float(r["energy_rsnet"]) == pytest.approx(float(r["energy_rs"]), rel=1e-10)


def test_smooth_outputs_and_trace(tmp_path):
    out = run_experiment(small("smooth", tmp_path / "s", inner_iters=40))
    for name in ("syn00", "syn01"):
        for solver in ("fs", "rs"):
            assert (out / f"{name}_{solver}.png").exists()
        fs = np.array([float(r["normalized_energy"]) for r in read_csv(out / f"energy_{name}_fs.csv")])
        rs = np.array([float(r["normalized_energy"]) for r in read_csv(out / f"energy_{name}_rs.csv")])
        assert len(rs) == 41
        assert np.all(np.diff(rs[3:]) <= 0)
        # FS and RS are the same iteration; only rounding separates the traces
        np.testing.assert_allclose(rs, fs, rtol=1e-12)


def test_denoise_improves_psnr(tmp_path):
    out = run_experiment(small("denoise", tmp_path / "d", size=64, inner_iters=100))
    # the input PSNR is not part of the frozen metric schema; the manifest summary keeps it
    for r in json.loads((out / "manifest.json").read_text())["summary"]:
        assert r["psnr"] > r["psnr_input"]
    assert len(read_csv(out / "metrics.csv")) == 2


def test_bench_reports_runtimes(tmp_path):
    out = run_experiment(small("bench", tmp_path / "b", size=16, repeats=2))
    res = json.loads((out / "bench.json").read_text())
    assert res["images"] == 20 and res["repeats"] == 2
    assert res["median_runtime_rs"] > 0 and res["median_runtime_fs"] > 0


def test_train_and_reuse_params(tmp_path):
    out = run_experiment(small("train", tmp_path / "t", blocks=1, channels=2))
    assert len(read_csv(out / "train_loss.csv")) == 2
    cmp = run_experiment(small("compare", tmp_path / "c", params=str(out / "rsnet.bin")))
    assert json.loads((cmp / "manifest.json").read_text())["rsnet_source"] == "file"


def test_reconstruct_task(tmp_path):
    out = run_experiment(small("reconstruct", tmp_path / "r", size=8, n_images=1))
    rows = read_csv(out / "reconstruct.csv")
    assert len(rows) == 1
    assert (out / "phantom00" / "delays.csv").exists() and (out / "phantom00" / "geometry.json").exists()


def test_rerun_is_bit_identical(tmp_path):
    a = run_experiment(small("smooth", tmp_path / "a"))
    b = run_experiment(small("smooth", tmp_path / "b"))
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["artifacts"] == mb["artifacts"]
    for rel in ma["artifacts"]:
        if rel.endswith(".png") or rel.startswith("energy_"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes()
    strip = lambda m: {k: v for k, v in m.items() if k not in WALL_CLOCK | {"spec", "summary"}}
    assert strip(ma) == strip(mb)
    ma["spec"].pop("out"), mb["spec"].pop("out")
    assert ma["spec"] == mb["spec"]
    # the manifest alone is enough to rerun
    rerun = run_experiment(ExperimentSpec(**{**ma["spec"], "out": str(tmp_path / "c")}))
    assert (rerun / "syn00_rs.png").read_bytes() == (a / "syn00_rs.png").read_bytes()


def test_failure_removes_partial_outputs(tmp_path, monkeypatch):
    def boom(spec, out, manifest):
        (out / "partial.png").write_bytes(b"x")
        raise RuntimeError("solver exploded")

    monkeypatch.setitem(cli_io._DRIVERS, "smooth", boom)
    with pytest.raises(RuntimeError):
        run_experiment(small("smooth", tmp_path / "fail"))
    assert not (tmp_path / "fail").exists()
    assert list(tmp_path.iterdir()) == []


def test_refuses_non_empty_output(tmp_path):
    (tmp_path / "busy").mkdir()
    (tmp_path / "busy" / "keep.txt").write_text("x")
    with pytest.raises(FileExistsError):
        run_experiment(small("smooth", tmp_path / "busy"))
    assert main(["smooth", "--out", str(tmp_path / "busy")]) == 2


def test_cli_entry_point(tmp_path):
    out = tmp_path / "cli"
    proc = subprocess.run([sys.executable, "-m", "tvlab", "bench", "--size", "8", "--repeats", "1",
                           "--inner-iters", "5", "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip() == str(out)
    assert (out / "manifest.json").exists()
