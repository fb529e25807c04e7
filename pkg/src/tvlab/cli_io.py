"""Image I/O, synthetic data, experiment drivers and the ``tvlab`` command line."""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .grid import SolverConfig, normalized_energy
from .metrics import psnr, ssim
from .rof import SOLVERS

OUT_ENV = "TVLAB_OUT"
TASKS = ("smooth", "denoise", "reconstruct", "train", "bench", "compare")
ENERGY_COLUMNS = ("iteration", "normalized_energy")
METRIC_COLUMNS = ("image_id", "psnr", "ssim", "energy_fs", "energy_rs", "energy_rsnet",
                  "runtime_fs", "runtime_rs")
SUPPORTED_SUFFIXES = (".png", ".pgm")


# ---- image I/O ---------------------------------------------------------------

def _check_suffix(path):
    suffix = Path(path).suffix.lower()
    if suffix not in SUPPORTED_SUFFIXES:
        raise ValueError(f"unsupported image format {suffix!r}; use PNG or PGM")
    return suffix


def load_image(path) -> np.ndarray:
    """Read a PNG/PGM file as a float64 grayscale image on [0, 255].

    Colour images are converted with luminance weights 0.299/0.587/0.114.
    """
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    _check_suffix(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ValueError(f"malformed image file {path}: {exc}") from exc
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        return arr.astype(np.float64) * (255.0 / 65535.0)
    arr = arr.astype(np.float64)
    if arr.ndim == 2:
        return arr
    if mode in ("LA",):
        return arr[..., 0]
    # integer-weighted sum keeps equal channels exact
    return (299.0 * arr[..., 0] + 587.0 * arr[..., 1] + 114.0 * arr[..., 2]) / 1000.0


def save_image(image, path) -> None:
    """Write an ``(H, W)`` or ``(3, H, W)`` image, clipped and rounded to 8 bits."""
    from PIL import Image

    suffix = _check_suffix(path)
    arr = np.asarray(image, dtype=np.float64)
    u8 = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    if u8.ndim == 3:
        if u8.shape[0] != 3 or suffix == ".pgm":
            raise ValueError("only single-channel images or 3-channel PNGs can be saved")
        im = Image.fromarray(np.moveaxis(u8, 0, -1), mode="RGB")
    elif u8.ndim == 2:
        im = Image.fromarray(u8, mode="L")
    else:
        raise ValueError(f"cannot save an array of shape {arr.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path, format="PNG" if suffix == ".png" else "PPM")


def load_directory(path) -> list[tuple[str, np.ndarray]]:
    """All PNG/PGM files in a directory, sorted by name."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"no such directory: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in SUPPORTED_SUFFIXES)
    return [(p.stem, load_image(p)) for p in files]


# ---- synthetic data and sampling ---------------------------------------------

def add_gaussian_noise(image, sigma: float, seed: int = 0) -> np.ndarray:
    """Additive N(0, sigma^2) noise; values are not clamped."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    return image + np.random.default_rng(seed).normal(0.0, sigma, size=image.shape)


def piecewise_constant_image(height: int, width: int, n_rects: int = 12, seed: int = 0) -> np.ndarray:
    """Random background overpainted by ``n_rects`` random constant rectangles."""
    rng = np.random.default_rng(seed)
    img = np.full((height, width), rng.uniform(0, 255))
    for _ in range(n_rects):
        r0, c0 = rng.integers(0, height), rng.integers(0, width)
        hh = rng.integers(max(1, height // 16), max(2, height // 2))
        ww = rng.integers(max(1, width // 16), max(2, width // 2))
        img[r0:r0 + hh, c0:c0 + ww] = rng.uniform(0, 255)
    return img


def textured_image(height: int, width: int, seed: int = 0) -> np.ndarray:
    """Smooth ramp plus a few random oriented sinusoids, rescaled into [20, 235]."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:height, 0:width] / max(height, width)
    img = rng.uniform(-1, 1) * x + rng.uniform(-1, 1) * y
    for _ in range(4):
        freq = rng.uniform(2, 12)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        img = img + rng.uniform(0.2, 0.6) * np.sin(2 * np.pi * freq * (x * np.cos(theta) + y * np.sin(theta)) + phase)
    img -= img.min()
    return 20.0 + 215.0 * img / max(img.max(), 1e-12)


def regression_suite(size: int = 128, n_pc: int = 10, n_tex: int = 10, sigma: float = 15.0,
                     seed: int = 0) -> list[tuple[str, np.ndarray]]:
    """Fixed grayscale suite: noisy piecewise-constant images, then textured ones."""
    out = []
    for i in range(n_pc):
        clean = piecewise_constant_image(size, size, seed=seed * 1000 + i)
        out.append((f"pc{i:02d}", add_gaussian_noise(clean, sigma, seed=seed * 1000 + 500 + i)))
    for i in range(n_tex):
        out.append((f"tex{i:02d}", textured_image(size, size, seed=seed * 1000 + 100 + i)))
    return out


@dataclass
class PatchSet:
    train: np.ndarray
    validation: np.ndarray
    coords: list[tuple[int, int, int]]

    @property
    def all(self) -> np.ndarray:
        return np.concatenate([self.train, self.validation])


def crop_patches(images, patch_size: int, count: int, seed: int = 0) -> PatchSet:
    """Uniform random crops; the first 80% (rounded) form the training set.

    ``coords`` lists ``(image_index, row, col)`` for every crop in order.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ValueError("no source images")
    for im in images:
        if im.ndim != 2 or im.shape[0] < patch_size or im.shape[1] < patch_size:
            raise ValueError(f"image of shape {im.shape} is smaller than the {patch_size} patch")
    rng = np.random.default_rng(seed)
    patches, coords = [], []
    for _ in range(count):
        k = int(rng.integers(len(images)))
        h, w = images[k].shape
        r = int(rng.integers(0, h - patch_size + 1))
        c = int(rng.integers(0, w - patch_size + 1))
        patches.append(images[k][r:r + patch_size, c:c + patch_size])
        coords.append((k, r, c))
    stack = np.array(patches).reshape(count, patch_size, patch_size)
    n_train = int(np.floor(0.8 * count + 0.5))
    return PatchSet(stack[:n_train].copy(), stack[n_train:].copy(), coords)


def training_patches(count: int = 200, patch_size: int = 32, sigma: float = 15.0,
                     n_sources: int = 10, source_size: int = 128, seed: int = 0) -> PatchSet:
    """Noisy piecewise-constant patches cropped from synthetic source images."""
    sources = [add_gaussian_noise(piecewise_constant_image(source_size, source_size, seed=seed * 100 + i),
                                  sigma, seed=seed * 100 + 50 + i) for i in range(n_sources)]
    return crop_patches(sources, patch_size, count, seed=seed)


# ---- CSV helpers -------------------------------------------------------------

def write_energy_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ENERGY_COLUMNS)
        for i, e in enumerate(trace):
            w.writerow([i, repr(float(e))])


def write_metric_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in METRIC_COLUMNS})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---- experiment specification ------------------------------------------------

@dataclass
class ExperimentSpec:
    task: str
    inputs: list[str] = field(default_factory=list)
    out: str | None = None
    seed: int = 0
    lam: float = 10.0
    beta: float = 0.2
    alpha: float | None = None
    inner_iters: int = 200
    outer_iters: int = 100
    weight_x: float = 1.0
    blocks: int = 3
    channels: int = 8
    lr: float = 1e-2
    batch: int = 32
    epochs: int = 300
    params: str | None = None
    sigma: float = 15.0
    n_images: int = 5
    size: int = 128
    repeats: int = 5

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {', '.join(TASKS)}")
        for p in self.inputs:
            if not Path(p).exists():
                raise FileNotFoundError(f"input does not exist: {p}")
        if self.params is not None and self.task != "train" and not Path(self.params).exists():
            raise FileNotFoundError(f"parameter file does not exist: {self.params}")

    def solver_config(self) -> SolverConfig:
        wx = self.weight_x
        wy = 1.0 if wx == 1.0 else 1.0 - wx
        return SolverConfig(lam=self.lam, beta=self.beta, alpha=self.alpha, weight_x=wx, weight_y=wy,
                            inner_iters=self.inner_iters, outer_iters=self.outer_iters)

    def output_dir(self) -> Path:
        if self.out:
            return Path(self.out)
        root = Path(os.environ.get(OUT_ENV, "tvlab-out"))
        return root / f"{self.task}-seed{self.seed}"


def _inputs(spec, with_clean=False):
    """Named input images; synthetic piecewise-constant images when no paths are given."""
    if spec.inputs:
        items = []
        for p in spec.inputs:
            items.extend(load_directory(p) if Path(p).is_dir() else [(Path(p).stem, load_image(p))])
        return items
    return [(f"syn{i:02d}", piecewise_constant_image(spec.size, spec.size, seed=spec.seed * 1000 + i))
            for i in range(spec.n_images)]


def _timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    res = fn(*args, **kwargs)
    return res, time.perf_counter() - t0


def _rof_pair(v, cfg, n_iters):
    """Run FS and RS once untimed with traces and once timed without."""
    out = {}
    for name in ("fs", "rs"):
        solver = SOLVERS[name]
        _, runtime = _timed(solver, v, cfg, n_iters, trace=False)
        res = solver(v, cfg, n_iters, trace=True)
        out[name] = (res, runtime)
    return out


def _rof_cfg(spec):
    return SolverConfig(lam=spec.lam, beta=spec.beta, weight_x=spec.solver_config().weight_x,
                        weight_y=spec.solver_config().weight_y, inner_iters=spec.inner_iters)


def _load_net(spec, cfg):
    from .rsnet import kernels_from_rs, load_params

    if spec.params:
        return load_params(spec.params), "file"
    return kernels_from_rs(cfg.lam, cfg.beta, spec.inner_iters), "kernels_from_rs"


def _task_smooth(spec, out, manifest, noisy=False):
    cfg = _rof_cfg(spec)
    rows = []
    for k, (name, img) in enumerate(_inputs(spec)):
        clean = img
        v = add_gaussian_noise(img, spec.sigma, seed=spec.seed * 1000 + k) if noisy else img
        pair = _rof_pair(v, cfg, spec.inner_iters)
        for solver, (res, _) in pair.items():
            save_image(res.u, out / f"{name}_{solver}.png")
            write_energy_csv(np.array(res.energy_trace) / v.size, out / f"energy_{name}_{solver}.csv")
        if noisy:
            save_image(v, out / f"{name}_noisy.png")
        rs, fs = pair["rs"][0], pair["fs"][0]
        rows.append({"image_id": name, "psnr": psnr(rs.u, clean), "ssim": ssim(rs.u, clean),
                     "psnr_input": psnr(v, clean),
                     "energy_fs": normalized_energy(fs.u, v, None, cfg),
                     "energy_rs": normalized_energy(rs.u, v, None, cfg),
                     "energy_rsnet": "", "runtime_fs": pair["fs"][1], "runtime_rs": pair["rs"][1]})
    write_metric_csv(rows, out / "metrics.csv")
    manifest["images"] = [r["image_id"] for r in rows]
    return rows


def _task_compare(spec, out, manifest):
    from .rsnet import rsnet_forward

    cfg = _rof_cfg(spec)
    net, source = _load_net(spec, cfg)
    manifest["rsnet_source"] = source
    manifest["rsnet_path"] = "rsnet_forward (sub-network applied directly to the noisy image)"
    rows = []
    for k, (name, clean) in enumerate(_inputs(spec)):
        v = add_gaussian_noise(clean, spec.sigma, seed=spec.seed * 1000 + k)
        pair = _rof_pair(v, cfg, spec.inner_iters)
        u_net, _ = rsnet_forward(v, net)
        rs, fs = pair["rs"][0], pair["fs"][0]
        save_image(rs.u, out / f"{name}_rs.png")
        save_image(u_net, out / f"{name}_rsnet.png")
        rows.append({"image_id": name, "psnr": psnr(rs.u, clean), "ssim": ssim(rs.u, clean),
                     "energy_fs": normalized_energy(fs.u, v, None, cfg),
                     "energy_rs": normalized_energy(rs.u, v, None, cfg),
                     "energy_rsnet": normalized_energy(u_net, v, None, cfg),
                     "runtime_fs": pair["fs"][1], "runtime_rs": pair["rs"][1]})
    write_metric_csv(rows, out / "metrics.csv")
    return rows


def _task_bench(spec, out, manifest):
    cfg = _rof_cfg(spec)
    images = [img for _, img in (_inputs(spec) if spec.inputs else regression_suite(spec.size, seed=spec.seed))]
    for v in images:  # untimed warm-up
        for name in ("fs", "rs"):
            SOLVERS[name](v, cfg, min(spec.inner_iters, 20), trace=False)
    totals = {"fs": [], "rs": []}
    for run in range(spec.repeats):
        acc = {"fs": 0.0, "rs": 0.0}
        # interleave per image and flip the order each time so both solvers see the same load
        for i, v in enumerate(images):
            for name in (("fs", "rs") if (i + run) % 2 == 0 else ("rs", "fs")):
                t0 = time.perf_counter()
                SOLVERS[name](v, cfg, spec.inner_iters, trace=False)
                acc[name] += time.perf_counter() - t0
        for name in acc:
            totals[name].append(acc[name])
    result = {"iterations": spec.inner_iters, "images": len(images), "repeats": spec.repeats,
              "median_runtime_fs": float(np.median(totals["fs"])),
              "median_runtime_rs": float(np.median(totals["rs"])),
              "mean_runtime_fs": float(np.mean(totals["fs"])),
              "mean_runtime_rs": float(np.mean(totals["rs"]))}
    (out / "bench.json").write_text(json.dumps(result, indent=2))
    return result


def _task_train(spec, out, manifest):
    from .rsnet import TrainConfig, init_params, save_params, train_rsnet

    if spec.inputs:
        sources = [img for _, img in _inputs(spec)]
        patches = crop_patches([add_gaussian_noise(s, spec.sigma, seed=spec.seed * 100 + i)
                                for i, s in enumerate(sources)], 32, 200, seed=spec.seed)
    else:
        patches = training_patches(seed=spec.seed, sigma=spec.sigma)
    tc = TrainConfig(learning_rate=spec.lr, batch_size=spec.batch, epochs=spec.epochs, lam=spec.lam,
                     seed=spec.seed)
    p0 = init_params(spec.blocks, spec.channels, spec.beta, seed=spec.seed)
    res = train_rsnet(patches.train, p0, None, tc)
    params_path = Path(spec.params).name if spec.params else "rsnet.bin"
    save_params(res.params, out / params_path)
    write_energy_csv(res.epoch_losses, out / "train_loss.csv")
    manifest["train_patches"] = len(patches.train)
    manifest["validation_patches"] = len(patches.validation)
    return {"final_loss": res.epoch_losses[-1] if res.epoch_losses else None}


def _task_reconstruct(spec, out, manifest):
    from .ultrasound import (RayGeometry, build_ray_operator, central_mask, default_sos_config,
                             delay_to_value, export_phantom, generate_voronoi_phantom,
                             reconstruct_sos, simulate_delays)

    size = spec.size if spec.size <= 64 else 16
    geom = RayGeometry(size, size)
    A = build_ray_operator(geom)
    wx = 0.9 if spec.weight_x == 1.0 else spec.weight_x
    cfg = default_sos_config(weight_x=wx, weight_y=1.0 - wx, inner_iters=spec.inner_iters)
    mask = central_mask((size, size))
    manifest["rsnet_path"] = "none (inner solves by fast_solver and residual_solver)"
    rows = []
    for k in range(spec.n_images):
        n = 2 + k % 5
        ph = generate_voronoi_phantom(size, size, n, seed=spec.seed * 1000 + k)
        f = simulate_delays(ph, A)
        item = out / f"phantom{k:02d}"
        export_phantom(ph, f, geom, item)
        row = {"image_id": f"phantom{k:02d}"}
        for inner in ("fs", "rs"):
            U, runtime = _timed(reconstruct_sos, f, A, cfg, inner)
            vals = delay_to_value(U)
            save_image(vals, item / f"recon_{inner}.png")
            row[f"psnr_{inner}"] = psnr(vals, ph.values, mask=mask)
            row[f"runtime_{inner}"] = runtime
        rows.append(row)
    with open(out / "reconstruct.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows


_DRIVERS = {
    "smooth": lambda s, o, m: _task_smooth(s, o, m, noisy=False),
    "denoise": lambda s, o, m: _task_smooth(s, o, m, noisy=True),
    "compare": _task_compare,
    "bench": _task_bench,
    "train": _task_train,
    "reconstruct": _task_reconstruct,
}


def run_experiment(spec: ExperimentSpec) -> Path:
    """Run one task and write its artifacts plus ``manifest.json`` (written last).

    Work happens in a temporary sibling directory that is renamed into place
    on success and deleted on failure.
    """
    target = spec.output_dir()
    if target.exists() and any(target.iterdir()):
        raise FileExistsError(f"output directory {target} is not empty")
    target.parent.mkdir(parents=True, exist_ok=True)
    work = Path(tempfile.mkdtemp(prefix=f".{target.name}-", dir=target.parent))
    manifest = {"task": spec.task, "spec": asdict(spec), "seed": spec.seed, "version": __version__,
                "numpy": np.__version__, "python": sys.version.split()[0]}
    try:
        t0 = time.perf_counter()
        result = _DRIVERS[spec.task](spec, work, manifest)
        manifest["wall_clock_seconds"] = time.perf_counter() - t0
        manifest["summary"] = result
        manifest["artifacts"] = sorted(str(p.relative_to(work)) for p in work.rglob("*") if p.is_file())
        (work / "manifest.json").write_text(json.dumps(manifest, indent=2, default=float))
        if target.exists():
            target.rmdir()
        work.rename(target)
    except BaseException:
        shutil.rmtree(work, ignore_errors=True)
        raise
    return target


# ---- command line --------------------------------------------------------------

_FLAG_KEYS = {
    "lambda": ("lam", float), "beta": ("beta", float), "alpha": ("alpha", float),
    "inner-iters": ("inner_iters", int), "outer-iters": ("outer_iters", int),
    "weight-x": ("weight_x", float), "blocks": ("blocks", int), "channels": ("channels", int),
    "lr": ("lr", float), "batch": ("batch", int), "epochs": ("epochs", int), "seed": ("seed", int),
    "out": ("out", str), "params": ("params", str), "sigma": ("sigma", float),
    "n-images": ("n_images", int), "size": ("size", int), "repeats": ("repeats", int),
}


def load_config(path) -> dict:
    """Read a JSON or YAML config; keys use the flag names (``lambda``, ``inner-iters`` ...)."""
    text = Path(path).read_text()
    if Path(path).suffix.lower() in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must contain a mapping")
    out = {}
    for key, val in data.items():
        flag = key.replace("_", "-")
        if flag == "lam":
            flag = "lambda"
        if flag == "in":
            out["inputs"] = [val] if isinstance(val, str) else list(val)
            continue
        if flag not in _FLAG_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        name, conv = _FLAG_KEYS[flag]
        out[name] = conv(val)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tvlab", description="TV solvers, RSnet and experiment drivers")
    parser.add_argument("--version", action="version", version=f"tvlab {__version__}")
    sub = parser.add_subparsers(dest="task", required=True)
    for task in TASKS:
        p = sub.add_parser(task)
        p.add_argument("--config", help="JSON or YAML file with default flag values")
        p.add_argument("--in", dest="inputs", action="append", help="input image or directory (repeatable)")
        for flag, (_, conv) in _FLAG_KEYS.items():
            p.add_argument(f"--{flag}", type=conv, default=None)
    return parser


def spec_from_args(args) -> ExperimentSpec:
    values = load_config(args.config) if args.config else {}
    for flag, (name, _) in _FLAG_KEYS.items():
        val = getattr(args, flag.replace("-", "_"), None)
        if val is not None:
            values[name] = val
    if args.inputs:
        values["inputs"] = args.inputs
    return ExperimentSpec(task=args.task, **values)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        spec = spec_from_args(args)
        out = run_experiment(spec)
    except (ValueError, FileNotFoundError, FileExistsError) as exc:
        print(f"tvlab: error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
