"""Straight-ray speed-of-sound model: Voronoi phantoms, ray matrix, delays.

Units: positions and lengths in meters, delays in seconds, slowness
deviations ``U = 1/(S + C) - 1/S`` in s/m.  Images are indexed
``[row, col]`` with ``x`` along columns and ``y`` growing downward from the
top edge, where the emitters sit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import SolverConfig
from .outer import SparseOperator, dual_first_outer

SOUND_SPEED = 1540.0
CONTRAST_RANGE = (-40.0, 40.0)
VALUE_RANGE = (0.0, 255.0)
# delay change per display level: the affine value -> contrast map has slope 80/255
DELAY_PER_LEVEL = (CONTRAST_RANGE[1] - CONTRAST_RANGE[0]) / (VALUE_RANGE[1] - VALUE_RANGE[0]) / SOUND_SPEED**2


def value_to_contrast(values):
    lo, hi = VALUE_RANGE
    clo, chi = CONTRAST_RANGE
    return clo + (np.asarray(values, dtype=np.float64) - lo) * (chi - clo) / (hi - lo)


def contrast_to_value(contrast):
    lo, hi = VALUE_RANGE
    clo, chi = CONTRAST_RANGE
    return lo + (np.asarray(contrast, dtype=np.float64) - clo) * (hi - lo) / (chi - clo)


def contrast_to_delay(contrast):
    c = np.asarray(contrast, dtype=np.float64)
    if np.any(SOUND_SPEED + c <= 0):
        raise ValueError("speed of sound must stay positive")
    return 1.0 / (SOUND_SPEED + c) - 1.0 / SOUND_SPEED


def delay_to_contrast(delay):
    return 1.0 / (np.asarray(delay, dtype=np.float64) + 1.0 / SOUND_SPEED) - SOUND_SPEED


def delay_to_value(delay):
    return contrast_to_value(delay_to_contrast(delay))


@dataclass
class Phantom:
    """Piecewise-constant phantom; ``values`` is the displayed [0, 255] map."""

    values: np.ndarray
    contrast: np.ndarray
    delay: np.ndarray
    labels: np.ndarray
    seed_points: np.ndarray
    n: int
    seed: int


def generate_voronoi_phantom(height: int, width: int, n: int, value_range=VALUE_RANGE,
                             seed: int = 0) -> Phantom:
    """Voronoi partition of ``n`` random seeds, one random value per region.

    Seeds are drawn uniformly in pixel coordinates; each pixel centre joins
    the nearest seed (ties go to the lowest index).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > height * width:
        raise ValueError(f"n={n} exceeds the pixel count {height * width}")
    lo, hi = float(value_range[0]), float(value_range[1])
    if not VALUE_RANGE[0] <= lo <= hi <= VALUE_RANGE[1]:
        raise ValueError(f"value_range must lie within {VALUE_RANGE}")
    rng = np.random.default_rng(seed)
    pts = rng.uniform((0.0, 0.0), (height, width), size=(n, 2))
    region_values = rng.uniform(lo, hi, size=n)
    rows, cols = np.mgrid[0:height, 0:width]
    centres = np.stack([rows + 0.5, cols + 0.5], axis=-1)
    d2 = ((centres[:, :, None, :] - pts[None, None]) ** 2).sum(axis=-1)
    labels = np.argmin(d2, axis=-1)
    values = region_values[labels]
    contrast = value_to_contrast(values)
    return Phantom(values=values, contrast=contrast, delay=contrast_to_delay(contrast),
                   labels=labels, seed_points=pts, n=n, seed=seed)


@dataclass
class RayGeometry:
    """Square-cell grid with emitters on the top edge and receivers on the bottom edge."""

    height: int
    width: int
    cell_size: float = 1e-3
    emitters: np.ndarray = field(default=None)
    receivers: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or not self.cell_size > 0:
            raise ValueError("grid dimensions and cell size must be positive")
        span = self.width * self.cell_size
        if self.emitters is None:
            self.emitters = equispaced(self.width, span)
        if self.receivers is None:
            self.receivers = equispaced(self.width, span)
        self.emitters = np.asarray(self.emitters, dtype=np.float64)
        self.receivers = np.asarray(self.receivers, dtype=np.float64)
        for pos in (self.emitters, self.receivers):
            if pos.ndim != 1 or pos.size == 0 or pos.min() < 0 or pos.max() > span:
                raise ValueError("transducer x positions must lie on the grid edge")

    @property
    def depth(self) -> float:
        return self.height * self.cell_size

    @property
    def rays(self) -> list[tuple[tuple[float, float], tuple[float, float]]]:
        """All emitter-receiver segments, emitter-major order."""
        return [((xe, 0.0), (xr, self.depth)) for xe in self.emitters for xr in self.receivers]

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width, "cell_size": self.cell_size,
                "emitters": [[float(x), 0.0] for x in self.emitters],
                "receivers": [[float(x), self.depth] for x in self.receivers]}


def equispaced(count: int, span: float) -> np.ndarray:
    """``count`` positions at the centres of equal sub-intervals of ``[0, span]``."""
    return (np.arange(count) + 0.5) * (span / count)


def ray_cell_lengths(p0, p1, height: int, width: int, cell_size: float):
    """Exact intersection lengths of segment ``p0 -> p1`` with every grid cell.

    Cell-boundary crossing traversal: the parameters at which the segment
    meets vertical and horizontal grid lines split it into pieces lying in
    single cells.  Returns ``(flat_indices, lengths)`` in traversal order.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    delta = p1 - p0
    length = float(np.hypot(*delta))
    if length == 0.0:
        raise ValueError("degenerate zero-length ray")
    extent = np.array([width, height], dtype=np.float64) * cell_size
    # clip the parameter range to the grid box
    t_lo, t_hi = 0.0, 1.0
    for k in range(2):
        if delta[k] == 0.0:
            if not 0.0 <= p0[k] <= extent[k]:
                return np.zeros(0, dtype=np.int64), np.zeros(0)
            continue
        ta, tb = (0.0 - p0[k]) / delta[k], (extent[k] - p0[k]) / delta[k]
        t_lo, t_hi = max(t_lo, min(ta, tb)), min(t_hi, max(ta, tb))
    if t_hi <= t_lo:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    ts = [np.array([t_lo, t_hi])]
    for k, n_lines in ((0, width), (1, height)):
        if delta[k] != 0.0:
            t = (np.arange(n_lines + 1) * cell_size - p0[k]) / delta[k]
            ts.append(t[(t > t_lo) & (t < t_hi)])
    t = np.unique(np.concatenate(ts))
    seg = np.diff(t)
    keep = seg > 1e-12
    mids = 0.5 * (t[:-1] + t[1:])[keep]
    seg = seg[keep] * length
    x = p0[0] + mids * delta[0]
    y = p0[1] + mids * delta[1]
    col = np.minimum((x / cell_size).astype(np.int64), width - 1)
    row = np.minimum((y / cell_size).astype(np.int64), height - 1)
    idx = row * width + col
    return idx, seg


def in_grid_length(p0, p1, height: int, width: int, cell_size: float) -> float:
    return float(ray_cell_lengths(p0, p1, height, width, cell_size)[1].sum())


class RayOperator(SparseOperator):
    """Ray path-length matrix; ``apply`` maps a delay map (s/m) to delays (s)."""

    def __init__(self, matrix, geometry: RayGeometry):
        super().__init__(matrix, (geometry.height, geometry.width))
        self.geometry = geometry
        self.cell_size = geometry.cell_size


def build_ray_operator(geom: RayGeometry) -> RayOperator:
    rows = []
    for p0, p1 in geom.rays:
        idx, seg = ray_cell_lengths(p0, p1, geom.height, geom.width, geom.cell_size)
        if idx.size == 0:
            raise ValueError(f"ray {p0} -> {p1} misses the grid")
        rows.append((idx, seg))
    base = SparseOperator.from_rows(rows, (geom.height, geom.width))
    return RayOperator(base.matrix, geom)


def simulate_delays(phantom: Phantom | np.ndarray, A: SparseOperator, noise_sigma: float = 0.0,
                    seed: int = 0) -> np.ndarray:
    """Per-ray delays ``A U`` plus optional Gaussian noise (seconds)."""
    delay = phantom.delay if isinstance(phantom, Phantom) else np.asarray(phantom, dtype=np.float64)
    if delay.shape != tuple(A.input_shape):
        raise ValueError(f"phantom shape {delay.shape} does not match operator {A.input_shape}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    f = A.apply(delay)
    if noise_sigma > 0:
        f = f + np.random.default_rng(seed).normal(0.0, noise_sigma, size=f.shape)
    return f


def default_sos_config(**kwargs) -> SolverConfig:
    """Reconstruction defaults in display units: ``w = 0.9``, 3000 outer steps.

    With ``fidelity="exact"`` the limit does not depend on ``lam``; it only
    balances the TV step against the data step, and ``1e4`` converges fastest
    on the 16x16 reference phantoms.
    """
    opts = dict(lam=1e4, weight_x=0.9, weight_y=0.1, outer_iters=3000)
    opts.update(kwargs)
    return SolverConfig(**opts)


def reconstruct_sos(f, A: SparseOperator, cfg: SolverConfig | None = None, inner: str = "rs",
                    fidelity: str = "exact", **kwargs) -> np.ndarray:
    """Estimate the delay map from per-ray delays with weighted-TV regularisation.

    The problem is solved in display units (cells for length, grey levels
    for the delay map) and the result is converted back to s/m.
    ``fidelity="exact"`` (undamped dual updates) targets the minimum-TV map
    consistent with noiseless delays; use ``"quadratic"`` for noisy data.
    """
    cfg = default_sos_config() if cfg is None else cfg
    h = getattr(A, "cell_size", 1.0)
    scaled = A.scaled(1.0 / h)
    f_levels = np.asarray(f, dtype=np.float64).ravel() / (h * DELAY_PER_LEVEL)
    res = dual_first_outer(f_levels, scaled, cfg, inner, fidelity=fidelity, **kwargs)
    return res.u * DELAY_PER_LEVEL


def central_mask(shape, fraction: float = 0.125) -> np.ndarray:
    """Mask dropping ``round(fraction * W)`` (at least one) columns on each side."""
    h, w = shape
    k = max(1, int(round(fraction * w)))
    mask = np.zeros(shape, dtype=bool)
    mask[:, k:w - k] = True
    return mask


def export_phantom(phantom: Phantom, f, geom: RayGeometry, out_dir) -> dict:
    """Write the value/contrast maps, the delay CSV and the geometry JSON."""
    from .cli_io import save_image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"values": out / "phantom_values.png", "delays": out / "delays.csv",
             "geometry": out / "geometry.json", "contrast": out / "phantom_contrast.npy"}
    save_image(phantom.values, paths["values"])
    np.save(paths["contrast"], phantom.contrast)
    write_delays_csv(f, paths["delays"])
    meta = geom.to_dict()
    meta.update({"sound_speed": SOUND_SPEED, "n_regions": phantom.n, "seed": phantom.seed})
    paths["geometry"].write_text(json.dumps(meta, indent=2))
    return {k: str(v) for k, v in paths.items()}


def write_delays_csv(f, path):
    f = np.asarray(f, dtype=np.float64).ravel()
    with open(path, "w", newline="") as fh:
        fh.write("ray_index,delay_seconds\n")
        for i, val in enumerate(f):
            fh.write(f"{i},{float(val)!r}\n")


def read_delays_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1].copy()


def read_geometry(path) -> RayGeometry:
    meta = json.loads(Path(path).read_text())
    return RayGeometry(meta["height"], meta["width"], meta["cell_size"],
                       emitters=[p[0] for p in meta["emitters"]],
                       receivers=[p[0] for p in meta["receivers"]])
