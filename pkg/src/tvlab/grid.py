"""Image containers, discrete differential operators and TV energies.

Images are plain ``float64`` numpy arrays on the [0, 255] intensity scale:
``(H, W)`` for a single channel, ``(C, H, W)`` for multi-channel data.
Vector fields are ``(2, H, W)`` arrays holding the x component (along
columns) followed by the y component (along rows).

The gradient uses forward differences with a replicate (Neumann) boundary,
so the difference at the last column/row is zero.  ``adjoint_gradient`` is
its exact transpose under the Euclidean inner product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def as_image(u, name: str = "image") -> np.ndarray:
    """Return ``u`` as a finite float64 array with 2 or 3 dimensions."""
    arr = np.asarray(u, dtype=np.float64)
    if arr.ndim not in (2, 3) or min(arr.shape) < 1:
        raise ValueError(f"{name} must be a non-empty (H, W) or (C, H, W) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _single_channel(u, name: str = "image") -> np.ndarray:
    arr = as_image(u, name)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError(f"{name} must be single-channel, got {arr.shape[0]} channels")
        arr = arr[0]
    return arr


@dataclass(frozen=True)
class SolverConfig:
    """Parameters shared by the inner ROF solvers and the outer loops.

    ``alpha=None`` means "plain ROF" for the inner solvers (alpha = 1) and
    "choose automatically" (2.01 * ||A^T A||) for the outer loops.
    Axis weights are either ``(1, 1)`` (unweighted TV) or ``(w, 1 - w)``.
    """

    lam: float = 10.0
    beta: float = 0.2
    alpha: float | None = None
    weight_x: float = 1.0
    weight_y: float = 1.0
    inner_iters: int = 30
    outer_iters: int = 100

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not 0 < self.beta < 0.25:
            raise ValueError(f"beta must lie in (0, 1/4), got {self.beta}")
        if self.alpha is not None and not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        wx, wy = self.weight_x, self.weight_y
        if not (0 < wx <= 1 and 0 < wy <= 1):
            raise ValueError(f"axis weights must lie in (0, 1], got ({wx}, {wy})")
        if not (wx == wy == 1 or abs(wx + wy - 1) < 1e-12):
            raise ValueError(f"axis weights must be (1, 1) or sum to 1, got ({wx}, {wy})")
        if self.inner_iters < 1 or self.outer_iters < 1:
            raise ValueError("iteration counts must be >= 1")

    @classmethod
    def weighted(cls, w: float, **kwargs) -> "SolverConfig":
        """Config for the anisotropic model ``w|d_x u| + (1 - w)|d_y u|``."""
        return cls(weight_x=w, weight_y=1.0 - w, **kwargs)

    @property
    def step_scale(self) -> float:
        return 1.0 if self.alpha is None else self.alpha

    @property
    def lam_eff(self) -> float:
        """TV weight of the inner problem after dividing it by alpha."""
        return self.lam / self.step_scale

    @property
    def weights(self) -> tuple[float, float]:
        return (self.weight_x, self.weight_y)


def gradient(u) -> np.ndarray:
    """Forward-difference gradient of a single-channel image, shape (2, H, W)."""
    u = _single_channel(u)
    g = np.zeros((2,) + u.shape)
    np.subtract(u[:, 1:], u[:, :-1], out=g[0, :, :-1])
    np.subtract(u[1:, :], u[:-1, :], out=g[1, :-1, :])
    return g


def adjoint_gradient(b) -> np.ndarray:
    """Exact transpose of :func:`gradient` (minus the discrete divergence).

    Entries of ``b`` on the last column (x) / last row (y) do not enter,
    since the gradient never writes there.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 3 or b.shape[0] != 2:
        raise ValueError(f"vector field must have shape (2, H, W), got {b.shape}")
    bx, by = b[0], b[1]
    q = np.zeros(b.shape[1:])
    q[:, :-1] -= bx[:, :-1]
    q[:, 1:] += bx[:, :-1]
    q[:-1, :] -= by[:-1, :]
    q[1:, :] += by[:-1, :]
    return q


def cut(x, beta):
    """Clip to [-beta, beta]; ``beta`` may broadcast per component."""
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta <= 0):
        raise ValueError("cut threshold must be positive")
    out = np.clip(x, -beta, beta)
    return float(out) if np.ndim(out) == 0 else out


def shrink(x, beta):
    """Soft threshold, the complement of :func:`cut`: ``x - cut(x, beta)``."""
    out = np.asarray(x, dtype=np.float64) - cut(x, beta)
    return float(out) if np.ndim(out) == 0 else out


def tv_energy(u, weight_x: float = 1.0, weight_y: float = 1.0) -> float:
    """Anisotropic TV: sum of ``wx |d_x u| + wy |d_y u|`` over all pixels."""
    g = gradient(u)
    return float(weight_x * np.abs(g[0]).sum() + weight_y * np.abs(g[1]).sum())


def _observation_residual(u, f, A) -> np.ndarray:
    u = _single_channel(u)
    f = np.asarray(f, dtype=np.float64)
    if A is None:
        if f.shape != u.shape:
            raise ValueError(f"shape mismatch: u {u.shape} vs f {f.shape}")
        return u - f
    Au = A.apply(u)
    if Au.size != f.size:
        raise ValueError(f"operator output has {Au.size} entries but f has {f.size}")
    return Au - f.ravel()


def total_energy(u, f, A, cfg: SolverConfig) -> float:
    """``0.5 ||A u - f||^2 + lam * TV_w(u)``; ``A=None`` means identity."""
    r = _observation_residual(u, f, A)
    return float(0.5 * np.dot(r.ravel(), r.ravel()) + cfg.lam * tv_energy(u, *cfg.weights))


def normalized_energy(u, f, A, cfg: SolverConfig) -> float:
    """:func:`total_energy` divided by the pixel count, comparable across resolutions."""
    u = _single_channel(u)
    return total_energy(u, f, A, cfg) / u.size


def rof_energy(u, v, cfg: SolverConfig) -> float:
    """Inner-problem energy ``alpha/2 ||u - v||^2 + lam * TV_w(u)``."""
    u = _single_channel(u)
    v = _single_channel(v, "v")
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: u {u.shape} vs v {v.shape}")
    d = (u - v).ravel()
    return float(0.5 * cfg.step_scale * np.dot(d, d) + cfg.lam * tv_energy(u, *cfg.weights))
