"""Inner ROF solvers: the classical FastSolver and the Residual Solver.

Both minimise ``0.5 ||u - v||^2 + lam_eff * TV_w(u)`` with
``lam_eff = cfg.lam / alpha`` by a projected iteration on a field ``b``
whose components live in ``[-beta * w_axis, beta * w_axis]``.  With
``kappa = lam_eff / beta`` and ``c = beta**2 / lam_eff`` the two schemes are

    FastSolver:  b <- cut(b + c grad(u), beta w);   u = v - kappa grad^T b
    Residual:    b <- cut(c grad(v) + (I - beta grad grad^T) b, beta w)

and the solution is recovered as ``u = v + R`` with the residual
``R = -kappa grad^T b``.  The scaling makes ``0 < beta < 1/4`` the
convergence condition independently of ``lam``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import SolverConfig, _single_channel, adjoint_gradient, cut, gradient, rof_energy

EARLY_STOP_TOL = 1e-8


@dataclass
class RofResult:
    u: np.ndarray
    b: np.ndarray
    residual: np.ndarray
    energy_trace: list[float] = field(default_factory=list)
    iterations: int = 0


def solver_coefficients(cfg: SolverConfig) -> tuple[float, float, np.ndarray]:
    """Return ``(c, kappa, thresholds)`` for the inner iteration."""
    lam = cfg.lam_eff
    thr = cfg.beta * np.array(cfg.weights).reshape(2, 1, 1)
    return cfg.beta**2 / lam, lam / cfg.beta, thr


def _grad_into(u, out):
    # u and out must be C-contiguous solver buffers (the flat views below alias them)
    # x-differences on the flattened image are contiguous; the wrapped entries land in the
    # last column, which is reset to zero
    ux, ox = u.reshape(-1), out[0].reshape(-1)
    np.subtract(ux[1:], ux[:-1], out=ox[:-1])
    out[0, :, -1] = 0.0
    np.subtract(u[1:, :], u[:-1, :], out=out[1, :-1, :])


def _neg_div_into(b, out):
    # out = grad^T b; assumes the inert entries of b are zero
    bx, by = b[0].reshape(-1), b[1]
    flat = out.reshape(-1)
    # flat shift: at the start of each row the previous entry is an inert zero of bx
    flat[0] = -bx[0]
    np.subtract(bx[:-1], bx[1:], out=flat[1:])
    out[0] -= by[0]
    out[1:] += by[:-1]
    out[1:] -= by[1:]


def _prepare(v, cfg, b0):
    v = _single_channel(v, "v")
    if b0 is None:
        b = np.zeros((2,) + v.shape)
    else:
        b = np.array(b0, dtype=np.float64)
        if b.shape != (2,) + v.shape:
            raise ValueError(f"b0 must have shape {(2,) + v.shape}, got {b.shape}")
        # entries the gradient never writes carry no information; keep them zero
        b[0, :, -1] = 0.0
        b[1, -1, :] = 0.0
    return v, b


def _trivial(v, cfg, n_iters, trace):
    # lam_eff == 0: the minimiser is v itself
    e = rof_energy(v, v, cfg)
    return RofResult(u=v.copy(), b=np.zeros((2,) + v.shape), residual=np.zeros_like(v),
                     energy_trace=[e] * (n_iters + 1) if trace else [], iterations=n_iters)


def _finish(v, b, kappa, trace_list, iterations):
    residual = -kappa * adjoint_gradient(b)
    return RofResult(u=v + residual, b=b, residual=residual, energy_trace=trace_list, iterations=iterations)


def fast_solver(v, cfg: SolverConfig, n_iters: int | None = None, *, b0=None,
                trace: bool = True, tol: float | None = None) -> RofResult:
    """FastSolver: alternate the clipped field update and the image update.

    ``trace`` records ``rof_energy`` at ``u = v`` and after every iteration.
    ``tol`` enables early stopping once ``max|b_new - b| <= tol``.
    """
    n_iters = cfg.inner_iters if n_iters is None else int(n_iters)
    v, b = _prepare(v, cfg, b0)
    if cfg.lam_eff == 0:
        return _trivial(v, cfg, n_iters, trace)
    c, kappa, thr = solver_coefficients(cfg)

    u = np.empty_like(v)
    q = np.empty_like(v)
    t = np.zeros_like(b)
    _neg_div_into(b, q)
    np.multiply(q, -kappa, out=u)
    u += v
    energies = [rof_energy(u, v, cfg)] if trace else []
    it = 0
    for it in range(1, n_iters + 1):
        _grad_into(u, t)
        t *= c
        t += b
        if tol is not None:
            prev = b.copy()
        np.clip(t, -thr, thr, out=b)
        _neg_div_into(b, q)
        np.multiply(q, -kappa, out=u)
        u += v
        if trace:
            energies.append(rof_energy(u, v, cfg))
        if tol is not None and np.max(np.abs(b - prev)) <= tol:
            break
    return _finish(v, b, kappa, energies, it)


def residual_solver(v, cfg: SolverConfig, n_iters: int | None = None, *, b0=None,
                    trace: bool = True, tol: float | None = None) -> RofResult:
    """Residual Solver: iterate on ``b`` alone, rebuild ``u`` once at the end.

    ``c grad(v)`` is computed once before the loop; inside the loop only the
    fixed operator ``I - beta grad grad^T`` and the clip are applied.
    """
    n_iters = cfg.inner_iters if n_iters is None else int(n_iters)
    v, b = _prepare(v, cfg, b0)
    if cfg.lam_eff == 0:
        return _trivial(v, cfg, n_iters, trace)
    c, kappa, thr = solver_coefficients(cfg)

    g = c * gradient(v)
    q = np.empty_like(v)
    t = np.zeros_like(b)
    energies = [rof_energy(v - kappa * adjoint_gradient(b), v, cfg)] if trace else []
    it = 0
    for it in range(1, n_iters + 1):
        _neg_div_into(b, q)
        q *= -cfg.beta
        _grad_into(q, t)
        t += g
        t += b
        if tol is not None:
            prev = b.copy()
        np.clip(t, -thr, thr, out=b)
        if trace:
            energies.append(rof_energy(v - kappa * adjoint_gradient(b), v, cfg))
        if tol is not None and np.max(np.abs(b - prev)) <= tol:
            break
    return _finish(v, b, kappa, energies, it)


def fixed_point_defect(v, b, cfg: SolverConfig) -> float:
    """``max |b - T(b)|`` where ``T`` is one Residual Solver step; zero at a fixed point."""
    v = _single_channel(v, "v")
    b = np.asarray(b, dtype=np.float64)
    if cfg.lam_eff == 0:
        return float(np.max(np.abs(b)))
    c, _, thr = solver_coefficients(cfg)
    step = c * gradient(v) + b - cfg.beta * gradient(adjoint_gradient(b))
    return float(np.max(np.abs(b - cut(step, thr))))


SOLVERS = {"fs": fast_solver, "rs": residual_solver}


def solve_channels(image, cfg: SolverConfig, method: str = "rs", n_iters: int | None = None,
                   **kwargs) -> np.ndarray:
    """Run an inner solver independently on every channel of ``image``."""
    solver = SOLVERS[method]
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return solver(image, cfg, n_iters, **kwargs).u
    return np.stack([solver(ch, cfg, n_iters, **kwargs).u for ch in image])
