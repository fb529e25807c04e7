"""Linear imaging operators and the outer loops for ``0.5||Au - f||^2 + lam TV_w(u)``.

Observations are flat 1-D vectors.  Operators map ``(H, W)`` images to
observation vectors and back through their adjoint.

Two outer loops are provided, both delegating the ROF subproblem
``argmin_u alpha/2 ||u - v||^2 + lam TV_w(u)`` to :mod:`tvlab.rof`:

* :func:`proximal_outer` - gradient step on the data term, then the prox;
* :func:`dual_first_outer` - scaled dual update first, then an extrapolated
  primal point ``v = u + A^T(2 d_new - d) / alpha`` (no ``A^T A`` product).

``fidelity="quadratic"`` (default) solves the penalised model above.  The
dual update is then the proximal map of the quadratic data term, i.e. the
dual-first loop is a primal-dual (Chambolle-Pock) iteration and the
proximal loop keeps ``d = 0``.  ``fidelity="exact"`` uses the undamped
updates ``d <- d + f - A u``, which enforce ``A u = f`` in the limit
(Bregman-type iteration for the equality-constrained model).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .grid import SolverConfig, _single_channel, tv_energy
from .rof import SOLVERS

ALPHA_FACTOR = 2.01


class ImagingOperator:
    """Linear map from ``input_shape`` images to flat observation vectors."""

    input_shape: tuple[int, int]
    output_size: int

    def apply(self, u) -> np.ndarray:
        raise NotImplementedError

    def apply_adjoint(self, y) -> np.ndarray:
        raise NotImplementedError

    def _check_input(self, u):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != tuple(self.input_shape):
            raise ValueError(f"operator expects images of shape {self.input_shape}, got {u.shape}")
        return u

    def _check_output(self, y):
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.size != self.output_size:
            raise ValueError(f"operator expects {self.output_size} observations, got {y.size}")
        return y


class IdentityOperator(ImagingOperator):
    def __init__(self, shape):
        self.input_shape = tuple(shape)
        self.output_size = int(np.prod(shape))

    def apply(self, u):
        return self._check_input(u).ravel().copy()

    def apply_adjoint(self, y):
        return self._check_output(y).reshape(self.input_shape).copy()


class SparseOperator(ImagingOperator):
    """Explicit row-sparse matrix; column ``k`` is pixel ``k`` in row-major order."""

    def __init__(self, matrix, input_shape):
        self.matrix = sp.csr_matrix(matrix, dtype=np.float64)
        self.input_shape = tuple(input_shape)
        self.output_size = self.matrix.shape[0]
        if self.matrix.shape[1] != int(np.prod(self.input_shape)):
            raise ValueError("matrix column count does not match the image size")
        if not np.all(np.isfinite(self.matrix.data)):
            raise ValueError("operator entries must be finite")
        self._adjoint = self.matrix.T.tocsr()

    @classmethod
    def from_rows(cls, rows, input_shape):
        """Build from a list of ``(column_indices, weights)`` pairs, one per row."""
        indptr = [0]
        indices, data = [], []
        for cols, weights in rows:
            cols = np.asarray(cols, dtype=np.int64)
            weights = np.asarray(weights, dtype=np.float64)
            if cols.shape != weights.shape:
                raise ValueError("row indices and weights differ in length")
            indices.append(cols)
            data.append(weights)
            indptr.append(indptr[-1] + cols.size)
        n = int(np.prod(input_shape))
        mat = sp.csr_matrix(
            (np.concatenate(data) if data else np.zeros(0),
             np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64),
             np.asarray(indptr)),
            shape=(len(rows), n),
        )
        return cls(mat, input_shape)

    def row(self, r):
        start, stop = self.matrix.indptr[r], self.matrix.indptr[r + 1]
        return self.matrix.indices[start:stop].copy(), self.matrix.data[start:stop].copy()

    def scaled(self, factor):
        return SparseOperator(self.matrix * factor, self.input_shape)

    def apply(self, u):
        return self.matrix @ self._check_input(u).ravel()

    def apply_adjoint(self, y):
        return (self._adjoint @ self._check_output(y)).reshape(self.input_shape)


@dataclass
class NormEstimate:
    value: float
    iterations: int
    converged: bool
    zero_operator: bool = False

    def __float__(self):
        return self.value


def estimate_operator_norm(A: ImagingOperator, tol: float = 1e-10, max_iters: int = 1000,
                           seed: int = 0) -> NormEstimate:
    """Power iteration for the largest eigenvalue of ``A^T A``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(A.input_shape)
    x /= np.linalg.norm(x)
    est = 0.0
    for it in range(1, max_iters + 1):
        y = A.apply_adjoint(A.apply(x))
        new = float(np.vdot(x, y))
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return NormEstimate(0.0, it, True, zero_operator=True)
        x = y / ny
        if abs(new - est) <= tol * abs(new):
            return NormEstimate(new, it, True)
        est = new
    return NormEstimate(est, max_iters, False)


@dataclass
class OuterResult:
    u: np.ndarray
    energy_trace: list[float] = field(default_factory=list)
    d: np.ndarray | None = None
    alpha: float = 0.0
    iterations: int = 0


def _resolve_alpha(A, cfg):
    norm = estimate_operator_norm(A).value
    if cfg.alpha is None:
        # a zero operator still needs a positive step scale
        return ALPHA_FACTOR * norm if norm > 0 else 1.0
    if cfg.alpha <= 2.0 * norm:
        raise ValueError(f"alpha={cfg.alpha} must exceed 2 ||A^T A|| = {2.0 * norm:.6g}")
    return float(cfg.alpha)


def _setup(f, A, cfg, inner, fidelity):
    if fidelity not in ("quadratic", "exact"):
        raise ValueError(f"unknown fidelity {fidelity!r}")
    if inner not in SOLVERS:
        raise ValueError(f"unknown inner solver {inner!r}; choose from {sorted(SOLVERS)}")
    f = np.asarray(f, dtype=np.float64).ravel()
    if f.size != A.output_size:
        raise ValueError(f"f has {f.size} entries, operator produces {A.output_size}")
    alpha = _resolve_alpha(A, cfg)
    return f, alpha, replace(cfg, alpha=alpha)


def _energy(u, Au, f, cfg):
    r = Au - f
    return (0.5 * float(np.dot(r, r)) + cfg.lam * tv_energy(u, *cfg.weights)) / u.size


def proximal_outer(f, A: ImagingOperator, cfg: SolverConfig, inner: str = "rs", *,
                   fidelity: str = "quadratic", warm_start: bool = True,
                   trace: bool = True, u0=None) -> OuterResult:
    """Proximal-gradient outer loop; starts from ``u = 0``, ``d = 0``.

    Each iteration applies ``A`` twice (at ``u^t`` and ``u^{t+1}``) and its
    adjoint once.  ``warm_start`` carries the inner field ``b`` across outer
    iterations so the inner budget ``cfg.inner_iters`` accumulates.
    """
    f, alpha, icfg = _setup(f, A, cfg, inner, fidelity)
    solver = SOLVERS[inner]
    u = np.zeros(A.input_shape) if u0 is None else _single_channel(u0).copy()
    d = np.zeros_like(f)
    b = None
    energies = []
    if trace:
        energies.append(_energy(u, A.apply(u) if u0 is not None else np.zeros_like(f), f, cfg))
    for _ in range(cfg.outer_iters):
        Au = A.apply(u)
        v = u - A.apply_adjoint(Au - f - d) / alpha
        res = solver(v, icfg, cfg.inner_iters, b0=b if warm_start else None, trace=False)
        b = res.b
        u = res.u
        Au = A.apply(u)
        if fidelity == "exact":
            d = d + f - Au
        if trace:
            energies.append(_energy(u, Au, f, cfg))
    return OuterResult(u=u, energy_trace=energies, d=d, alpha=alpha, iterations=cfg.outer_iters)


def dual_first_outer(f, A: ImagingOperator, cfg: SolverConfig, inner: str = "rs", *,
                     fidelity: str = "quadratic", warm_start: bool = True,
                     trace: bool = True, u0=None, inner_fn=None) -> OuterResult:
    """Dual-first outer loop; one ``A`` and one ``A^T`` application per iteration.

    ``inner_fn(v, icfg, b0)`` may replace the ROF solver; it must return an
    object with ``u`` and ``b`` attributes (``b`` may be ``None``).
    """
    f, alpha, icfg = _setup(f, A, cfg, inner, fidelity)
    solver = SOLVERS[inner]
    u = np.zeros(A.input_shape) if u0 is None else _single_channel(u0).copy()
    Au = np.zeros_like(f) if u0 is None else A.apply(u)
    d = np.zeros_like(f)
    b = None
    energies = [_energy(u, Au, f, cfg)] if trace else []
    for _ in range(cfg.outer_iters):
        d_new = d + f - Au
        if fidelity == "quadratic":
            # proximal map of the conjugate of 0.5||. - f||^2 with unit dual step
            d_new *= 0.5
        v = u + A.apply_adjoint(2.0 * d_new - d) / alpha
        d = d_new
        b0 = b if warm_start else None
        if inner_fn is None:
            res = solver(v, icfg, cfg.inner_iters, b0=b0, trace=False)
        else:
            res = inner_fn(v, icfg, b0)
        b = res.b
        u = res.u
        Au = A.apply(u)
        if trace:
            energies.append(_energy(u, Au, f, cfg))
    return OuterResult(u=u, energy_trace=energies, d=d, alpha=alpha, iterations=cfg.outer_iters)
