"""RSnet: the Residual Solver unrolled into a small convolutional network.

Architecture for ``B`` blocks and ``C`` channels, with ``beta`` fixed::

    g   = conv(v / 255, k_in)                  # (C, 1, 3, 3), shared by all blocks
    b_j = clip(g + conv(b_{j-1}, k_j), beta)   # (C, C, 3, 3) per block, b_0 = 0
    u   = v + 255 * conv(b_B, k_out)           # (1, C, 3, 3)

The network runs on the half-sample mirror extension of ``v``.  Under that
extension the forward-difference gradient with a Neumann boundary and its
adjoint become plain translation-invariant stencils, so a learnable 3x3
convolution can represent them exactly and :func:`kernels_from_rs`
reproduces :func:`tvlab.rof.residual_solver` to rounding error.  Two exact
realisations of the extension exist: a padded domain with margin ``B + 2``
(zero padding per layer, result cropped) and the ``2H x 2W`` mirrored
period with circular convolutions; the cheaper one is picked per call.

Convolutions are cross-correlations.  Gradients are derived by hand; the
clip's derivative is 1 strictly inside ``(-beta, beta)`` and 0 elsewhere.
The 255 factors keep all kernels of order one on [0, 255] images.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import SolverConfig, adjoint_gradient, gradient, normalized_energy, tv_energy

SCALE = 255.0
DEFAULT_BETA = 0.2
FORMAT_MAGIC = b"RSNT"
FORMAT_VERSION = 1


class CorruptParamsError(ValueError):
    """Raised when a parameter file is truncated or fails its checksum."""


class StaleTapeError(RuntimeError):
    """Raised when a tape is used with parameters other than those that produced it."""


@dataclass
class RsnetParams:
    k_in: np.ndarray
    blocks: list[np.ndarray]
    k_out: np.ndarray
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        self.k_in = np.asarray(self.k_in, dtype=np.float64)
        self.blocks = [np.asarray(k, dtype=np.float64) for k in self.blocks]
        self.k_out = np.asarray(self.k_out, dtype=np.float64)
        C = self.k_in.shape[0]
        if self.k_in.shape != (C, 1, 3, 3):
            raise ValueError(f"k_in must have shape (C, 1, 3, 3), got {self.k_in.shape}")
        if not self.blocks:
            raise ValueError("at least one block is required")
        for k in self.blocks:
            if k.shape != (C, C, 3, 3):
                raise ValueError(f"block kernels must have shape {(C, C, 3, 3)}, got {k.shape}")
        if self.k_out.shape != (1, C, 3, 3):
            raise ValueError(f"k_out must have shape {(1, C, 3, 3)}, got {self.k_out.shape}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("parameters must be finite")

    @property
    def B(self) -> int:
        return len(self.blocks)

    @property
    def C(self) -> int:
        return self.k_in.shape[0]

    @property
    def n_params(self) -> int:
        return 9 * self.C + 9 * self.C * self.C * self.B + 9 * self.C

    def arrays(self) -> list[np.ndarray]:
        return [self.k_in, *self.blocks, self.k_out]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_vector(self, vec) -> "RsnetParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {vec.size}")
        out, pos = [], 0
        for a in self.arrays():
            out.append(vec[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return RsnetParams(out[0], out[1:-1], out[-1], self.beta)

    def copy(self) -> "RsnetParams":
        return self.with_vector(self.to_vector())

    def digest(self) -> str:
        h = hashlib.sha1(struct.pack("<d", self.beta))
        for a in self.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, RsnetParams):
            return NotImplemented
        return (self.beta == other.beta and self.B == other.B and self.C == other.C
                and np.array_equal(self.to_vector(), other.to_vector()))


def init_params(B: int, C: int, beta: float = DEFAULT_BETA, seed: int = 0) -> RsnetParams:
    """Uniform ``[-s, s]`` kernels with ``s = 1 / (3 sqrt(9 C_in))``."""
    if B < 1 or C < 1:
        raise ValueError("B and C must be >= 1")
    rng = np.random.default_rng(seed)

    def draw(shape):
        s = 1.0 / (3.0 * np.sqrt(9.0 * shape[1]))
        return rng.uniform(-s, s, size=shape)

    k_in = draw((C, 1, 3, 3))
    blocks = [draw((C, C, 3, 3)) for _ in range(B)]
    k_out = draw((1, C, 3, 3))
    return RsnetParams(k_in, blocks, k_out, beta)


def _impulse_stencil(op, n_in, n_out, lift, proj):
    # 3x3 cross-correlation kernel of a translation-invariant operator, read off
    # impulse responses at the centre of a 5x5 grid (away from the boundary)
    K = np.zeros((n_out, n_in, 3, 3))
    for c in range(n_in):
        x = np.zeros((n_in, 5, 5))
        x[c, 2, 2] = 1.0
        y = proj(op(lift(x)))
        for o in range(n_out):
            # y[o, i, j] = sum K[o, c, di, dj] x[c, i + di - 1, j + dj - 1]
            K[o, c] = y[o, 1:4, 1:4][::-1, ::-1]
    return K


def kernels_from_rs(lam: float, beta: float = DEFAULT_BETA, B: int = 1,
                    weights=(1.0, 1.0)) -> RsnetParams:
    """Fixed two-channel kernels under which RSnet is ``B`` Residual Solver steps.

    ``lam`` is the TV weight of the ROF problem ``0.5||u - v||^2 + lam TV_w(u)``.
    Weighted TV clips channel ``k`` at ``beta * w_k``; the channels are carried
    divided by ``w_k`` so the network's single threshold ``beta`` applies.
    """
    if not lam > 0:
        raise ValueError("lam must be positive")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (2,) or not np.all(w > 0):
        raise ValueError("weights must be two positive numbers")
    c, kappa = beta**2 / lam, lam / beta
    grad = _impulse_stencil(gradient, 1, 2, lambda x: x[0], lambda y: y)
    adj = _impulse_stencil(adjoint_gradient, 2, 1, lambda x: x, lambda y: y[None])
    block = _impulse_stencil(lambda b: b - beta * gradient(adjoint_gradient(b)), 2, 2,
                             lambda x: x, lambda y: y)
    # b' = b / w: K_in -> K_in / w_out, block -> K[o, i] w_i / w_o, K_out -> K[., i] w_i
    block = block * w[None, :, None, None] / w[:, None, None, None]
    return RsnetParams(SCALE * c * grad / w[:, None, None, None],
                       [block.copy() for _ in range(B)],
                       -kappa / SCALE * adj * w[None, :, None, None], beta)


def embed_params(p: RsnetParams, B: int, C: int, noise: float = 0.0, seed: int = 0) -> RsnetParams:
    """Grow ``p`` to ``B >= p.B`` blocks and ``C >= p.C`` channels.

    With ``noise = 0`` the larger network computes exactly the same output:
    extra channels are all zero, and extra blocks with zero kernels are
    inserted after the first block, where each one reproduces ``clip(g)``.
    ``noise`` adds seeded uniform perturbations to the new entries only.
    """
    if B < p.B or C < p.C:
        raise ValueError("the embedding target must be at least as large as p")
    rng = np.random.default_rng(seed)

    def grow(K, shape):
        fresh = np.zeros(shape)
        if noise:
            fresh = rng.uniform(-noise, noise, shape)
        fresh[tuple(slice(0, n) for n in K.shape)] = K
        return fresh

    old, c = p.C, C
    k_in = grow(p.k_in, (c, 1, 3, 3))
    extra = [grow(np.zeros((old, old, 3, 3)), (c, c, 3, 3)) for _ in range(B - p.B)]
    blocks = [grow(K, (c, c, 3, 3)) for K in p.blocks]
    blocks = blocks[:1] + extra + blocks[1:]
    k_out = grow(p.k_out, (1, c, 3, 3))
    return RsnetParams(k_in, blocks, k_out, p.beta)


# ---- convolution primitives -------------------------------------------------

def _pad1(x, circular):
    mode = "wrap" if circular else "constant"
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode=mode)


def _im2col(x, circular):
    # x: (Cin, N, H, W) -> (9 * Cin, N * H * W), rows ordered (di, dj, c)
    cin, n, h, w = x.shape
    xp = _pad1(x, circular)
    cols = np.empty((9, cin, n, h, w))
    for k in range(9):
        di, dj = divmod(k, 3)
        cols[k] = xp[:, :, di:di + h, dj:dj + w]
    return cols.reshape(9 * cin, n * h * w)


def _kmat(K):
    # (Cout, Cin, 3, 3) -> (Cout, 9 * Cin) matching the im2col row order
    return K.transpose(0, 2, 3, 1).reshape(K.shape[0], -1)


def conv(x, K, circular=False, return_cols=False):
    """Same-size 3x3 cross-correlation of ``(Cin, N, H, W)`` with ``(Cout, Cin, 3, 3)``."""
    _, n, h, w = x.shape
    cols = _im2col(x, circular)
    y = (_kmat(K) @ cols).reshape(K.shape[0], n, h, w)
    return (y, cols) if return_cols else y


def conv_backward(x, K, gy, circular=False, cols=None, need_input=True):
    """Gradients of ``<gy, conv(x, K)>`` with respect to ``x`` and ``K``.

    ``cols`` may pass the im2col matrix of ``x`` saved by the forward pass.
    """
    cin, n, h, w = x.shape
    cout = K.shape[0]
    gy2 = gy.reshape(cout, -1)
    if cols is None:
        cols = _im2col(x, circular)
    gK = (gy2 @ cols.T).reshape(cout, 3, 3, cin).transpose(0, 3, 1, 2)
    if not need_input:
        return None, gK
    gcols = (_kmat(K).T @ gy2).reshape(9, cin, n, h, w)
    gxp = np.zeros((cin, n, h + 2, w + 2))
    for k in range(9):
        di, dj = divmod(k, 3)
        gxp[:, :, di:di + h, dj:dj + w] += gcols[k]
    if circular:
        gxp[:, :, 1, :] += gxp[:, :, -1, :]
        gxp[:, :, -2, :] += gxp[:, :, 0, :]
        gxp[:, :, :, 1] += gxp[:, :, :, -1]
        gxp[:, :, :, -2] += gxp[:, :, :, 0]
    return gxp[:, :, 1:-1, 1:-1], gK


# ---- forward / backward -----------------------------------------------------

@dataclass
class Tape:
    digest: str
    shape: tuple
    batched: bool
    circular: bool
    margin: int
    v_ext: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    acts: list[np.ndarray] = field(default_factory=list)
    cols: list = field(default_factory=list)


def _extension_mode(h, w, B, mode):
    margin = B + 2
    if mode == "auto":
        mode = "circular" if 4 * h * w < (h + 2 * margin) * (w + 2 * margin) else "padded"
    if mode not in ("padded", "circular"):
        raise ValueError(f"unknown extension mode {mode!r}")
    return mode == "circular", margin


def _extend(v, circular, margin):
    # v: (N, H, W); half-sample mirror extension
    h, w = v.shape[1:]
    if circular:
        return np.pad(v, ((0, 0), (0, h), (0, w)), mode="symmetric")
    return np.pad(v, ((0, 0), (margin, margin), (margin, margin)), mode="symmetric")


def _crop(x, h, w, circular, margin):
    if circular:
        return x[..., :h, :w]
    return x[..., margin:margin + h, margin:margin + w]


def _as_batch(v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 2:
        return v[None], False
    if v.ndim == 3:
        return v, True
    raise ValueError(f"input must be (H, W) or (N, H, W), got shape {v.shape}")


def rsnet_forward(v, p: RsnetParams, mode: str = "auto"):
    """Apply the network to ``v`` of shape ``(H, W)`` or a batch ``(N, H, W)``.

    Returns ``(u, tape)``; ``u`` has the shape of ``v``.
    """
    vb, batched = _as_batch(v)
    if not np.all(np.isfinite(vb)):
        raise ValueError("input contains non-finite values")
    n, h, w = vb.shape
    circular, margin = _extension_mode(h, w, p.B, mode)
    ve = _extend(vb, circular, margin)[None]
    tape = Tape(p.digest(), vb.shape, batched, circular, margin, ve)
    g, cols = conv(ve / SCALE, p.k_in, circular, return_cols=True)
    tape.cols.append(cols)
    b = None  # b_0 = 0, so the first block reduces to clip(g)
    for K in p.blocks:
        tape.acts.append(b)
        if b is None:
            s, cols = g, None
        else:
            r, cols = conv(b, K, circular, return_cols=True)
            s = g + r
        tape.cols.append(cols)
        tape.pre.append(s)
        b = np.clip(s, -p.beta, p.beta)
    tape.acts.append(b)
    r, cols = conv(b, p.k_out, circular, return_cols=True)
    tape.cols.append(cols)
    ue = ve + SCALE * r
    u = _crop(ue[0], h, w, circular, margin)
    return (u if batched else u[0]), tape


def rsnet_backward(tape: Tape, grad_u, p: RsnetParams) -> RsnetParams:
    """Reverse pass: gradients of ``<grad_u, u>`` with respect to every kernel.

    ``grad_u`` is the derivative of the loss with respect to the output.
    The result is returned as an :class:`RsnetParams` holding gradients.
    """
    if tape is None:
        raise StaleTapeError("missing tape; run rsnet_forward first")
    if tape.digest != p.digest():
        raise StaleTapeError("tape was recorded with different parameters")
    gu = np.asarray(grad_u, dtype=np.float64).reshape(tape.shape)
    n, h, w = tape.shape
    circ, margin = tape.circular, tape.margin
    gue = np.zeros(tape.v_ext.shape)
    _crop(gue[0], h, w, circ, margin)[...] = gu
    gb, gk_out = conv_backward(tape.acts[-1], p.k_out, SCALE * gue, circ, tape.cols[-1])
    gg = np.zeros_like(gb)
    gblocks = [None] * p.B
    for j in range(p.B - 1, -1, -1):
        gs = gb * (np.abs(tape.pre[j]) < p.beta)
        gg += gs
        if tape.acts[j] is None:
            gblocks[j] = np.zeros_like(p.blocks[j])
        else:
            gb, gblocks[j] = conv_backward(tape.acts[j], p.blocks[j], gs, circ, tape.cols[j + 1])
    _, gk_in = conv_backward(tape.v_ext / SCALE, p.k_in, gg, circ, tape.cols[0], need_input=False)
    return RsnetParams(gk_in, gblocks, gk_out, p.beta)


# ---- loss -------------------------------------------------------------------

def _loss_cfg(lam, weights):
    return SolverConfig(lam=lam, weight_x=weights[0], weight_y=weights[1])


def rsnet_loss(u, f, A=None, lam: float = 10.0, weights=(1.0, 1.0)) -> float:
    """Resolution-normalised energy of ``u`` against the observation ``f``.

    ``weights=(w, 1 - w)`` gives the weighted-TV variant.  Batches
    ``(N, H, W)`` return the mean over the batch.
    """
    cfg = _loss_cfg(lam, weights)
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 3:
        fs = np.asarray(f, dtype=np.float64)
        if len(fs) != len(u):
            raise ValueError("batch sizes of u and f differ")
        return float(np.mean([normalized_energy(ui, fi, A, cfg) for ui, fi in zip(u, fs)]))
    return normalized_energy(u, f, A, cfg)


def loss_grad_u(u, f, A=None, lam: float = 10.0, weights=(1.0, 1.0)) -> np.ndarray:
    """Derivative of :func:`rsnet_loss` with respect to ``u`` (sign(0) = 0 for TV)."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 3:
        fs = np.asarray(f, dtype=np.float64)
        return np.stack([loss_grad_u(ui, fi, A, lam, weights) for ui, fi in zip(u, fs)]) / len(u)
    if A is None:
        r = u - np.asarray(f, dtype=np.float64).reshape(u.shape)
    else:
        r = A.apply_adjoint(A.apply(u) - np.asarray(f, dtype=np.float64).ravel())
    s = np.sign(gradient(u))
    s[0] *= weights[0]
    s[1] *= weights[1]
    return (r + lam * adjoint_gradient(s)) / u.size


def loss_and_grad(v, f, p: RsnetParams, A=None, lam: float = 10.0, weights=(1.0, 1.0)):
    """Mean loss over the batch ``v`` and its parameter gradient."""
    u, tape = rsnet_forward(v, p)
    loss = rsnet_loss(u, f, A, lam, weights)
    return loss, rsnet_backward(tape, loss_grad_u(u, f, A, lam, weights), p)


# ---- optimisation -----------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 64
    epochs: int = 3000
    lam: float = 10.0
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_x: float = 1.0
    weight_y: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ValueError("Adam decay rates must lie in [0, 1)")

    @property
    def weights(self):
        return (self.weight_x, self.weight_y)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update.

    ``params``/``grads`` may be arrays or :class:`RsnetParams`; the updated
    parameters are returned in the same form with the new state.
    """
    as_net = isinstance(params, RsnetParams)
    x = params.to_vector() if as_net else np.asarray(params, dtype=np.float64)
    g = grads.to_vector() if isinstance(grads, RsnetParams) else np.asarray(grads, dtype=np.float64)
    if x.shape != g.shape or x.shape != state.m.shape:
        raise ValueError("parameter, gradient and state shapes differ")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g * g
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    x_new = x - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    new_state = AdamState(m, v, t)
    return (params.with_vector(x_new) if as_net else x_new), new_state


@dataclass
class TrainResult:
    params: RsnetParams
    epoch_losses: list[float]


def train_rsnet(dataset, p0: RsnetParams, A=None, tc: TrainConfig | None = None,
                observations=None, callback=None) -> TrainResult:
    """Mini-batch Adam on the mean normalised energy.

    ``dataset`` is ``(N, H, W)``; ``observations`` defaults to the inputs
    themselves (denoising).  Batches are drawn from a seeded permutation each
    epoch.  The epoch loss is the sample-weighted mean of batch losses seen
    during the epoch.
    """
    tc = TrainConfig() if tc is None else tc
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 3 or len(data) == 0:
        raise ValueError("dataset must be a non-empty (N, H, W) stack of equal-size patches")
    obs = data if observations is None else np.asarray(observations, dtype=np.float64)
    if len(obs) != len(data):
        raise ValueError("one observation per patch is required")
    rng = np.random.default_rng(tc.seed)
    p = p0.copy()
    state = AdamState.zeros(p.n_params)
    losses = []
    for epoch in range(tc.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(data), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            loss, grads = loss_and_grad(data[idx], obs[idx], p, A, tc.lam, tc.weights)
            total += loss * len(idx)
            p, state = adam_step(p, grads, state, tc)
        losses.append(total / len(data))
        if callback is not None:
            callback(epoch, losses[-1], p)
    return TrainResult(p, losses)


# ---- embedding in the outer loop ---------------------------------------------

def full_net_forward(f, A, p: RsnetParams, cfg: SolverConfig, outer_blocks: int,
                     fidelity: str = "quadratic") -> np.ndarray:
    """Unrolled dual-first loop with every inner ROF solve replaced by RSnet.

    Starts from ``u = 0``, ``d = 0``; ``cfg.alpha`` (or 2.01 ||A^T A||) sets
    the extrapolation step.  ``p`` should solve the ROF problem with TV
    weight ``cfg.lam / alpha``, e.g. ``kernels_from_rs(cfg.lam / alpha)``.
    """
    from .outer import ALPHA_FACTOR, estimate_operator_norm

    if outer_blocks < 1:
        raise ValueError("outer_blocks must be >= 1")
    if fidelity not in ("quadratic", "exact"):
        raise ValueError(f"unknown fidelity {fidelity!r}")
    f = np.asarray(f, dtype=np.float64).ravel()
    if f.size != A.output_size:
        raise ValueError(f"f has {f.size} entries, operator produces {A.output_size}")
    alpha = cfg.alpha if cfg.alpha is not None else ALPHA_FACTOR * estimate_operator_norm(A).value
    damping = 0.5 if fidelity == "quadratic" else 1.0
    u = np.zeros(A.input_shape)
    d = np.zeros_like(f)
    for _ in range(outer_blocks):
        d_new = damping * (d + f - A.apply(u))
        u, _ = rsnet_forward(u + A.apply_adjoint(2.0 * d_new - d) / alpha, p)
        d = d_new
    return u


# ---- serialisation ------------------------------------------------------------

_HEADER = struct.Struct("<4sIIId")


def save_params(p: RsnetParams, path) -> None:
    """Binary layout (little endian)::

        magic "RSNT" | uint32 version | uint32 B | uint32 C | float64 beta
        float64 k_in (C*1*9) | float64 blocks[0..B-1] (C*C*9 each) | float64 k_out (C*9)
        uint32 CRC-32 of everything above

    Kernels are stored row-major in ``(out, in, row, col)`` order.
    """
    body = _HEADER.pack(FORMAT_MAGIC, FORMAT_VERSION, p.B, p.C, p.beta)
    body += p.to_vector().astype("<f8").tobytes()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_params(path) -> RsnetParams:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise CorruptParamsError(f"{path}: file too short for the header")
    magic, version, B, C, beta = _HEADER.unpack_from(raw)
    if magic != FORMAT_MAGIC:
        raise CorruptParamsError(f"{path}: not an RSnet parameter file")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})")
    n = 9 * C + 9 * C * C * B + 9 * C
    expected = _HEADER.size + 8 * n + 4
    if len(raw) != expected:
        raise CorruptParamsError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptParamsError(f"{path}: checksum mismatch")
    vec = np.frombuffer(body, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    template = RsnetParams(np.zeros((C, 1, 3, 3)), [np.zeros((C, C, 3, 3))] * B,
                           np.zeros((1, C, 3, 3)), beta)
    return template.with_vector(vec)
