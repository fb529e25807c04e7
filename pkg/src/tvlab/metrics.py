"""PSNR and SSIM on the [0, 255] intensity scale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PSNR_CAP = 99.0


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    masked: bool = False


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, peak: float = 255.0, mask=None) -> float:
    """``10 log10(peak^2 / MSE)``; identical inputs give :data:`PSNR_CAP` dB."""
    x, y = _pair(x, y)
    d = x - y
    if mask is not None:
        d = d[..., np.broadcast_to(np.asarray(mask, dtype=bool), x.shape[-2:])]
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def _box_mean(a, win):
    # mean over every win x win window (valid positions) via a summed-area table
    s = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    s[1:, 1:] = a.cumsum(0).cumsum(1)
    tot = s[win:, win:] - s[:-win, win:] - s[win:, :-win] + s[:-win, :-win]
    return tot / (win * win)


def _ssim_map(x, y, win, c1, c2):
    # remove the global mean first to limit cancellation in the variance sums
    shift = 0.5 * (x.mean() + y.mean())
    x = x - shift
    y = y - shift
    mx, my = _box_mean(x, win), _box_mean(y, win)
    vx = np.maximum(_box_mean(x * x, win) - mx * mx, 0.0)
    vy = np.maximum(_box_mean(y * y, win) - my * my, 0.0)
    cxy = _box_mean(x * y, win) - mx * my
    mx += shift
    my += shift
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(x, y, window: int = 8, k1: float = 0.01, k2: float = 0.03, peak: float = 255.0,
         mask=None) -> float:
    """Mean local SSIM over all ``window x window`` positions (uniform weights).

    Local statistics use population (biased) variances.  With ``mask`` only
    windows lying entirely inside the mask count.  ``(C, H, W)`` inputs are
    averaged over channels.
    """
    x, y = _pair(x, y)
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3:
        raise ValueError("ssim expects (H, W) or (C, H, W) images")
    h, w = x.shape[1:]
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} is smaller than the {window}x{window} window")
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    sel = None
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != (h, w):
            raise ValueError(f"mask shape {m.shape} does not match image {(h, w)}")
        sel = _box_mean(m, window) > 1.0 - 1e-9
        if not sel.any():
            raise ValueError("no window lies entirely inside the mask")
    vals = []
    for xc, yc in zip(x, y):
        smap = _ssim_map(xc, yc, window, c1, c2)
        vals.append(smap[sel].mean() if sel is not None else smap.mean())
    return float(np.mean(vals))


def report(x, y, mask=None, **kwargs) -> MetricReport:
    return MetricReport(psnr=psnr(x, y, mask=mask), ssim=ssim(x, y, mask=mask, **kwargs),
                        masked=mask is not None)
