"""Farneback dense optical flow and the motion input channel.

Each frame is locally modeled as a quadratic f(p + d) ~ c + b'd + d'Ad over
a Gaussian-weighted poly_n x poly_n neighborhood (separable weighted least
squares). Displacement follows from equating the expansions of the two
frames: A d = delta_b, averaged over a winsize window and solved per pixel,
iterated with warping over a coarse-to-fine pyramid.

The default configuration is a heavy-smoothing preset (large window, two
pyramid levels) chosen so a person lying still after a fall produces
near-zero flow; alternatives are one config away.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

FLOW_MAGIC = b"TFFL"
FLOW_VERSION = 1
DEFAULT_MAX_MAGNITUDE = 10.0


@dataclass(frozen=True)
class FarnebackConfig:
    pyr_scale: float = 0.3
    levels: int = 2
    winsize: int = 31
    iterations: int = 2
    poly_n: int = 7
    poly_sigma: float = 1.5
    gaussian_window: bool = True

    def __post_init__(self):
        if not 0.0 < self.pyr_scale < 1.0:
            raise ValueError(f"pyr_scale must lie in (0,1), got {self.pyr_scale}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.winsize % 2 == 0 or self.winsize < 3:
            raise ValueError(f"winsize must be odd and >= 3, got {self.winsize}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.poly_n % 2 == 0 or self.poly_n < 3:
            raise ValueError(f"poly_n must be odd and >= 3, got {self.poly_n}")
        if self.poly_sigma <= 0:
            raise ValueError(f"poly_sigma must be positive, got {self.poly_sigma}")


PRESETS = {
    "low": FarnebackConfig(),
    "balanced": FarnebackConfig(pyr_scale=0.5, levels=3, winsize=21, iterations=3,
                                poly_n=5, poly_sigma=1.2, gaussian_window=True),
    "high": FarnebackConfig(pyr_scale=0.8, levels=5, winsize=15, iterations=5,
                            poly_n=5, poly_sigma=1.1, gaussian_window=False),
}


@dataclass
class FlowField:
    """Per-pixel displacement in pixels: u horizontal (columns), v vertical
    (rows), both at the resolution of the source frames."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise ValueError(f"flow components disagree: {self.u.shape} vs {self.v.shape}")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise FloatingPointError("flow field contains non-finite values")

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


# -- pyramid -------------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _gaussian_kernel1d(sigma: float, radius: int) -> np.ndarray:
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _blur(frame: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(3.0 * sigma + 0.5))
    k = _gaussian_kernel1d(sigma, radius)
    out = correlate1d(frame, k, axis=0, mode="nearest")
    return correlate1d(out, k, axis=1, mode="nearest")


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resampling."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return (1 - wy) * top + wy * bot


def gaussian_pyramid(frame: np.ndarray, cfg: FarnebackConfig) -> list[np.ndarray]:
    """Level 0 is the input; each subsequent level is blurred then resampled
    by pyr_scale (extents rounded half up)."""
    if frame.ndim != 2:
        raise ValueError(f"expected a 2D frame, got shape {frame.shape}")
    levels = [np.asarray(frame, dtype=np.float64)]
    smooth_sigma = 0.5 * np.sqrt(1.0 / cfg.pyr_scale**2 - 1.0)
    for _ in range(1, cfg.levels):
        prev = levels[-1]
        nh = _round_half_up(prev.shape[0] * cfg.pyr_scale)
        nw = _round_half_up(prev.shape[1] * cfg.pyr_scale)
        if min(nh, nw) < 8:
            raise ValueError(
                f"pyramid level would shrink below 8 px ({nh}x{nw}); reduce levels or raise pyr_scale"
            )
        levels.append(resize_bilinear(_blur(prev, smooth_sigma), nh, nw))
    return levels


# -- polynomial expansion --------------------------------------------------------


def _poly_basis_dual(poly_n: int, poly_sigma: float):
    """Inverse Gram matrix of the weighted basis {1, x, y, x^2, y^2, xy} and
    the separable applicability kernels (g, x*g, x^2*g)."""
    r = poly_n // 2
    xs = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(xs**2) / (2.0 * poly_sigma**2))
    g /= g.sum()
    gx = xs * g
    gxx = xs**2 * g
    # Gram entries via separability: basis index order (1, x, y, x2, y2, xy)
    s0 = g.sum()  # = 1
    sx2 = (xs**2 * g).sum()
    sx4 = (xs**4 * g).sum()
    gram = np.zeros((6, 6))
    gram[0, 0] = s0 * s0
    gram[1, 1] = sx2 * s0
    gram[2, 2] = sx2 * s0
    gram[3, 3] = sx4 * s0
    gram[4, 4] = sx4 * s0
    gram[5, 5] = sx2 * sx2
    gram[0, 3] = gram[3, 0] = sx2 * s0
    gram[0, 4] = gram[4, 0] = sx2 * s0
    gram[3, 4] = gram[4, 3] = sx2 * sx2
    inv = np.linalg.inv(gram)
    return inv, g, gx, gxx


def polynomial_expansion(frame: np.ndarray, poly_n: int, poly_sigma: float):
    """Per-pixel weighted least-squares quadratic fit.

    Returns (A, b, c): A is (H,W,2,2) symmetric with A[...,0,0] the x^2
    coefficient, b is (H,W,2) ordered (b_x, b_y), c is (H,W). x increases
    along columns, y along rows.
    """
    if poly_n % 2 == 0:
        raise ValueError(f"poly_n must be odd, got {poly_n}")
    f = np.asarray(frame, dtype=np.float64)
    inv, g, gx, gxx = _poly_basis_dual(poly_n, poly_sigma)

    def corr(img, kernel, axis):
        return correlate1d(img, kernel, axis=axis, mode="nearest")

    # projections of f onto the weighted basis, separably: rows are y, cols x
    fy0 = corr(f, g, 0)
    fy1 = corr(f, gx, 0)
    fy2 = corr(f, gxx, 0)
    p1 = corr(fy0, g, 1)      # <f, 1>
    px = corr(fy0, gx, 1)     # <f, x>
    py = corr(fy1, g, 1)      # <f, y>
    pxx = corr(fy0, gxx, 1)   # <f, x^2>
    pyy = corr(fy2, g, 1)     # <f, y^2>
    pxy = corr(fy1, gx, 1)    # <f, xy>

    proj = np.stack([p1, px, py, pxx, pyy, pxy], axis=-1)
    coef = proj @ inv.T  # (H,W,6) coefficients in basis order

    c = coef[..., 0]
    b = np.stack([coef[..., 1], coef[..., 2]], axis=-1)
    a = np.empty(f.shape + (2, 2))
    a[..., 0, 0] = coef[..., 3]
    a[..., 1, 1] = coef[..., 4]
    a[..., 0, 1] = coef[..., 5] / 2.0
    a[..., 1, 0] = coef[..., 5] / 2.0
    return a, b, c


# -- flow estimation --------------------------------------------------------------


def _window_filter(img: np.ndarray, cfg: FarnebackConfig) -> np.ndarray:
    if cfg.gaussian_window:
        sigma = 0.3 * ((cfg.winsize - 1) * 0.5 - 1.0) + 0.8
        k = _gaussian_kernel1d(sigma, cfg.winsize // 2)
    else:
        k = np.full(cfg.winsize, 1.0 / cfg.winsize)
    out = correlate1d(img, k, axis=0, mode="nearest")
    return correlate1d(out, k, axis=1, mode="nearest")


def _warp_sample(arr: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear sample of a (H,W,...) field at fractional (ys, xs), clamped."""
    h, w = arr.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[..., None] if arr.ndim > 2 else ys - y0
    wx = (xs - x0)[..., None] if arr.ndim > 2 else xs - x0
    top = arr[y0, x0] * (1 - wx) + arr[y0, x1] * wx
    bot = arr[y1, x0] * (1 - wx) + arr[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def _flow_update(a1, b1, a2, b2, u, v, cfg: FarnebackConfig):
    """One displacement refinement: warp frame-2 expansion by the current
    flow, form the averaged A and delta-b, window-average the normal
    equations, and solve 2x2 systems per pixel."""
    h, w = u.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    a2w = _warp_sample(a2.reshape(h, w, 4), yy + v, xx + u).reshape(h, w, 2, 2)
    b2w = _warp_sample(b2, yy + v, xx + u)

    a = 0.5 * (a1 + a2w)
    # delta_b in (x, y) order; A rows/cols ordered (x, y) to match b
    d = np.stack([u, v], axis=-1)
    db = -0.5 * (b2w - b1) + np.einsum("hwij,hwj->hwi", a, d)

    g11 = a[..., 0, 0] ** 2 + a[..., 0, 1] ** 2
    g12 = a[..., 0, 1] * (a[..., 0, 0] + a[..., 1, 1])
    g22 = a[..., 1, 1] ** 2 + a[..., 0, 1] ** 2
    h1 = a[..., 0, 0] * db[..., 0] + a[..., 0, 1] * db[..., 1]
    h2 = a[..., 0, 1] * db[..., 0] + a[..., 1, 1] * db[..., 1]

    g11 = _window_filter(g11, cfg)
    g12 = _window_filter(g12, cfg)
    g22 = _window_filter(g22, cfg)
    h1 = _window_filter(h1, cfg)
    h2 = _window_filter(h2, cfg)

    det = g11 * g22 - g12 * g12
    ok = det > 1e-12
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    u_new = np.where(ok, (g22 * h1 - g12 * h2) * inv_det, u)
    v_new = np.where(ok, (g11 * h2 - g12 * h1) * inv_det, v)
    return u_new, v_new


def farneback_flow(prev: np.ndarray, nxt: np.ndarray, cfg: FarnebackConfig | None = None) -> FlowField:
    """Coarse-to-fine dense flow from `prev` to `nxt` in pixels.

    Inputs are (H,W) frames normalized to [0,1].
    """
    cfg = cfg or FarnebackConfig()
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != nxt.shape or prev.ndim != 2:
        raise ValueError(f"frames must be equal-extent 2D arrays, got {prev.shape} and {nxt.shape}")
    for name, frame in (("prev", prev), ("next", nxt)):
        if frame.min() < -1e-6 or frame.max() > 1.0 + 1e-6:
            raise ValueError(f"{name} frame values must be normalized to [0,1]")

    pyr_prev = gaussian_pyramid(prev, cfg)
    pyr_next = gaussian_pyramid(nxt, cfg)

    u = v = None
    for level in range(cfg.levels - 1, -1, -1):
        f1, f2 = pyr_prev[level], pyr_next[level]
        h, w = f1.shape
        if u is None:
            u = np.zeros((h, w))
            v = np.zeros((h, w))
        else:
            u = resize_bilinear(u, h, w) / cfg.pyr_scale
            v = resize_bilinear(v, h, w) / cfg.pyr_scale
        a1, b1, _ = polynomial_expansion(f1, cfg.poly_n, cfg.poly_sigma)
        a2, b2, _ = polynomial_expansion(f2, cfg.poly_n, cfg.poly_sigma)
        for _ in range(cfg.iterations):
            u, v = _flow_update(a1, b1, a2, b2, u, v, cfg)
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise FloatingPointError(f"non-finite flow at pyramid level {level}")
    return FlowField(u=u, v=v)


def flow_to_channel(flow: FlowField, max_magnitude: float = DEFAULT_MAX_MAGNITUDE) -> np.ndarray:
    """Magnitude clipped at max_magnitude and scaled to [0,1]."""
    mag = flow.magnitude()
    return np.clip(mag, 0.0, max_magnitude) / max_magnitude


# -- flow cache files -------------------------------------------------------------


def write_flow_file(path, channel: np.ndarray) -> None:
    """16-byte header (magic, u16 version, u16 H, u16 W, 6 reserved bytes)
    followed by H*W little-endian float32 magnitude values."""
    h, w = channel.shape
    if h > 0xFFFF or w > 0xFFFF:
        raise ValueError(f"flow extents {h}x{w} exceed the u16 header fields")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHHH6s", FLOW_MAGIC, FLOW_VERSION, h, w, b"\x00" * 6))
        fh.write(np.ascontiguousarray(channel, dtype="<f4").tobytes())


def read_flow_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise ValueError(f"flow file {path} truncated in header")
        magic, version, h, w, _ = struct.unpack("<4sHHH6s", header)
        if magic != FLOW_MAGIC:
            raise ValueError(f"flow file {path} has bad magic {magic!r}")
        if version != FLOW_VERSION:
            raise ValueError(f"flow file {path} has unsupported version {version}")
        raw = fh.read(4 * h * w)
        if len(raw) != 4 * h * w:
            raise ValueError(f"flow file {path} truncated in payload")
        return np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float32)
