"""Evaluation trackers: pyramidal grid optical flow, HSV blob tracking, and the MSE grade.

Pixel coordinates are array-index based: the center of pixel ``[row, col]``
is ``(x=col, y=row)``.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numba
import numpy as np
from scipy import ndimage

GRAY_WEIGHTS = (0.299, 0.587, 0.114)
# min-eigenvalue units: 8-bit intensities, Scharr-weighted derivatives (x32), scaled by 2^-20
EIG_SCALE = (255.0 * 32.0) ** 2 / float(1 << 20)


class TrackStatus(str, enum.Enum):
    TRACKED = "tracked"
    LOST = "lost"


class LossReason(str, enum.Enum):
    BOUNDS = "bounds"
    CONDITIONING = "conditioning"
    FORWARD_BACKWARD = "forward_backward"


@dataclass(frozen=True)
class LKParams:
    window: int = 15
    levels: int = 3
    iterations: int = 10
    epsilon: float = 0.01
    min_eig: float = 1e-4
    fb_thresh: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be an odd size >= 3")
        if self.levels < 1 or self.iterations < 1:
            raise ValueError("levels and iterations must be >= 1")


@dataclass
class GridTrack:
    point_id: int
    start: tuple[float, float]
    current: tuple[float, float]
    end: tuple[float, float] | None = None
    status: TrackStatus = TrackStatus.TRACKED
    loss_tick: int | None = None
    loss_reason: LossReason | None = None


@dataclass
class TrackReport:
    G: float  # pixels^2; nan when nothing survived
    tracked_count: int
    total_points: int
    percent_correct: float
    tracks: list[GridTrack] = field(repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["point_id", "status", "loss_tick", "sx", "sy", "ex", "ey"])
        for t in self.tracks:
            ex, ey = ("", "") if t.end is None else (repr(t.end[0]), repr(t.end[1]))
            w.writerow([t.point_id, t.status.value, "" if t.loss_tick is None else t.loss_tick, repr(t.start[0]), repr(t.start[1]), ex, ey])
        w.writerow(["G", "N", "total", "percent"])
        w.writerow([repr(self.G), self.tracked_count, self.total_points, repr(self.percent_correct)])
        return buf.getvalue()


def mse_grade(tracks: Sequence[GridTrack]) -> tuple[float, float]:
    """Mean squared start-to-end displacement over tracked points, and percent tracked.

    G is nan when no point survived (percent is then 0).
    """
    if not tracks:
        raise ValueError("mse_grade needs at least one track")
    sq = []
    for t in tracks:
        if t.status is not TrackStatus.TRACKED:
            continue
        end = t.end if t.end is not None else t.current
        dx = end[0] - t.start[0]
        dy = end[1] - t.start[1]
        sq.append(dx * dx + dy * dy)
    if not sq:
        return math.nan, 0.0
    return math.fsum(sq) / len(sq), 100.0 * len(sq) / len(tracks)


# ---------------------------------------------------------------------------
# image pyramid


def to_gray(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb)
    return (rgb[..., 0] * GRAY_WEIGHTS[0] + rgb[..., 1] * GRAY_WEIGHTS[1] + rgb[..., 2] * GRAY_WEIGHTS[2]) / 255.0


_PYR_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_SCHARR_D = np.array([-1.0, 0.0, 1.0])
_SCHARR_S = np.array([3.0, 10.0, 3.0]) / 32.0


def pyr_down(img: np.ndarray) -> np.ndarray:
    blurred = ndimage.convolve1d(img, _PYR_KERNEL, axis=0, mode="mirror")
    blurred = ndimage.convolve1d(blurred, _PYR_KERNEL, axis=1, mode="mirror")
    return np.ascontiguousarray(blurred[::2, ::2])


def gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scharr derivatives in intensity per pixel."""
    gx = ndimage.convolve1d(ndimage.convolve1d(img, _SCHARR_S, axis=0, mode="nearest"), _SCHARR_D[::-1], axis=1, mode="nearest")
    gy = ndimage.convolve1d(ndimage.convolve1d(img, _SCHARR_S, axis=1, mode="nearest"), _SCHARR_D[::-1], axis=0, mode="nearest")
    # convolve1d flips the kernel; the reversed difference gives (I[x+1] - I[x-1]) weights
    return np.ascontiguousarray(gx), np.ascontiguousarray(gy)


@dataclass
class Pyramid:
    images: list[np.ndarray]
    grad_x: list[np.ndarray]
    grad_y: list[np.ndarray]

    @classmethod
    def build(cls, gray: np.ndarray, levels: int) -> "Pyramid":
        imgs = [np.ascontiguousarray(gray, dtype=np.float64)]
        for _ in range(levels - 1):
            imgs.append(pyr_down(imgs[-1]))
        gxs, gys = zip(*(gradients(i) for i in imgs))
        return cls(imgs, list(gxs), list(gys))


# ---------------------------------------------------------------------------
# Lucas-Kanade core


@numba.njit(inline="always")
def _bilinear(img, x, y):
    h, w = img.shape
    if x < 0.0:
        x = 0.0
    elif x > w - 1:
        x = w - 1.0
    if y < 0.0:
        y = 0.0
    elif y > h - 1:
        y = h - 1.0
    x0 = int(x)
    y0 = int(y)
    if x0 > w - 2:
        x0 = w - 2
    if y0 > h - 2:
        y0 = h - 2
    ax = x - x0
    ay = y - y0
    return (
        (1 - ax) * (1 - ay) * img[y0, x0]
        + ax * (1 - ay) * img[y0, x0 + 1]
        + (1 - ax) * ay * img[y0 + 1, x0]
        + ax * ay * img[y0 + 1, x0 + 1]
    )


@numba.njit(cache=True, nogil=True)
def _lk_level(I, Ix, Iy, J, pts, guess, active, radius, iterations, epsilon, out_flow, out_eig):
    """Refine ``guess`` for every active point on one pyramid level."""
    n = pts.shape[0]
    side = 2 * radius + 1
    npix = side * side
    wi = np.empty(npix)
    wx = np.empty(npix)
    wy = np.empty(npix)
    for i in range(n):
        if not active[i]:
            continue
        px = pts[i, 0]
        py = pts[i, 1]
        a = 0.0
        b = 0.0
        c = 0.0
        k = 0
        for dy in range(-radius, radius + 1):
            for dx in range(-radius, radius + 1):
                sx = px + dx
                sy = py + dy
                wi[k] = _bilinear(I, sx, sy)
                gx = _bilinear(Ix, sx, sy)
                gy = _bilinear(Iy, sx, sy)
                wx[k] = gx
                wy[k] = gy
                a += gx * gx
                b += gx * gy
                c += gy * gy
                k += 1
        half = 0.5 * (a + c)
        out_eig[i] = (half - math.sqrt(0.25 * (a - c) * (a - c) + b * b)) / npix
        det = a * c - b * b
        if det < 1e-12 * npix * npix:
            out_flow[i, 0] = guess[i, 0]
            out_flow[i, 1] = guess[i, 1]
            continue
        ux = 0.0
        uy = 0.0
        gxx = guess[i, 0]
        gyy = guess[i, 1]
        for _ in range(iterations):
            bx = 0.0
            by = 0.0
            k = 0
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    e = wi[k] - _bilinear(J, px + dx + gxx + ux, py + dy + gyy + uy)
                    bx += e * wx[k]
                    by += e * wy[k]
                    k += 1
            ddx = (c * bx - b * by) / det
            ddy = (a * by - b * bx) / det
            ux += ddx
            uy += ddy
            if ddx * ddx + ddy * ddy < epsilon * epsilon:
                break
        out_flow[i, 0] = gxx + ux
        out_flow[i, 1] = gyy + uy


def lk_track(prev: Pyramid, nxt: Pyramid, pts: np.ndarray, active: np.ndarray, params: LKParams) -> tuple[np.ndarray, np.ndarray]:
    """Coarse-to-fine displacement of ``pts`` from ``prev`` to ``nxt``.

    Returns (new points, min-eigenvalue of the finest-level normal matrix
    divided by window area, in ``EIG_SCALE`` units).
    """
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    guess = np.zeros_like(pts)
    flow = np.zeros_like(pts)
    eig = np.zeros(len(pts))
    radius = params.window // 2
    levels = min(params.levels, len(prev.images), len(nxt.images))
    for lvl in range(levels - 1, -1, -1):
        scale = 2.0**lvl
        _lk_level(
            prev.images[lvl], prev.grad_x[lvl], prev.grad_y[lvl], nxt.images[lvl],
            pts / scale, guess, active, radius, params.iterations, params.epsilon, flow, eig,
        )
        guess = flow * 2.0 if lvl > 0 else flow
    return pts + flow, eig * EIG_SCALE


def grid_points(width: int, height: int, spacing: int, margin: int) -> np.ndarray:
    if spacing < 4:
        raise ValueError("grid spacing must be >= 4 px")
    xs = np.arange(margin, width - margin, spacing, dtype=np.float64)
    ys = np.arange(margin, height - margin, spacing, dtype=np.float64)
    if len(xs) == 0 or len(ys) == 0:
        raise ValueError("degenerate grid: no interior points")
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


class GridTracker:
    """Incremental grid tracker; feed frames in order, then call ``report``."""

    def __init__(self, first_rgb: np.ndarray, spacing: int = 16, margin: int = 24, params: LKParams = LKParams(), tick: int = 0):
        self.params = params
        self.height, self.width = first_rgb.shape[:2]
        self.start = grid_points(self.width, self.height, spacing, margin)
        self.pos = self.start.copy()
        self.active = np.ones(len(self.start), dtype=np.bool_)
        self.loss_tick: list[int | None] = [None] * len(self.start)
        self.loss_reason: list[LossReason | None] = [None] * len(self.start)
        self._pyr = Pyramid.build(to_gray(first_rgb), params.levels)
        self.frames = 1
        self.last_tick = tick

    def update(self, rgb: np.ndarray, tick: int | None = None) -> None:
        if rgb.shape[:2] != (self.height, self.width):
            raise ValueError(f"frame size {rgb.shape[:2]} != {(self.height, self.width)}")
        tick = self.last_tick + 1 if tick is None else tick
        nxt = Pyramid.build(to_gray(rgb), self.params.levels)
        if self.active.any():
            fwd, eig = lk_track(self._pyr, nxt, self.pos, self.active, self.params)
            back, _ = lk_track(nxt, self._pyr, fwd, self.active, self.params)
            r = self.params.window // 2
            fb = np.hypot(back[:, 0] - self.pos[:, 0], back[:, 1] - self.pos[:, 1])
            finite = np.isfinite(fwd).all(axis=1) & np.isfinite(fb)
            out = (
                (fwd[:, 0] - r < 0)
                | (fwd[:, 0] + r > self.width - 1)
                | (fwd[:, 1] - r < 0)
                | (fwd[:, 1] + r > self.height - 1)
                | ~finite
            )
            cond = eig < self.params.min_eig
            bad_fb = ~(fb <= self.params.fb_thresh)
            for i in np.flatnonzero(self.active):
                reason = None
                if out[i]:
                    reason = LossReason.BOUNDS
                elif cond[i]:
                    reason = LossReason.CONDITIONING
                elif bad_fb[i]:
                    reason = LossReason.FORWARD_BACKWARD
                if reason is not None:
                    self.active[i] = False
                    self.loss_tick[i] = tick
                    self.loss_reason[i] = reason
            self.pos = np.where(self.active[:, None], fwd, self.pos)
        self._pyr = nxt
        self.frames += 1
        self.last_tick = tick

    def report(self) -> TrackReport:
        tracks = []
        for i, (s, p) in enumerate(zip(self.start, self.pos)):
            alive = bool(self.active[i])
            tracks.append(
                GridTrack(
                    point_id=i,
                    start=(float(s[0]), float(s[1])),
                    current=(float(p[0]), float(p[1])),
                    end=(float(p[0]), float(p[1])) if alive else None,
                    status=TrackStatus.TRACKED if alive else TrackStatus.LOST,
                    loss_tick=self.loss_tick[i],
                    loss_reason=self.loss_reason[i],
                )
            )
        g, pct = mse_grade(tracks)
        return TrackReport(g, int(self.active.sum()), len(tracks), pct, tracks)


def track_grid(frames: Iterable, spacing: int = 16, margin: int = 24, params: LKParams = LKParams()) -> TrackReport:
    """Track a regular grid through an ordered RGB sequence (arrays or Frames)."""
    it = iter(frames)
    tracker = None
    count = 0
    for f in it:
        rgb = getattr(f, "rgb", f)
        tick = getattr(f, "tick", count)
        if tracker is None:
            tracker = GridTracker(rgb, spacing, margin, params, tick=tick)
        else:
            tracker.update(rgb, tick)
        count += 1
    if count < 2:
        raise ValueError("track_grid needs at least two frames")
    return tracker.report()


# ---------------------------------------------------------------------------
# HSV blob tracking


@dataclass(frozen=True)
class HsvThreshold:
    hue_lo: float  # degrees; hue_lo > hue_hi wraps through 0
    hue_hi: float
    sat_min: float
    val_min: float
    min_blob_pixels: int = 4

    def __post_init__(self):
        if not (0 <= self.hue_lo < 360 and 0 <= self.hue_hi < 360):
            raise ValueError("hue bounds must lie in [0, 360)")
        if not (0 <= self.sat_min <= 1 and 0 <= self.val_min <= 1):
            raise ValueError("saturation/value minima must lie in [0, 1]")
        if self.min_blob_pixels < 1:
            raise ValueError("min_blob_pixels must be >= 1")

    def hue_mask(self, hue: np.ndarray) -> np.ndarray:
        if self.hue_lo <= self.hue_hi:
            return (hue >= self.hue_lo) & (hue <= self.hue_hi)
        return (hue >= self.hue_lo) | (hue <= self.hue_hi)


def rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hexcone transform: H in [0, 360), S and V in [0, 1]."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    r, g, b = c[..., 0], c[..., 1], c[..., 2]
    mx = c.max(axis=-1)
    mn = c.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta == 0, 1.0, delta)
    h = np.where(
        mx == r,
        np.mod((g - b) / safe, 6.0),
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(delta == 0, 0.0, 60.0 * h) % 360.0
    s = np.where(mx == 0, 0.0, delta / np.where(mx == 0, 1.0, mx))
    return h, s, mx


_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@numba.njit(cache=True, nogil=True)
def _hsv_mask(rgb, hue_lo, hue_hi, sat_min, val_min, out):
    H, W = out.shape
    wrap = hue_lo > hue_hi
    for y in range(H):
        for x in range(W):
            r = rgb[y, x, 0] / 255.0
            g = rgb[y, x, 1] / 255.0
            b = rgb[y, x, 2] / 255.0
            mx = max(r, max(g, b))
            mn = min(r, min(g, b))
            delta = mx - mn
            sat = delta / mx if mx > 0.0 else 0.0
            if mx < val_min or sat < sat_min:
                out[y, x] = False
                continue
            if delta == 0.0:
                h = 0.0
            elif mx == r:
                h = 60.0 * (((g - b) / delta) % 6.0)
            elif mx == g:
                h = 60.0 * ((b - r) / delta + 2.0)
            else:
                h = 60.0 * ((r - g) / delta + 4.0)
            h = h % 360.0
            if wrap:
                out[y, x] = h >= hue_lo or h <= hue_hi
            else:
                out[y, x] = hue_lo <= h <= hue_hi


def hsv_mask(rgb: np.ndarray, threshold: HsvThreshold) -> np.ndarray:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    out = np.empty(rgb.shape[:2], dtype=np.bool_)
    _hsv_mask(rgb, float(threshold.hue_lo), float(threshold.hue_hi), float(threshold.sat_min), float(threshold.val_min), out)
    return out


def hsv_track(frame, threshold: HsvThreshold) -> tuple[float, float] | None:
    """Centroid (x, y) of the largest 4-connected in-band blob, or None on failure."""
    rgb = getattr(frame, "rgb", frame)
    mask = hsv_mask(rgb, threshold)
    if not mask.any():
        return None
    labels, n = ndimage.label(mask, structure=_FOUR)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    best = int(np.argmax(sizes))
    if sizes[best] < threshold.min_blob_pixels:
        return None
    ys, xs = np.nonzero(labels == best)
    return float(xs.mean()), float(ys.mean())
