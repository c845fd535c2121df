"""Clip handling, synthetic degradations, loss and distortion metrics.

Video data travels as float arrays [t, c, h, w] with values in [0, 1]
(sigma values are quoted on the 8-bit scale and divided by 255). Only the
loss runs on the tape; sampling, degradation and metrics are plain numpy.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ops
from .tensor import ShapeError

PSNR_CAP = 99.0  # reported instead of +inf when the inputs are identical

BT601_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class DegradationSpec:
    """Synthetic degradation description.

    gaussian_noise: one sigma drawn per video from [sigma_lo, sigma_hi]
    (8-bit scale), then i.i.d. zero-mean noise of std sigma/255.
    average_blur: frame t becomes the mean of the window centred at t,
    intersected with the valid frame range at clip boundaries.
    """

    kind: str = "gaussian_noise"
    sigma_lo: float = 30.0
    sigma_hi: float = 50.0
    window: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian_noise", "average_blur"):
            raise ShapeError(f"unknown degradation {self.kind!r}")
        if self.kind == "gaussian_noise":
            if not 0.0 <= self.sigma_lo <= self.sigma_hi <= 255.0:
                raise ShapeError(f"sigma range [{self.sigma_lo}, {self.sigma_hi}] "
                                 "must be ordered and within [0, 255]")
        if self.kind == "average_blur":
            if self.window < 3 or self.window % 2 == 0:
                raise ShapeError(f"blur window must be odd and >= 3, got {self.window}")


def check_video(video):
    video = np.asarray(video)
    if video.ndim != 4 or video.shape[0] < 1:
        raise ShapeError(f"expected a non-empty [t,c,h,w] video, got {video.shape}")
    return video


def sample_clips(video, gamma):
    """Consecutive non-overlapping gamma-frame clips; a short trailing clip
    keeps the remainder, so every frame is covered exactly once."""
    video = check_video(video)
    if gamma < 1:
        raise ShapeError(f"gamma must be >= 1, got {gamma}")
    return [video[i:i + gamma] for i in range(0, video.shape[0], gamma)]


def crop_augment(clip, size, seed, hflip=True, vflip=True, rot90=True):
    """Random crop plus flip/rotation, one choice shared by all frames.

    Deterministic per seed. ``size`` may be an int or (ch, cw).
    """
    clip = check_video(clip)
    ch, cw = (size, size) if np.isscalar(size) else size
    t, c, h, w = clip.shape
    if ch > h or cw > w:
        raise ShapeError(f"crop {(ch, cw)} larger than frame {(h, w)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    out = clip[:, :, oy:oy + ch, ox:ox + cw]
    if hflip and rng.integers(0, 2):
        out = out[:, :, :, ::-1]
    if vflip and rng.integers(0, 2):
        out = out[:, :, ::-1, :]
    if rot90:
        k = int(rng.integers(0, 4))
        if k:
            out = np.rot90(out, k, axes=(-2, -1))
    return np.ascontiguousarray(out)


def synthetic_clip(seed, frames=5, size=32, channels=3):
    """Structured moving-scene clip in [0,1]: smooth sinusoid background
    drifting at constant velocity plus moving solid rectangles. Deterministic
    per seed; used by the self-test and the desk-scale overfit experiment."""
    rng = np.random.Generator(np.random.PCG64(seed))
    h = w = int(size)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    freq = rng.uniform(0.05, 0.2, size=(channels, 2))
    phase = rng.uniform(0, 2 * np.pi, size=channels)
    vel = rng.uniform(-2.0, 2.0, size=2)
    clip = np.empty((frames, channels, h, w))
    boxes = []
    for _ in range(rng.integers(2, 5)):
        boxes.append((rng.uniform(0, h), rng.uniform(0, w),
                      rng.integers(4, max(5, h // 3)),
                      rng.uniform(-2.0, 2.0, size=2),
                      rng.uniform(0.1, 0.9, size=channels)))
    for t in range(frames):
        oy, ox = vel * t
        for c in range(channels):
            wave = np.sin(freq[c, 0] * (yy + oy) * 2 * np.pi
                          + freq[c, 1] * (xx + ox) * 2 * np.pi + phase[c])
            clip[t, c] = 0.5 + 0.35 * wave
        for (by, bx, side, bvel, color) in boxes:
            y0 = int(round(by + bvel[0] * t)) % h
            x0 = int(round(bx + bvel[1] * t)) % w
            ys = (np.arange(y0, y0 + side) % h)
            xs = (np.arange(x0, x0 + side) % w)
            region = np.ix_(range(channels), ys, xs)
            clip[t][region] = color[:, None, None]
    return np.clip(clip, 0.0, 1.0)


def draw_sigma(spec):
    """The per-video noise level implied by the spec's seed (8-bit scale)."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    return float(rng.uniform(spec.sigma_lo, spec.sigma_hi))


def degrade(clip, spec, noise_seed=None):
    """Apply a degradation; deterministic for a (clip, spec) pair.

    ``noise_seed`` optionally decouples the noise realization from the
    sigma draw (the training loop varies noise while keeping one sigma per
    video).
    """
    clip = check_video(clip).astype(np.float64)
    if spec.kind == "gaussian_noise":
        rng = np.random.Generator(np.random.PCG64(spec.seed))
        sigma = float(rng.uniform(spec.sigma_lo, spec.sigma_hi))
        if noise_seed is not None:
            rng = np.random.Generator(np.random.PCG64(noise_seed))
        noisy = clip + rng.normal(0.0, sigma / 255.0, size=clip.shape)
        return np.clip(noisy, 0.0, 1.0)
    # average_blur
    r = spec.window // 2
    t = clip.shape[0]
    out = np.empty_like(clip)
    for i in range(t):
        lo, hi = max(0, i - r), min(t, i + r + 1)
        out[i] = clip[lo:hi].mean(axis=0)
    return np.clip(out, 0.0, 1.0)


def l1_loss(pred, gt):
    """Mean absolute error over all elements; differentiable in ``pred``."""
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return ops.tmean(ops.absolute(ops.sub(pred, gt)))


def rgb_to_y(frames):
    """BT.601 luma from a [..., 3, h, w] array."""
    frames = np.asarray(frames)
    if frames.shape[-3] != 3:
        raise ShapeError(f"Y conversion needs 3 channels, got {frames.shape}")
    return np.tensordot(BT601_LUMA, frames, axes=([0], [-3]))


def psnr(a, b, mode="rgb"):
    """10*log10(1 / MSE) for unit-range inputs; PSNR_CAP when identical."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if mode == "y_channel":
        a, b = rgb_to_y(a), rgb_to_y(b)
    elif mode != "rgb":
        raise ShapeError(f"unknown color mode {mode!r}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_kernel(window=11, sigma=1.5):
    coords = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean Gaussian-windowed SSIM over frames and channels (valid windows).

    Inputs are [t, c, h, w] (or [c, h, w]) in [0, 1].
    """
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ShapeError(f"frame {a.shape[-2:]} smaller than window {window}")
    kernel = gaussian_kernel(window, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2

    def filt(x):  # weighted local mean over valid windows
        win = sliding_window_view(x, (window, window), axis=(-2, -1))
        return np.einsum("...uv,uv->...", win, kernel)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    """Distortion metrics for one (restored, reference) clip pair."""

    psnr_frames: list
    ssim_frames: list
    color_mode: str = "rgb"

    @property
    def psnr_mean(self):
        return float(np.mean(self.psnr_frames))

    @property
    def ssim_mean(self):
        return float(np.mean(self.ssim_frames))

    def lines(self):
        out = [f"color_mode = {self.color_mode}",
               f"psnr_mean = {self.psnr_mean:.4f}",
               f"ssim_mean = {self.ssim_mean:.6f}"]
        for i, (p, s) in enumerate(zip(self.psnr_frames, self.ssim_frames)):
            out.append(f"frame_{i:04d} = psnr {p:.4f} ssim {s:.6f}")
        return out


def measure(pred, gt, mode="rgb"):
    pred, gt = check_video(pred), check_video(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return MetricsReport(
        psnr_frames=[psnr(pred[i], gt[i], mode) for i in range(pred.shape[0])],
        ssim_frames=[ssim(pred[i], gt[i]) for i in range(pred.shape[0])],
        color_mode=mode,
    )
