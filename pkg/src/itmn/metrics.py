"""HDR quality metrics: multi-exposure PSNR, SSIM on luma, log-luminance PSNR.

log_psnr is a labeled stand-in for perceptual HDR metrics that are out of
scope here; it is never reported under any other name. Identical images are
capped at 99 dB instead of infinity.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import luminance
from .hdrio import read_image
from .tensor import ShapeError

PSNR_CAP_DB = 99.0
DEFAULT_EXPOSURES = (-2, -1, 0, 1, 2)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _check_pair(pred: np.ndarray, ref: np.ndarray, who: str, unit_range: bool = True):
    if pred.shape != ref.shape:
        raise ShapeError(f"{who}: shapes {pred.shape} and {ref.shape} differ")
    if unit_range:
        for name, a in (("pred", pred), ("ref", ref)):
            if np.any(a < -1e-6) or np.any(a > 1 + 1e-6):
                raise ValueError(f"{who}: {name} values must lie in [0,1]")


def mpsnr(pred: np.ndarray, ref: np.ndarray,
          exposures=DEFAULT_EXPOSURES, gamma: float = 2.2) -> float:
    """PSNR accumulated over exposure-shifted, gamma-encoded 8-bit renderings.

    Each stop c renders clamp(255 * (2^c * x)^(1/gamma), 0, 255); the squared
    error is averaged over all stops and pixels.
    """
    if not exposures:
        raise ValueError("mpsnr needs at least one exposure stop")
    _check_pair(pred, ref, "mpsnr")
    p = np.clip(pred.astype(np.float64), 0.0, 1.0)
    r = np.clip(ref.astype(np.float64), 0.0, 1.0)
    inv_g = 1.0 / gamma
    total = 0.0
    for c in exposures:
        tp = np.clip(255.0 * (2.0 ** c * p) ** inv_g, 0.0, 255.0)
        tr = np.clip(255.0 * (2.0 ** c * r) ** inv_g, 0.0, 255.0)
        total += float(np.mean((tp - tr) ** 2))
    mse_total = total / len(exposures)
    if mse_total == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(255.0 ** 2 / mse_total))


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    return np.tensordot(win, kernel, axes=([2, 3], [0, 1]))


def ssim(pred: np.ndarray, ref: np.ndarray, per_channel: bool = False) -> float:
    """Windowed SSIM (11x11 Gaussian, sigma 1.5) on BT.2020 luma.

    per_channel=True averages the score over R, G, B instead.
    """
    _check_pair(pred, ref, "ssim")
    if pred.ndim == 3 and not per_channel:
        xs = [luminance(pred)]
        ys = [luminance(ref)]
    elif pred.ndim == 3:
        xs = [pred[..., i] for i in range(pred.shape[2])]
        ys = [ref[..., i] for i in range(ref.shape[2])]
    else:
        xs, ys = [pred], [ref]
    h, w = xs[0].shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, "
                         f"got {h}x{w}")
    kernel = _gaussian_kernel()
    c1 = (0.01 * 1.0) ** 2
    c2 = (0.03 * 1.0) ** 2
    scores = []
    for x, y in zip(xs, ys):
        x = x.astype(np.float64)
        y = y.astype(np.float64)
        mx = _windowed_mean(x, kernel)
        my = _windowed_mean(y, kernel)
        mxx = _windowed_mean(x * x, kernel)
        myy = _windowed_mean(y * y, kernel)
        mxy = _windowed_mean(x * y, kernel)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def log_psnr(pred: np.ndarray, ref: np.ndarray, floor: float = 1e-4) -> float:
    """PSNR on log2 luminance-coded images with a positive floor.

    The peak is log2(1/floor); common exposure scaling of both images
    cancels (above the floor). A monotone stand-in for perceptual metrics.
    """
    if floor <= 0:
        raise ValueError(f"floor must be positive, got {floor}")
    _check_pair(pred, ref, "log_psnr", unit_range=False)
    if np.any(pred < 0) or np.any(ref < 0):
        raise ValueError("log_psnr inputs must be nonnegative")
    lp = np.log2(np.maximum(pred.astype(np.float64), floor))
    lr = np.log2(np.maximum(ref.astype(np.float64), floor))
    mse = float(np.mean((lp - lr) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    peak = np.log2(1.0 / floor)
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak ** 2 / mse))


# --------------------------------------------------------------------------
# Directory evaluation
# --------------------------------------------------------------------------

@dataclass
class MetricsConfig:
    exposures: tuple = DEFAULT_EXPOSURES
    gamma: float = 2.2
    log_floor: float = 1e-4
    ssim_per_channel: bool = False

    def echo(self) -> dict:
        return {"exposures": list(self.exposures), "gamma": self.gamma,
                "log_floor": self.log_floor,
                "ssim_per_channel": self.ssim_per_channel}


@dataclass
class MetricRow:
    id: str
    mpsnr_db: float
    ssim: float
    log_psnr_db: float


@dataclass
class MetricsReport:
    rows: list[MetricRow]
    unmatched: list[str]
    config: MetricsConfig = field(default_factory=MetricsConfig)

    def aggregates(self) -> dict:
        return {
            "count": len(self.rows),
            "mpsnr_db": float(np.mean([r.mpsnr_db for r in self.rows])),
            "ssim": float(np.mean([r.ssim for r in self.rows])),
            "log_psnr_db": float(np.mean([r.log_psnr_db for r in self.rows])),
        }

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "mpsnr_db", "ssim", "log_psnr_db"])
            for r in self.rows:
                w.writerow([r.id, f"{r.mpsnr_db:.6f}", f"{r.ssim:.6f}",
                            f"{r.log_psnr_db:.6f}"])

    def to_json(self, path):
        blob = {"aggregates": self.aggregates(), "unmatched": self.unmatched,
                "config": self.config.echo()}
        with open(path, "w") as f:
            json.dump(blob, f, indent=2)
            f.write("\n")


IMAGE_EXTENSIONS = (".pfm", ".hdr", ".pnm", ".ppm")


def evaluate_dirs(pred_dir, ref_dir, config: MetricsConfig | None = None) -> MetricsReport:
    """One row per filename present in both directories; unmatched files are
    reported, never silently dropped. Zero matches is an error."""
    config = config or MetricsConfig()
    pred_dir, ref_dir = Path(pred_dir), Path(ref_dir)

    def listing(d: Path) -> dict[str, Path]:
        return {p.name: p for p in sorted(d.iterdir())
                if p.suffix.lower() in IMAGE_EXTENSIONS}

    preds = listing(pred_dir)
    refs = listing(ref_dir)
    matched = sorted(set(preds) & set(refs))
    unmatched = sorted((set(preds) ^ set(refs)))
    if not matched:
        raise ValueError(f"no matching image filenames between {pred_dir} and {ref_dir}")

    rows = []
    for name in matched:
        p = read_image(preds[name]).pixels
        r = read_image(refs[name]).pixels
        rows.append(MetricRow(
            id=name,
            mpsnr_db=mpsnr(p, r, config.exposures, config.gamma),
            ssim=ssim(p, r, config.ssim_per_channel),
            log_psnr_db=log_psnr(p, r, config.log_floor)))
    return MetricsReport(rows, unmatched, config)
