"""Evaluation metrics: flow EPE, PSNR, SSIM, occlusion IoU, sample diversity.

All functions are pure and operate on numpy arrays; shapes follow the
dataset conventions (flows (T, 2, H, W), frames (T, 3, H, W) in [0, 1]).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PSNR_CAP = 99.0  # sentinel for identical frames
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def epe(flow_pred: np.ndarray, flow_gt: np.ndarray, region_mask: np.ndarray | None = None) -> float:
    """Mean endpoint error: Euclidean norm of the per-pixel flow difference.

    flow_*: (T, 2, H, W) or (2, H, W). region_mask, if given, is an (H, W)
    mask restricting the mean to its nonzero pixels (broadcast over steps).
    """
    flow_pred, flow_gt = np.asarray(flow_pred), np.asarray(flow_gt)
    if flow_pred.shape != flow_gt.shape:
        raise ValueError(f"flow shapes differ: {flow_pred.shape} vs {flow_gt.shape}")
    axis = flow_pred.ndim - 3
    err = np.sqrt(((flow_pred - flow_gt) ** 2).sum(axis=axis))
    if region_mask is None:
        return float(err.mean())
    m = np.asarray(region_mask, dtype=np.float64)
    if m.shape != err.shape[-2:]:
        raise ValueError(f"region mask shape {m.shape} != frame size {err.shape[-2:]}")
    if m.sum() == 0:
        raise ValueError("region mask is empty")
    weights = np.broadcast_to(m, err.shape)
    return float((err * weights).sum() / weights.sum())


def psnr(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-frame PSNR in dB for [0, 1] frames, (T, 3, H, W); capped at 99."""
    pred, target = np.asarray(pred, np.float64), np.asarray(target, np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    mse = ((pred - target) ** 2).reshape(pred.shape[0], -1).mean(axis=1)
    out = np.full(mse.shape, PSNR_CAP)
    nz = mse > 0
    out[nz] = np.minimum(10.0 * np.log10(1.0 / mse[nz]), PSNR_CAP)
    return out


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_single(x: np.ndarray, y: np.ndarray, kernel: np.ndarray) -> float:
    # valid-window statistics only; x, y are (H, W)
    win = kernel.shape[0]
    from numpy.lib.stride_tricks import sliding_window_view

    wx = sliding_window_view(x, (win, win))
    wy = sliding_window_view(y, (win, win))
    mu_x = np.tensordot(wx, kernel, axes=([2, 3], [0, 1]))
    mu_y = np.tensordot(wy, kernel, axes=([2, 3], [0, 1]))
    ex2 = np.tensordot(wx * wx, kernel, axes=([2, 3], [0, 1]))
    ey2 = np.tensordot(wy * wy, kernel, axes=([2, 3], [0, 1]))
    exy = np.tensordot(wx * wy, kernel, axes=([2, 3], [0, 1]))
    sx, sy, sxy = ex2 - mu_x**2, ey2 - mu_y**2, exy - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sx + sy + SSIM_C2)
    return float((num / den).mean())


def ssim(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-frame SSIM with an 11x11 Gaussian window (sigma 1.5), L = 1.

    pred/target: (T, 3, H, W) in [0, 1]; channels are averaged. Statistics
    use full (valid) windows only.
    """
    pred, target = np.asarray(pred, np.float64), np.asarray(target, np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if min(pred.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"frames smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    out = np.empty(pred.shape[0])
    for t in range(pred.shape[0]):
        out[t] = np.mean([_ssim_single(pred[t, c], target[t, c], kernel) for c in range(pred.shape[1])])
    return out


def occlusion_iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """IoU of the occluded regions (mask < threshold); empty union gives 1."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p, g = pred < threshold, gt < threshold
    union = (p | g).sum()
    if union == 0:
        return 1.0
    return float((p & g).sum() / union)


def diversity(flow_samples: list[np.ndarray]) -> float:
    """Mean pairwise absolute flow difference over unordered sample pairs."""
    if len(flow_samples) < 2:
        raise ValueError("diversity needs at least 2 samples")
    total, n = 0.0, 0
    for i in range(len(flow_samples)):
        for j in range(i + 1, len(flow_samples)):
            total += float(np.abs(flow_samples[i] - flow_samples[j]).mean())
            n += 1
    return total / n


@dataclass
class MetricsReport:
    """Per-timestep and mean metrics for one model over one dataset."""

    epe_bwd: list[float] = field(default_factory=list)  # backward flow, full frame
    epe_fwd_fg: list[float] = field(default_factory=list)  # forward flow, FG region
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    iou: list[float] = field(default_factory=list)
    diversity: float = 0.0
    n_samples: int = 0
    z_mode: str = "posterior"

    @property
    def mean_epe_bwd(self) -> float:
        return float(np.mean(self.epe_bwd))

    @property
    def mean_epe_fwd_fg(self) -> float:
        return float(np.mean(self.epe_fwd_fg))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    def to_dict(self) -> dict:
        return {
            "z_mode": self.z_mode,
            "n_samples": self.n_samples,
            "per_timestep": {
                "epe_bwd": self.epe_bwd,
                "epe_fwd_fg": self.epe_fwd_fg,
                "psnr": self.psnr,
                "ssim": self.ssim,
                "iou": self.iou,
            },
            "mean": {
                "epe_bwd": self.mean_epe_bwd,
                "epe_fwd_fg": self.mean_epe_fwd_fg,
                "psnr": self.mean_psnr,
                "ssim": float(np.mean(self.ssim)),
                "iou": float(np.mean(self.iou)),
            },
            "diversity": self.diversity,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
