"""Plots: loss curves, per-timestep metrics, frame strips, flow color wheel."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import hsv_to_rgb

LOSS_KEYS = ("l_r", "l_fs", "l_fc", "l_l1_pixel", "l_l1_perceptual", "l_occ_penalty", "l_kl", "total")


def flow_to_color(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Standard optical-flow color wheel: hue = direction, saturation = speed.

    flow: (2, H, W) in pixels. Zero flow renders white. Returns (H, W, 3)
    float RGB in [0, 1].
    """
    u, v = np.asarray(flow, np.float64)
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = max(float(mag.max()), 1e-8)
    hue = (np.arctan2(-v, -u) / np.pi + 1.0) / 2.0
    sat = np.clip(mag / max_mag, 0.0, 1.0)
    hsv = np.stack([hue, sat, np.ones_like(sat)], axis=-1)
    return hsv_to_rgb(hsv)


def read_loss_log(log_path: str | Path) -> list[dict]:
    records = [json.loads(line) for line in Path(log_path).read_text().splitlines() if line.strip()]
    if not records:
        raise ValueError(f"{log_path}: empty loss log")
    return records


def plot_loss_curves(log_path: str | Path, out_path: str | Path) -> Path:
    records = read_loss_log(log_path)
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(8, 5))
    for key in LOSS_KEYS:
        vals = [r[key] for r in records]
        ax.plot(steps, vals, label=key, linewidth=1.5 if key == "total" else 0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8, ncol=2)
    ax.set_title("training loss components")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_timestep_metrics(report: dict, out_path: str | Path) -> Path:
    """Per-timestep EPE and PSNR panels from a MetricsReport dict."""
    per_t = report.get("per_timestep", {})
    if not per_t or not per_t.get("psnr"):
        raise ValueError("metrics report has no per-timestep data")
    ts = np.arange(1, len(per_t["psnr"]) + 1)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].plot(ts, per_t["epe_bwd"], "o-", label="backward EPE")
    if any(per_t.get("epe_fwd_fg", [])):
        axes[0].plot(ts, per_t["epe_fwd_fg"], "s--", label="forward EPE (FG)")
    axes[0].set_xlabel("timestep")
    axes[0].set_ylabel("EPE (px)")
    axes[0].legend()
    axes[1].plot(ts, per_t["psnr"], "o-", color="tab:green")
    axes[1].set_xlabel("timestep")
    axes[1].set_ylabel("PSNR (dB)")
    fig.suptitle(f"per-timestep metrics ({report.get('z_mode', '?')} mode)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_frame_strip(
    gt_frames: np.ndarray,
    pred_frames: np.ndarray,
    out_path: str | Path,
    flows: np.ndarray | None = None,
) -> Path:
    """Panel with one column per timestep: GT row, prediction row, flow row."""
    gt_frames, pred_frames = np.asarray(gt_frames), np.asarray(pred_frames)
    if gt_frames.ndim != 4 or gt_frames.shape[0] == 0:
        raise ValueError("gt_frames must be a nonempty (T, 3, H, W) stack")
    t = gt_frames.shape[0]
    rows = 2 + (flows is not None)
    fig, axes = plt.subplots(rows, t, figsize=(1.6 * t, 1.7 * rows), squeeze=False)
    max_mag = None if flows is None else max(float(np.hypot(*f).max()) for f in flows) or 1.0
    for k in range(t):
        axes[0][k].imshow(gt_frames[k].transpose(1, 2, 0))
        axes[1][k].imshow(np.clip(pred_frames[k].transpose(1, 2, 0), 0, 1))
        if flows is not None:
            axes[2][k].imshow(flow_to_color(flows[k], max_mag))
        for r in range(rows):
            axes[r][k].set_xticks([])
            axes[r][k].set_yticks([])
        axes[0][k].set_title(f"t={k + 1}", fontsize=8)
    axes[0][0].set_ylabel("ground truth", fontsize=8)
    axes[1][0].set_ylabel("predicted", fontsize=8)
    if flows is not None:
        axes[2][0].set_ylabel("flow", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def make_plots(
    log_path: str | Path | None,
    report: dict | None,
    out_dir: str | Path,
    strip: dict | None = None,
) -> list[Path]:
    """Emit the standard plot set into ``out_dir``; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if log_path is not None:
        written.append(plot_loss_curves(log_path, out / "loss_curves.png"))
    if report is not None:
        written.append(plot_timestep_metrics(report, out / "timestep_metrics.png"))
    if strip is not None:
        written.append(
            plot_frame_strip(strip["gt"], strip["pred"], out / "frame_strip.png", strip.get("flow"))
        )
    if not written:
        raise ValueError("nothing to plot: no loss log, report or frames given")
    return written
