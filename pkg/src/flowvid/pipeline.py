"""End-to-end orchestration: I2I stage, training, inference, ablations.

Training optimizes the flow cVAE and the refiner jointly on the composite
objective (masked bidirectional reconstruction + smoothness + consistency +
occlusion penalty + pixel/perceptual reconstruction of refined frames + KL).
All randomness flows through one torch.Generator whose state is checkpointed,
so an interrupted run resumes bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch

from . import checkpoint as ckpt_io
from . import losses
from .config import RunConfig
from .data import FrameSequence, LabelMap, Sample, load_dataset, one_hot
from .flownet import FlowModel, FramesPrediction
from .metrics import MetricsReport, diversity, epe, occlusion_iou, psnr, ssim
from .refine import Refiner, compose_sequence

PERCEPTUAL_SEED = 0  # the default extractor is fixed across all runs


class I2IStage(Protocol):
    """Label-map to starting-frame translation stage (swappable)."""

    def translate(self, label: LabelMap) -> np.ndarray:
        """Return a (3, H, W) float32 frame in [0, 1]."""
        ...


class PaletteColorizer:
    """Trivial I2I baseline: paint every class with a fixed palette color."""

    def __init__(self, palette):
        self.palette = {int(k): tuple(float(x) for x in v) for k, v in dict(palette).items()}

    def translate(self, label: LabelMap) -> np.ndarray:
        missing = sorted(set(np.unique(label.classes)) - set(self.palette))
        if missing:
            raise ValueError(f"palette has no entry for classes {missing}")
        table = np.zeros((label.num_classes, 3), dtype=np.float32)
        for k, color in self.palette.items():
            if k < label.num_classes:
                table[k] = color
        return table[label.classes].transpose(2, 0, 1).copy()


def colorize_baseline(label: LabelMap, palette) -> np.ndarray:
    return PaletteColorizer(palette).translate(label)


class Seg2VidModules(torch.nn.Module):
    """Container for the jointly trained flow model and refiner."""

    def __init__(self, config: RunConfig):
        super().__init__()
        self.flow = FlowModel(config)
        self.refiner = Refiner(config.base_channels)


def build_modules(config: RunConfig) -> Seg2VidModules:
    """Deterministic construction: parameter init depends only on the seed."""
    torch.manual_seed(config.seed)
    return Seg2VidModules(config).to(config.device)


@dataclass
class LoadedDataset:
    """Dataset tensors ready for training."""

    frames: torch.Tensor  # (N, T+1, 3, H, W)
    heatmaps: torch.Tensor | None  # (N, C, H, W)
    samples: list[Sample]


def prepare_dataset(dataset_dir: str | Path, config: RunConfig) -> LoadedDataset:
    samples = load_dataset(dataset_dir)
    if not samples:
        raise ValueError(f"{dataset_dir}: empty dataset")
    t, h, w = config.t, config.height, config.width
    first = samples[0].frames.frames
    if first.shape != (t + 1, 3, h, w):
        raise ValueError(f"dataset frames {first.shape} do not match config ({t + 1}, 3, {h}, {w})")
    frames = torch.from_numpy(np.stack([s.frames.frames for s in samples]))
    heat = None
    if config.semantic_mode != "none":
        heat = torch.from_numpy(np.stack([one_hot(s.label) for s in samples]))
    return LoadedDataset(frames.to(config.device), None if heat is None else heat.to(config.device), samples)


def _step_losses(modules, batch_frames, batch_heat, config, extractor, generator):
    """One forward pass: returns the LossBreakdown (total carries grad)."""
    i0 = batch_frames[:, 0]
    video = batch_frames[:, 1:]
    pred = modules.flow.predict(i0, batch_heat, batch_frames, mode="posterior", generator=generator)
    l_kl = losses.kl_loss(pred.mu, pred.logvar)
    if isinstance(pred, FramesPrediction):
        l_pix, l_per = losses.refined_recon_loss(pred.frames, video, extractor)
        return losses.total_loss(0.0, 0.0, 0.0, l_pix, l_per, 0.0, l_kl, config), pred
    l_r = losses.recon_loss(pred.flow_f, pred.flow_b, pred.occ_f, pred.occ_b, video, i0)
    l_fs = losses.smooth_loss(pred.flow_f, pred.flow_b)
    l_fc = losses.consistency_loss(pred.flow_f, pred.flow_b, pred.occ_f, pred.occ_b)
    l_occ = losses.occlusion_penalty(pred.occ_f, pred.occ_b)
    composed = compose_sequence(i0, pred, modules.refiner)
    l_pix, l_per = losses.refined_recon_loss(composed[:, 1:], video, extractor)
    return losses.total_loss(l_r, l_fs, l_fc, l_pix, l_per, l_occ, l_kl, config), pred


def _log_record(step: int, breakdown: losses.LossBreakdown, config: RunConfig) -> dict:
    d = breakdown.to_dict()
    # recompute the total from the logged (float) components so the breakdown
    # identity holds exactly in the log
    d["total"] = (
        config.lambda_r * d["l_r"]
        + config.lambda_fs * d["l_fs"]
        + config.lambda_fc * d["l_fc"]
        + config.lambda_l1 * (d["l_l1_pixel"] + d["l_l1_perceptual"])
        + config.lambda_p * d["l_occ_penalty"]
        + config.beta * d["l_kl"]
    )
    return {"step": step, "beta": config.beta, **d}


def _effective_config(config: RunConfig, step: int) -> RunConfig:
    """Apply the KL warm-up: beta stays 0 for kl_warmup_steps so the motion
    code becomes load-bearing before any KL pressure (adaptive optimizers
    otherwise shrink an unused posterior at full speed no matter how small
    beta is), then ramps linearly to the configured value over the same span.
    """
    w = config.kl_warmup_steps
    if w <= 0 or step >= 2 * w:
        return config
    if step < w:
        return config.replace(beta=0.0)
    return config.replace(beta=config.beta * (step - w) / w)


def _save_state(path, config, step, modules, opt, names, generator):
    blobs = ckpt_io.module_blobs(modules, "model")
    blobs.update(ckpt_io.optimizer_blobs(opt, names))
    blobs["rng.train"] = generator.get_state().numpy()
    ckpt_io.save_checkpoint(path, config, step, blobs)


def train(
    config: RunConfig,
    dataset_dir: str | Path,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> Path:
    """Train to ``config.steps`` optimization steps; returns the checkpoint path.

    Writes ``loss_log.jsonl`` (one record per step), periodic checkpoints, and
    ``checkpoint.bin`` at the end. Deterministic given the seed on one device.
    A non-finite loss aborts with a diagnostic dump of the offending batch.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_dataset(dataset_dir, config)
    modules = build_modules(config)
    opt = torch.optim.Adam(
        modules.parameters(), lr=config.lr, betas=(config.adam_beta1, config.adam_beta2)
    )
    names = [n for n, _ in modules.named_parameters()]
    generator = torch.Generator(device=config.device).manual_seed(config.seed + 1)
    extractor = losses.RandomConvFeatures(PERCEPTUAL_SEED).to(config.device)
    start_step = 0
    if resume_from is not None:
        ckpt = ckpt_io.load_checkpoint(resume_from, expected_config=config)
        ckpt_io.load_module(modules, ckpt, "model")
        ckpt_io.load_optimizer(opt, names, ckpt)
        generator.set_state(torch.from_numpy(ckpt.blobs["rng.train"].copy()))
        start_step = ckpt.step

    n = data.frames.shape[0]
    log_path = out / "loss_log.jsonl"
    mode = "a" if start_step > 0 else "w"
    with open(log_path, mode) as log:
        for step in range(start_step, config.steps):
            idx = torch.randint(n, (config.batch_size,), generator=generator, device=config.device)
            batch = data.frames[idx]
            heat = None if data.heatmaps is None else data.heatmaps[idx]
            step_cfg = _effective_config(config, step)
            breakdown, _ = _step_losses(modules, batch, heat, step_cfg, extractor, generator)
            if not torch.isfinite(breakdown.total):
                dump = {"step": step, "batch_indices": idx.tolist(), **breakdown.to_dict()}
                (out / "nan_dump.json").write_text(json.dumps(dump, indent=2))
                raise RuntimeError(f"non-finite loss at step {step}; diagnostics in nan_dump.json")
            opt.zero_grad(set_to_none=True)
            breakdown.total.backward()
            opt.step()
            log.write(json.dumps(_log_record(step, breakdown, step_cfg)) + "\n")
            done = step + 1
            if config.checkpoint_every and done % config.checkpoint_every == 0 and done < config.steps:
                _save_state(out / f"checkpoint_step_{done:06d}.bin", config, done, modules, opt, names, generator)
    final = out / "checkpoint.bin"
    _save_state(final, config, config.steps, modules, opt, names, generator)
    return final


def load_trained(path: str | Path) -> tuple[RunConfig, Seg2VidModules]:
    """Load a checkpoint for inference; validates shapes against its config."""
    ckpt = ckpt_io.load_checkpoint(path)
    modules = Seg2VidModules(ckpt.config)
    ckpt_io.load_module(modules, ckpt, "model")
    modules.eval()
    return ckpt.config, modules


def _prepare_inputs(i0: np.ndarray, label: LabelMap | None, config: RunConfig):
    i0_t = torch.from_numpy(np.asarray(i0, dtype=np.float32)).unsqueeze(0)
    heat = None
    if config.semantic_mode != "none":
        if label is None:
            raise ValueError(f"semantic_mode={config.semantic_mode!r} requires a label map")
        heat = torch.from_numpy(one_hot(label)).unsqueeze(0)
    return i0_t, heat


@torch.no_grad()
def sample_sequences(
    modules: Seg2VidModules,
    config: RunConfig,
    i0: np.ndarray,
    label: LabelMap | None,
    n_samples: int,
    seed: int,
) -> list[FrameSequence]:
    """Draw prior samples z ~ N(0, I) and compose the resulting sequences."""
    i0_t, heat = _prepare_inputs(i0, label, config)
    generator = torch.Generator().manual_seed(seed)
    out = []
    for _ in range(n_samples):
        pred = modules.flow.predict(i0_t, heat, mode="prior", generator=generator)
        if isinstance(pred, FramesPrediction):
            frames = torch.cat([i0_t.unsqueeze(1), pred.frames], dim=1)
        else:
            frames = compose_sequence(i0_t, pred, modules.refiner)
        out.append(FrameSequence(frames[0].clamp(0, 1).numpy()))
    return out


def generate(
    label: LabelMap,
    i2i: I2IStage,
    checkpoint_path: str | Path,
    n_samples: int = 1,
    seed: int = 0,
) -> list[FrameSequence]:
    """Two-stage generation: label -> starting frame -> sampled sequences."""
    config, modules = load_trained(checkpoint_path)
    i0 = i2i.translate(label)
    if i0.shape != (3, config.height, config.width):
        raise ValueError(f"I2I stage produced {i0.shape}, expected (3, {config.height}, {config.width})")
    return sample_sequences(modules, config, i0, label, n_samples, seed)


def predict_from_frame(
    i0: np.ndarray,
    label: LabelMap | None,
    checkpoint_path: str | Path,
    seed: int = 0,
    n_samples: int = 1,
) -> list[FrameSequence]:
    """Video prediction from a real starting frame (I2I stage skipped)."""
    config, modules = load_trained(checkpoint_path)
    return sample_sequences(modules, config, i0, label, n_samples, seed)


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def evaluate(
    checkpoint_path: str | Path,
    dataset_dir: str | Path,
    z_mode: str = "posterior",
    n_diversity_samples: int = 8,
    seed: int = 0,
    max_samples: int | None = None,
) -> MetricsReport:
    """Metrics of a trained model against ground-truth flow/occlusion.

    z_mode "posterior" encodes each test sequence and decodes its posterior
    mean (deterministic reconstruction setting); "prior" draws one seeded
    latent per sample (generation setting). Diversity always uses prior
    samples on the first test scene.
    """
    config, modules = load_trained(checkpoint_path)
    samples = load_dataset(dataset_dir)
    if max_samples is not None:
        samples = samples[:max_samples]
    generator = torch.Generator().manual_seed(seed)
    t = config.t
    acc = {k: np.zeros(t) for k in ("epe_bwd", "epe_fwd_fg", "psnr", "ssim", "iou")}
    n_fg = 0
    for sample in samples:
        frames = torch.from_numpy(sample.frames.frames).unsqueeze(0)
        i0_t, heat = _prepare_inputs(sample.frames.frames[0], sample.label, config)
        if z_mode == "posterior":
            pred = modules.flow.predict(i0_t, heat, frames, mode="posterior_mean")
        else:
            pred = modules.flow.predict(i0_t, heat, mode="prior", generator=generator)
        if isinstance(pred, FramesPrediction):
            composed = torch.cat([i0_t.unsqueeze(1), pred.frames], dim=1)
            flow_b = flow_f = occ_b = None
        else:
            composed = compose_sequence(i0_t, pred, modules.refiner)
            flow_f = pred.flow_f[0].numpy()
            flow_b = pred.flow_b[0].numpy()
            occ_b = pred.occ_b[0].numpy()
        gt_flow, gt_occ = sample.flow, sample.occlusion
        fg_mask = np.isin(sample.label.classes, sorted(sample.label.fg_class_set)).astype(np.float64)
        has_fg = fg_mask.sum() > 0
        n_fg += has_fg
        pred_frames = composed[0, 1:].numpy()
        gt_frames = sample.frames.frames[1:]
        acc["psnr"] += psnr(pred_frames, gt_frames)
        acc["ssim"] += ssim(pred_frames, gt_frames)
        for k in range(t):
            if flow_b is not None and gt_flow is not None:
                acc["epe_bwd"][k] += epe(flow_b[k], gt_flow.backward[k])
                if has_fg:
                    acc["epe_fwd_fg"][k] += epe(flow_f[k], gt_flow.forward[k], fg_mask)
            if occ_b is not None and gt_occ is not None:
                acc["iou"][k] += occlusion_iou(occ_b[k], gt_occ.backward[k])
    n = len(samples)
    report = MetricsReport(
        epe_bwd=list(acc["epe_bwd"] / n),
        epe_fwd_fg=list(acc["epe_fwd_fg"] / max(n_fg, 1)),
        psnr=list(acc["psnr"] / n),
        ssim=list(acc["ssim"] / n),
        iou=list(acc["iou"] / n),
        n_samples=n,
        z_mode=z_mode,
    )
    # diversity over prior flow samples on the first scene
    first = samples[0]
    i0_t, heat = _prepare_inputs(first.frames.frames[0], first.label, config)
    flows = []
    for _ in range(n_diversity_samples):
        pred = modules.flow.predict(i0_t, heat, mode="prior", generator=generator)
        vol = pred.frames if isinstance(pred, FramesPrediction) else pred.flow_b
        flows.append(vol[0].numpy())
    report.diversity = diversity(flows)
    return report


# ---------------------------------------------------------------------------
# ablations

ABLATION_VARIANTS = ("no_flow", "no_semantic", "concat_semantic", "split_semantic")


def ablation_config(variant: str, config: RunConfig) -> RunConfig:
    """Derive the per-variant config; everything else stays identical."""
    if variant == "no_flow":
        return config.replace(variant="no_flow")
    if variant == "no_semantic":
        return config.replace(semantic_mode="none")
    if variant == "concat_semantic":
        return config.replace(semantic_mode="concat")
    if variant == "split_semantic":
        return config.replace(semantic_mode="split")
    raise ValueError(f"unknown ablation variant {variant!r}, expected one of {ABLATION_VARIANTS}")


def run_ablation(
    variant: str,
    config: RunConfig,
    train_dir: str | Path,
    test_dir: str | Path,
    out_dir: str | Path,
) -> dict:
    """Train one ablation variant and evaluate it in both latent modes.

    The variant uses the same seed, data order and step count as the base
    config, so paired runs differ only in the model. Reports are written to
    ``<out_dir>/metrics_<mode>.json``.
    """
    cfg = ablation_config(variant, config)
    out = Path(out_dir)
    ckpt = train(cfg, train_dir, out)
    reports = {}
    for mode in ("posterior", "prior"):
        report = evaluate(ckpt, test_dir, z_mode=mode, seed=config.seed)
        report.save(out / f"metrics_{mode}.json")
        reports[mode] = report
    return {"variant": variant, "checkpoint": ckpt, "reports": reports}
