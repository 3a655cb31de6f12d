"""Training objectives for the flow-based video generator.

All losses reduce by mean over (batch, time, space) so the weights stay
resolution-independent. Image residuals average over color channels; flow
residuals sum over the two displacement components (the L1 norm of the
residual vector). Occlusion masks weight the photometric and consistency
terms and are not detached, so mask heads receive gradient from them; the
penalty term alone deters the all-occluded collapse.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .warp import warp_frame, warp_volume


def _batched(x: torch.Tensor, dims: int) -> torch.Tensor:
    if x.dim() == dims - 1:
        return x.unsqueeze(0)
    if x.dim() != dims:
        raise ValueError(f"expected {dims - 1}- or {dims}-dim tensor, got {x.dim()}-dim")
    return x


def recon_loss(flow_f, flow_b, occ_f, occ_b, video, i0) -> torch.Tensor:
    """Masked bidirectional photometric reconstruction.

    Forward direction compares I_0(x) against I_t sampled at x + w_t^f(x);
    backward compares I_t(x) against I_0 sampled at x + w_t^b(x). Both
    residuals are weighted by the matching occlusion mask so only pixels with
    a correspondence contribute.

    flow_*: (B, T, 2, H, W); occ_*: (B, T, 1, H, W); video: (B, T, 3, H, W)
    frames I_1..I_T; i0: (B, 3, H, W).
    """
    flow_f, flow_b = _batched(flow_f, 5), _batched(flow_b, 5)
    occ_f, occ_b = _batched(occ_f, 5), _batched(occ_b, 5)
    video, i0 = _batched(video, 5), _batched(i0, 4)
    if video.shape[1] != flow_f.shape[1]:
        raise ValueError(f"video has {video.shape[1]} steps, flow {flow_f.shape[1]}")
    b, t = flow_f.shape[:2]
    flat = lambda x: x.reshape(b * t, *x.shape[2:])

    # I_t gathered at forward-displaced coords, compared to I_0
    it_sampled = warp_frame(flat(video), flat(flow_f)).reshape(b, t, 3, *i0.shape[-2:])
    fwd_resid = (i0.unsqueeze(1) - it_sampled).abs()
    fwd_term = (occ_f * fwd_resid.mean(dim=2, keepdim=True)).mean()

    # I_0 warped backward, compared to I_t
    i0_warped = warp_volume(i0, flow_b)
    bwd_resid = (video - i0_warped).abs()
    bwd_term = (occ_b * bwd_resid.mean(dim=2, keepdim=True)).mean()
    return fwd_term + bwd_term


def smooth_loss(flow_f, flow_b) -> torch.Tensor:
    """First-order smoothness: mean absolute forward differences of the flow.

    Per volume the four Jacobian entries (du/dx, dv/dx, du/dy, dv/dy) each
    contribute their own mean; boundary rows/columns are excluded, there is
    no wrap-around.
    """

    def term(flow):
        flow = _batched(flow, 5)
        dx = flow[..., :, 1:] - flow[..., :, :-1]
        dy = flow[..., 1:, :] - flow[..., :-1, :]
        return dx.abs().sum(dim=2).mean() + dy.abs().sum(dim=2).mean()

    return term(flow_f) + term(flow_b)


def consistency_loss(flow_f, flow_b, occ_f, occ_b) -> torch.Tensor:
    """Forward-backward consistency on non-occluded pixels.

    For inverse flows the backward flow resampled at the forward-displaced
    position cancels the forward flow, so the composition
    w^f(x) + w^b(x + w^f(x)) vanishes; its L1 norm (summed over the two
    components) is penalized in both directions, mask-weighted.
    """
    flow_f, flow_b = _batched(flow_f, 5), _batched(flow_b, 5)
    occ_f, occ_b = _batched(occ_f, 5), _batched(occ_b, 5)
    b, t = flow_f.shape[:2]
    flat = lambda x: x.reshape(b * t, *x.shape[2:])
    unflat = lambda x: x.reshape(b, t, *x.shape[1:])

    bwd_at_fwd = unflat(warp_frame(flat(flow_b), flat(flow_f)))
    fwd_at_bwd = unflat(warp_frame(flat(flow_f), flat(flow_b)))
    fwd_term = (occ_f * (flow_f + bwd_at_fwd).abs().sum(dim=2, keepdim=True)).mean()
    bwd_term = (occ_b * (flow_b + fwd_at_bwd).abs().sum(dim=2, keepdim=True)).mean()
    return fwd_term + bwd_term


def occlusion_penalty(occ_f, occ_b) -> torch.Tensor:
    """Mean |1 - O^b| + |1 - O^f|: deters the all-occluded trivial solution."""
    return (1.0 - occ_b).abs().mean() + (1.0 - occ_f).abs().mean()


def refined_recon_loss(pred_video, video, feature_extractor) -> tuple[torch.Tensor, torch.Tensor]:
    """Pixel and perceptual reconstruction of the refined frames.

    pred_video/video: (B, T, 3, H, W). The perceptual term averages the L1
    feature distance over the extractor's layers.
    """
    pred_video, video = _batched(pred_video, 5), _batched(video, 5)
    if pred_video.shape != video.shape:
        raise ValueError(f"shape mismatch {tuple(pred_video.shape)} vs {tuple(video.shape)}")
    pixel = (pred_video - video).abs().mean()
    b, t = video.shape[:2]
    fa = feature_extractor(pred_video.reshape(b * t, *video.shape[2:]))
    fb = feature_extractor(video.reshape(b * t, *video.shape[2:]))
    if len(fa) != len(fb):
        raise ValueError("feature extractor returned mismatched layer counts")
    perceptual = torch.stack([(x - y).abs().mean() for x, y in zip(fa, fb)]).mean()
    return pixel, perceptual


def kl_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL divergence of a diagonal Gaussian from N(0, I), closed form.

    Sums 0.5 (mu^2 + exp(logvar) - 1 - logvar) over dims, averages over batch.
    """
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar must have equal shapes")
    mu, logvar = _batched(mu, 2), _batched(logvar, 2)
    per_dim = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar)
    return per_dim.sum(dim=-1).mean()


@dataclass
class LossBreakdown:
    """Loss components and their weighted total.

    total = lambda_r * l_r + lambda_fs * l_fs + lambda_fc * l_fc
          + lambda_l1 * (l_l1_pixel + l_l1_perceptual)
          + lambda_p * l_occ_penalty + beta * l_kl
    where l_occ_penalty already sums both mask directions.
    """

    l_r: torch.Tensor | float = 0.0
    l_fs: torch.Tensor | float = 0.0
    l_fc: torch.Tensor | float = 0.0
    l_l1_pixel: torch.Tensor | float = 0.0
    l_l1_perceptual: torch.Tensor | float = 0.0
    l_occ_penalty: torch.Tensor | float = 0.0
    l_kl: torch.Tensor | float = 0.0
    total: torch.Tensor | float = 0.0

    def to_dict(self) -> dict[str, float]:
        return {
            k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
            for k, v in self.__dict__.items()
        }


def total_loss(
    l_r, l_fs, l_fc, l_l1_pixel, l_l1_perceptual, l_occ_penalty, l_kl, config
) -> LossBreakdown:
    """Assemble the weighted sum of all components per the run config."""
    weights = (config.lambda_r, config.lambda_fs, config.lambda_fc,
               config.lambda_l1, config.lambda_p, config.beta)
    if any(w < 0 for w in weights):
        raise ValueError("loss weights must be >= 0")
    total = (
        config.lambda_r * l_r
        + config.lambda_fs * l_fs
        + config.lambda_fc * l_fc
        + config.lambda_l1 * (l_l1_pixel + l_l1_perceptual)
        + config.lambda_p * l_occ_penalty
        + config.beta * l_kl
    )
    return LossBreakdown(l_r, l_fs, l_fc, l_l1_pixel, l_l1_perceptual, l_occ_penalty, l_kl, total)


class RandomConvFeatures(nn.Module):
    """Default perceptual feature extractor: a frozen, seeded 5-block conv stack.

    Hermetic stand-in for a pretrained deep-feature network; any callable
    mapping (N, 3, H, W) to a list of feature tensors can replace it (an
    adapter for a pretrained 16-layer extractor plugs in here).
    """

    CHANNELS = (8, 16, 24, 32, 48)

    def __init__(self, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        in_ch = 3
        for i, out_ch in enumerate(self.CHANNELS):
            conv = nn.Conv2d(in_ch, out_ch, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                fan_in = in_ch * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / fan_in**0.5)
                conv.bias.zero_()
            layers.append(conv)
            in_ch = out_ch
        self.blocks = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.blocks:
            x = torch.nn.functional.leaky_relu(conv(x.to(conv.weight.dtype)), 0.2)
            feats.append(x)
        return feats
