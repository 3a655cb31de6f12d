"""Conditional VAE predicting bidirectional flow and occlusion volumes.

An image encoder maps the starting frame (plus semantic heatmaps, depending
on mode) to a content code and a pyramid of spatial features; a motion
encoder maps the whole frame sequence to the posterior (mu, logvar) of the
motion code. The decoder consumes the concatenated code through three
3D-convolutional blocks with trilinear upsampling that progressively recover
the target temporal and spatial resolution, with the encoder features
replicated along time as skip connections so flow stays pixel-aligned.

Semantic modes: "none" (frames only), "concat" (heatmaps appended to the
inputs of both encoders), "split" (foreground and background heatmap stacks
routed to separate motion encoders whose codes concatenate).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig

LOGVAR_CLAMP = 20.0


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


def _conv_block(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
        nn.GroupNorm(_groups(out_ch), out_ch),
        nn.LeakyReLU(0.2, inplace=True),
    )


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, generator=None) -> torch.Tensor:
    """z = mu + exp(0.5 logvar) * eps with eps ~ N(0, I)."""
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar must have equal shapes")
    logvar = logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + torch.exp(0.5 * logvar) * eps


class ImageEncoder(nn.Module):
    """Starting-frame encoder: content code plus per-scale skip features."""

    def __init__(self, in_ch: int, z_dim: int, size: int, base: int):
        super().__init__()
        self.size = size
        n_down = max(0, size.bit_length() - 3)  # downsample to 4x4
        self.stem = _conv_block(in_ch, base)
        downs, ch = [], base
        for k in range(n_down):
            out = base * (k + 2)
            downs.append(_conv_block(ch, out, stride=2))
            ch = out
        self.downs = nn.ModuleList(downs)
        self.out_ch = ch
        self.fc = nn.Linear(ch * 16, z_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        feat = self.stem(x)
        feats = {feat.shape[-1]: feat}
        for down in self.downs:
            feat = down(feat)
            feats[feat.shape[-1]] = feat
        z = self.fc(feat.flatten(1))
        return z, feats


class MotionEncoder(nn.Module):
    """Sequence encoder: stacked frames (+ heatmaps) to posterior (mu, logvar).

    2D convolutions intercepted with max pooling down to a 4x4 bottleneck;
    the mu/logvar heads are bias-free linear layers.
    """

    def __init__(self, in_ch: int, z_dim: int, size: int, base: int):
        super().__init__()
        n_down = max(0, size.bit_length() - 3)
        self.stem = _conv_block(in_ch, base)
        blocks, ch = [], base
        for k in range(n_down):
            out = base * (k + 2)
            blocks.append(nn.Sequential(nn.MaxPool2d(2), _conv_block(ch, out)))
            ch = out
        self.blocks = nn.ModuleList(blocks)
        self.mu_head = nn.Linear(ch * 16, z_dim, bias=False)
        self.logvar_head = nn.Linear(ch * 16, z_dim, bias=False)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feat = self.stem(x)
        for block in self.blocks:
            feat = block(feat)
        flat = feat.flatten(1)
        return self.mu_head(flat), self.logvar_head(flat).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)


def _space_schedule(size: int) -> list[int]:
    # three upsampling jumps from 4 to size, exponents spread late-heavy
    e = max(0, size.bit_length() - 3)
    j1 = e // 3
    j2 = (e - j1) // 2
    j3 = e - j1 - j2
    s1 = 4 << j1
    return [4, s1, s1 << j2, size]


def _time_schedule(t: int) -> list[int]:
    return [1, max(1, -(-t // 4)), max(1, -(-t // 2)), t]


class FlowDecoder(nn.Module):
    """Latent-to-volume decoder: three 3D-conv blocks with trilinear upsampling.

    Emits a (B, out_ch, T, H, W) volume; the final head is zero-initialized so
    an untrained model predicts exactly zero flow (and 0.5 occlusion after the
    sigmoid squashing applied by the caller).
    """

    def __init__(self, z_dim: int, out_ch: int, t: int, size: int, base: int,
                 skip_ch: dict[int, int]):
        super().__init__()
        self.t_sched = _time_schedule(t)
        self.s_sched = _space_schedule(size)
        c0 = base * 6
        self.fc = nn.Linear(z_dim, c0 * 16)
        # a compressed copy of z is broadcast to every block so conditioning
        # does not have to survive the 4x4 trunk alone
        self.z_proj = nn.Linear(z_dim, base * 2)
        chans = [c0, base * 4, base * 3, base * 2]
        convs = []
        for i in range(3):
            in_ch = chans[i] + skip_ch[self.s_sched[i]] + base * 2
            out_ch_i = chans[i + 1]
            convs.append(
                nn.Sequential(
                    nn.Conv3d(in_ch, out_ch_i, 3, padding=1),
                    nn.GroupNorm(_groups(out_ch_i), out_ch_i),
                    nn.LeakyReLU(0.2, inplace=True),
                    nn.Conv3d(out_ch_i, out_ch_i, 3, padding=1),
                    nn.GroupNorm(_groups(out_ch_i), out_ch_i),
                    nn.LeakyReLU(0.2, inplace=True),
                )
            )
        self.convs = nn.ModuleList(convs)
        self.head = nn.Conv3d(chans[3], out_ch, (1, 3, 3), padding=(0, 1, 1))
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, z: torch.Tensor, skips: dict[int, torch.Tensor]) -> torch.Tensor:
        b = z.shape[0]
        x = self.fc(z).reshape(b, -1, 1, 4, 4)
        zb = self.z_proj(z).reshape(b, -1, 1, 1, 1)
        for i, conv in enumerate(self.convs):
            skip = skips[self.s_sched[i]]
            skip = skip.unsqueeze(2).expand(-1, -1, x.shape[2], -1, -1)
            ztile = zb.expand(-1, -1, *x.shape[2:])
            x = conv(torch.cat([x, skip, ztile], dim=1))
            target = (self.t_sched[i + 1], self.s_sched[i + 1], self.s_sched[i + 1])
            if target != tuple(x.shape[2:]):
                x = F.interpolate(x, size=target, mode="trilinear", align_corners=False)
        return self.head(x)


@dataclass
class FlowPrediction:
    """Predicted volumes plus the latent code that produced them.

    flow_f/flow_b: (B, T, 2, H, W) pixels; occ_f/occ_b: (B, T, 1, H, W) in
    (0, 1). mu/logvar are None for prior-sampled predictions.
    """

    flow_f: torch.Tensor
    flow_b: torch.Tensor
    occ_f: torch.Tensor
    occ_b: torch.Tensor
    z_content: torch.Tensor
    z_motion: torch.Tensor
    mu: torch.Tensor | None = None
    logvar: torch.Tensor | None = None


@dataclass
class FramesPrediction:
    """Direct frame regression (flow-free ablation): frames (B, T, 3, H, W)."""

    frames: torch.Tensor
    z_content: torch.Tensor
    z_motion: torch.Tensor
    mu: torch.Tensor | None = None
    logvar: torch.Tensor | None = None


class FlowModel(nn.Module):
    """The image-to-flow cVAE (or its flow-free ablation variant)."""

    def __init__(self, config: RunConfig):
        super().__init__()
        if config.height != config.width:
            raise ValueError("FlowModel requires square frames")
        self.config = config
        size, base, c = config.height, config.base_channels, config.num_classes
        heat_ch = 0 if config.semantic_mode == "none" else c
        self.image_encoder = ImageEncoder(3 + heat_ch, config.z_content_dim, size, base)
        seq_ch = 3 * (config.t + 1)
        if config.semantic_mode == "split":
            n_fg = len(config.fg_classes)
            self.motion_encoder_fg = MotionEncoder(seq_ch + n_fg, config.z_fg_dim, size, base)
            self.motion_encoder_bg = MotionEncoder(seq_ch + (c - n_fg), config.z_bg_dim, size, base)
        else:
            self.motion_encoder = MotionEncoder(seq_ch + heat_ch, config.z_motion_dim, size, base)
        n_down = max(0, size.bit_length() - 3)
        skip_ch = {size >> m: (base if m == 0 else base * (m + 1)) for m in range(n_down + 1)}
        out_ch = 3 if config.variant == "no_flow" else 6
        self.decoder = FlowDecoder(
            config.z_content_dim + config.z_motion_dim, out_ch, config.t, size, base, skip_ch
        )

    # -- encoders -----------------------------------------------------------

    def _image_input(self, i0: torch.Tensor, heatmaps: torch.Tensor | None) -> torch.Tensor:
        mode = self.config.semantic_mode
        if (heatmaps is None) != (mode == "none"):
            raise ValueError(f"heatmaps must be given iff semantic_mode != 'none' (mode={mode!r})")
        if heatmaps is None:
            return i0
        if heatmaps.shape[1] != self.config.num_classes:
            raise ValueError(
                f"expected {self.config.num_classes} heatmap channels, got {heatmaps.shape[1]}"
            )
        return torch.cat([i0, heatmaps], dim=1)

    def encode_image(self, i0: torch.Tensor, heatmaps: torch.Tensor | None = None) -> torch.Tensor:
        """Content code z_I0 of the starting frame, (B, z_content_dim)."""
        z, _ = self.image_encoder(self._image_input(i0, heatmaps))
        return z

    def encode_motion(
        self, video: torch.Tensor, heatmaps: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Posterior (mu, logvar) of the motion code from the full sequence.

        video: (B, T+1, 3, H, W) including I_0.
        """
        if video.shape[1] != self.config.t + 1:
            raise ValueError(f"expected {self.config.t + 1} frames, got {video.shape[1]}")
        b = video.shape[0]
        stacked = video.reshape(b, -1, *video.shape[-2:])
        mode = self.config.semantic_mode
        if (heatmaps is None) != (mode == "none"):
            raise ValueError(f"heatmaps must be given iff semantic_mode != 'none' (mode={mode!r})")
        if mode == "split":
            fg_idx = list(self.config.fg_mask_channels)
            bg_idx = [i for i in range(self.config.num_classes) if i not in set(fg_idx)]
            mu_fg, lv_fg = self.motion_encoder_fg(torch.cat([stacked, heatmaps[:, fg_idx]], dim=1))
            mu_bg, lv_bg = self.motion_encoder_bg(torch.cat([stacked, heatmaps[:, bg_idx]], dim=1))
            return torch.cat([mu_fg, mu_bg], dim=1), torch.cat([lv_fg, lv_bg], dim=1)
        if heatmaps is not None:
            stacked = torch.cat([stacked, heatmaps], dim=1)
        return self.motion_encoder(stacked)

    # -- decoding -----------------------------------------------------------

    def decode(self, z_content, z_motion, skips):
        raw = self.decoder(torch.cat([z_content, z_motion], dim=1), skips)
        if self.config.variant == "no_flow":
            return torch.sigmoid(raw).permute(0, 2, 1, 3, 4)  # (B, T, 3, H, W)
        vol = raw.permute(0, 2, 1, 3, 4)  # (B, T, 6, H, W)
        flow_f = vol[:, :, 0:2]
        flow_b = vol[:, :, 2:4]
        occ_f = torch.sigmoid(vol[:, :, 4:5])
        occ_b = torch.sigmoid(vol[:, :, 5:6])
        return flow_f, flow_b, occ_f, occ_b

    def predict(
        self,
        i0: torch.Tensor,
        heatmaps: torch.Tensor | None = None,
        video: torch.Tensor | None = None,
        mode: str = "posterior",
        generator: torch.Generator | None = None,
    ):
        """Full prediction pass.

        mode "posterior" encodes the given video into the motion posterior and
        samples it (training path); "posterior_mean" uses mu directly
        (deterministic reconstruction evaluation); "prior" draws z_m ~ N(0, I)
        and needs no video (inference path).
        """
        if mode not in ("posterior", "posterior_mean", "prior"):
            raise ValueError(f"mode must be 'posterior', 'posterior_mean' or 'prior', got {mode!r}")
        z_content, skips = self.image_encoder(self._image_input(i0, heatmaps))
        mu = logvar = None
        if mode.startswith("posterior"):
            if video is None:
                raise ValueError("posterior mode requires the frame sequence")
            mu, logvar = self.encode_motion(video, heatmaps)
            z_motion = mu if mode == "posterior_mean" else reparameterize(mu, logvar, generator)
        else:
            z_motion = torch.randn(
                (i0.shape[0], self.config.z_motion_dim),
                generator=generator, dtype=i0.dtype, device=i0.device,
            )
        out = self.decode(z_content, z_motion, skips)
        if self.config.variant == "no_flow":
            return FramesPrediction(out, z_content, z_motion, mu, logvar)
        return FlowPrediction(*out, z_content, z_motion, mu, logvar)
