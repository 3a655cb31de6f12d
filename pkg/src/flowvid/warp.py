"""Differentiable coordinate grids, bilinear sampling and masked warping.

All coordinates are absolute pixel units: a sampling grid stores, per target
pixel, the source location x + w(x) to gather from. Out-of-bounds locations
clamp to the image border, which keeps photometric losses clean near frame
edges and the operator differentiable everywhere except integer-coordinate
kinks.
"""

from __future__ import annotations

import torch


def identity_grid(h: int, w: int, *, dtype=torch.float32, device=None) -> torch.Tensor:
    """Pixel-coordinate grid (2, H, W) with coords[:, i, j] = (j, i)."""
    if h < 1 or w < 1:
        raise ValueError(f"grid size must be >= 1, got ({h}, {w})")
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs, ys], dim=0)


def bilinear_sample(image: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Sample ``image`` at the pixel coordinates in ``grid``.

    image: (C, H, W) or (B, C, H, W); grid: (2, h, w) or (B, 2, h, w) with
    channel 0 = x, channel 1 = y. Each output pixel is the bilinear blend of
    the 4 source neighbours; coordinates outside the image clamp to the edge.
    Differentiable w.r.t. both image and grid. Works directly in pixel
    coordinates, so integer grids are exact pixel copies.
    """
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    if grid.dim() == 3:
        grid = grid.unsqueeze(0).expand(image.shape[0], -1, -1, -1)
    if torch.isnan(grid).any():
        raise ValueError("sampling grid contains NaN")
    b, c, h, w = image.shape
    gh, gw = grid.shape[-2:]
    x = grid[:, 0].clamp(0, w - 1)
    y = grid[:, 1].clamp(0, h - 1)
    x0, y0 = x.floor(), y.floor()
    wx, wy = x - x0, y - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = image.reshape(b, c, h * w)
    gather = lambda yy, xx: flat.gather(
        2, (yy * w + xx).reshape(b, 1, gh * gw).expand(b, c, -1)
    ).reshape(b, c, gh, gw)
    v00, v10 = gather(y0, x0), gather(y0, x1)
    v01, v11 = gather(y1, x0), gather(y1, x1)
    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = v00 + (v10 - v00) * wx
    bot = v01 + (v11 - v01) * wx
    out = top + (bot - top) * wy
    return out.squeeze(0) if squeeze else out


def warp_frame(frame: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp: gather frame at x + flow(x) for every target pixel x.

    frame: (C, H, W) or (B, C, H, W); flow: (2, H, W) or (B, 2, H, W) in
    pixels. warp_frame(I0, w_t^b) realizes I_0(x + w_t^b(x)).
    """
    if frame.shape[-2:] != flow.shape[-2:]:
        raise ValueError(f"frame {tuple(frame.shape)} and flow {tuple(flow.shape)} sizes differ")
    if flow.shape[-3] != 2:
        raise ValueError(f"flow must have 2 channels, got {flow.shape[-3]}")
    h, w = frame.shape[-2:]
    base = identity_grid(h, w, dtype=flow.dtype, device=flow.device)
    if flow.dim() == 4:
        base = base.unsqueeze(0)
    return bilinear_sample(frame, base + flow)


def apply_occlusion(frame: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Multiply a frame by a [0, 1] occlusion mask, broadcast over channels.

    frame: (..., C, H, W); mask: (..., 1, H, W).
    """
    if mask.min() < 0 or mask.max() > 1:
        raise ValueError("occlusion mask values must lie in [0, 1]")
    return frame * mask


def warp_volume(frame: torch.Tensor, flows: torch.Tensor) -> torch.Tensor:
    """Warp one frame by a stack of T flows at once.

    frame: (C, H, W) or (B, C, H, W); flows: (T, 2, H, W) or (B, T, 2, H, W).
    Returns (T, C, H, W) or (B, T, C, H, W).
    """
    if frame.dim() == 3:
        t = flows.shape[0]
        return warp_frame(frame.unsqueeze(0).expand(t, -1, -1, -1), flows)
    b, t = flows.shape[:2]
    rep = frame.unsqueeze(1).expand(b, t, -1, -1, -1).reshape(b * t, *frame.shape[1:])
    out = warp_frame(rep, flows.reshape(b * t, 2, *flows.shape[-2:]))
    return out.reshape(b, t, *out.shape[1:])
