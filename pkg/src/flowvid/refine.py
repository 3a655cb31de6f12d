"""Post-processing network and final frame composition.

A frame at step t is synthesized by backward-warping I_0 with w_t^b, masking
by the backward occlusion map, and passing the result (with the mask stacked
as a fourth input channel, so the network can see where the holes are) through
a small U-Net that predicts a residual correction. The output is
clamp(masked_warp + correction, 0, 1): with a zero-initialized correction head
the whole compositor is the identity on the warped frame.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .flownet import FlowPrediction, _groups
from .warp import apply_occlusion, warp_frame


class Refiner(nn.Module):
    """U-Net over (warped RGB, occlusion mask) emitting an RGB correction."""

    def __init__(self, base: int = 16):
        super().__init__()
        c0, c1, c2 = max(4, base // 2), base, base * 2

        def block(cin, cout, stride=1):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                nn.GroupNorm(_groups(cout), cout),
                nn.LeakyReLU(0.2, inplace=True),
            )

        self.enc0 = block(4, c0)
        self.enc1 = block(c0, c1, stride=2)
        self.enc2 = block(c1, c2, stride=2)
        self.dec1 = block(c2 + c1, c1)
        self.dec0 = block(c1 + c0, c0)
        self.out = nn.Conv2d(c0, 3, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e0 = self.enc0(x)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        d1 = self.dec1(torch.cat([F.interpolate(e2, scale_factor=2, mode="nearest"), e1], dim=1))
        d0 = self.dec0(torch.cat([F.interpolate(d1, scale_factor=2, mode="nearest"), e0], dim=1))
        return self.out(d0)


def compose_frame(
    i0: torch.Tensor, flow_b: torch.Tensor, occ_b: torch.Tensor, refiner: Refiner
) -> torch.Tensor:
    """Synthesize one frame: refine(occ * warp(I0, flow)), output in [0, 1].

    i0: (B, 3, H, W); flow_b: (B, 2, H, W); occ_b: (B, 1, H, W).
    """
    if i0.shape[-2:] != flow_b.shape[-2:] or i0.shape[-2:] != occ_b.shape[-2:]:
        raise ValueError("frame, flow and mask sizes must match")
    warped = apply_occlusion(warp_frame(i0, flow_b), occ_b)
    correction = refiner(torch.cat([warped, occ_b], dim=1))
    return (warped + correction).clamp(0.0, 1.0)


def compose_sequence(i0: torch.Tensor, prediction: FlowPrediction, refiner: Refiner) -> torch.Tensor:
    """Synthesize the whole sequence, (B, T+1, 3, H, W) with frame 0 = I_0.

    Steps are composed independently, sharing refiner weights.
    """
    flow_b, occ_b = prediction.flow_b, prediction.occ_b
    b, t = flow_b.shape[:2]
    i0_rep = i0.unsqueeze(1).expand(b, t, -1, -1, -1).reshape(b * t, *i0.shape[1:])
    frames = compose_frame(
        i0_rep,
        flow_b.reshape(b * t, 2, *flow_b.shape[-2:]),
        occ_b.reshape(b * t, 1, *occ_b.shape[-2:]),
        refiner,
    )
    frames = frames.reshape(b, t, *frames.shape[1:])
    return torch.cat([i0.unsqueeze(1), frames], dim=1)
