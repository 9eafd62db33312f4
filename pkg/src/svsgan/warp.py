"""Differentiable backward warping, flow resampling and occlusion fusion.

Tensors are channel-first: images/features ``(B, C, H, W)``, flows ``(B, 2, H, W)`` with
channel 0 = u (horizontal) and 1 = v (vertical) in pixels, occlusions ``(B, 1, H, W)``.
Unbatched inputs (leading batch dimension omitted) are accepted as well.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import DimensionError, ValidationError


def _batched(x: torch.Tensor, ndim: int = 4):
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), True
    if x.dim() != ndim:
        raise DimensionError(f"expected {ndim - 1}- or {ndim}-d tensor, got shape {tuple(x.shape)}")
    return x, False


def bilinear_warp(source: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``source`` at ``(x + u, y + v)`` for every target pixel.

    Coordinates outside the frame are clamped to the border (replicate padding).
    Differentiable in both ``source`` and ``flow``.
    """
    src, squeeze = _batched(source)
    flo, _ = _batched(flow)
    b, c, h, w = src.shape
    if flo.shape != (b, 2, h, w):
        raise DimensionError(f"flow shape {tuple(flo.shape)} does not match source {tuple(src.shape)}")
    if not torch.isfinite(flo).all():
        raise ValidationError("flow contains non-finite values")
    flo = flo.to(src.dtype)
    ys = torch.arange(h, dtype=src.dtype, device=src.device).view(1, h, 1)
    xs = torch.arange(w, dtype=src.dtype, device=src.device).view(1, 1, w)
    sx = (xs + flo[:, 0]).clamp(0, w - 1)
    sy = (ys + flo[:, 1]).clamp(0, h - 1)
    x0 = sx.detach().floor()
    y0 = sy.detach().floor()
    wx = sx - x0
    wy = sy - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = src.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).view(b, c, h, w)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    out = ((1 - wx) * (1 - wy) * gather(y0, x0) + wx * (1 - wy) * gather(y0, x1)
           + (1 - wx) * wy * gather(y1, x0) + wx * wy * gather(y1, x1))
    return out.squeeze(0) if squeeze else out


def fuse_occlusion(generated: torch.Tensor, warped: torch.Tensor,
                   occlusion: torch.Tensor, check: bool = True) -> torch.Tensor:
    """``occ * generated + (1 - occ) * warped``; occlusion broadcasts over channels."""
    if generated.shape != warped.shape:
        raise DimensionError(f"generated {tuple(generated.shape)} vs warped {tuple(warped.shape)}")
    if occlusion.shape[-2:] != generated.shape[-2:]:
        raise DimensionError(f"occlusion spatial dims {tuple(occlusion.shape[-2:])} "
                             f"do not match features {tuple(generated.shape[-2:])}")
    if check and (occlusion.min() < 0 or occlusion.max() > 1):
        raise ValidationError("occlusion values must lie in [0, 1]")
    return occlusion * generated + (1 - occlusion) * warped


def resize_flow(flow: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resize a flow to ``size = (H', W')`` and rescale displacements to match."""
    th, tw = size
    if th < 1 or tw < 1:
        raise ValidationError(f"target size must be >= 1, got {size}")
    flo, squeeze = _batched(flow)
    h, w = flo.shape[-2:]
    if (th, tw) == (h, w):
        return flow
    out = F.interpolate(flo, size=(th, tw), mode="bilinear", align_corners=False)
    scale = torch.tensor([tw / w, th / h], dtype=out.dtype, device=out.device).view(1, 2, 1, 1)
    out = out * scale
    return out.squeeze(0) if squeeze else out


def resize_map(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize for occlusion maps and features (identity when sizes match)."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)
