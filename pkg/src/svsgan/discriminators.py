"""Image (segmentation) and video (patch) discriminators."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ValidationError
from .generator import conv, one_hot


@dataclass(frozen=True)
class DiscIConfig:
    num_classes: int
    levels: int = 3
    base_channels: int = 32
    channel_cap: int = 256
    spectral_norm: bool = True

    @property
    def out_channels(self) -> int:
        return self.num_classes + 1

    def channels(self, i: int) -> int:
        return min(self.base_channels * 2 ** i, self.channel_cap)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiscVConfig:
    num_classes: int
    frames_per_window: int = 3
    temporal_rates: tuple[int, ...] = (1, 2)
    patch_levels: int = 3
    base_channels: int = 32
    channel_cap: int = 256
    spectral_norm: bool = True

    def validate(self) -> None:
        if self.frames_per_window < 2:
            raise ConfigError("frames_per_window must be >= 2")
        rates = list(self.temporal_rates)
        if not rates or rates[0] < 1 or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ConfigError(f"temporal_rates must be strictly increasing positive integers, got {rates}")

    def to_dict(self) -> dict:
        return asdict(self)


class SegmentationDiscriminator(nn.Module):
    """U-Net that segments real images into N classes and fakes into class N."""

    def __init__(self, cfg: DiscIConfig):
        super().__init__()
        self.cfg = cfg
        sn, L = cfg.spectral_norm, cfg.levels
        self.enc = nn.ModuleList()
        cin = 3
        for i in range(L):
            self.enc.append(nn.Sequential(conv(cin, cfg.channels(i), stride=2, sn=sn), nn.LeakyReLU(0.2),
                                          conv(cfg.channels(i), cfg.channels(i), sn=sn), nn.LeakyReLU(0.2)))
            cin = cfg.channels(i)
        self.dec = nn.ModuleList()
        for i in reversed(range(L)):
            skip = cfg.channels(i - 1) if i > 0 else 3
            cout = cfg.channels(max(i - 1, 0))
            self.dec.append(nn.Sequential(conv(cin + skip, cout, sn=sn), nn.LeakyReLU(0.2)))
            cin = cout
        self.out = conv(cin, cfg.out_channels, k=1, sn=sn)

    def forward(self, image):
        d = 2 ** self.cfg.levels
        if image.shape[-1] % d or image.shape[-2] % d:
            raise ConfigError(f"image dims {tuple(image.shape[-2:])} not divisible by {d}")
        skips = [image]
        feats = []
        x = image
        for stage in self.enc:
            x = stage(x)
            feats.append(x)
            skips.append(x)
        skips.pop()
        for stage in self.dec:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = stage(torch.cat([x, skip], 1))
            feats.append(x)
        return self.out(x), feats


class PatchDiscriminator(nn.Module):
    """Strided conv stack emitting a patch-logit map after every stride-2 stage."""

    def __init__(self, in_channels, levels=3, base_channels=32, channel_cap=256, sn=True):
        super().__init__()
        self.levels = levels
        self.stages = nn.ModuleList()
        self.heads = nn.ModuleList()
        cin = in_channels
        for i in range(levels):
            cout = min(base_channels * 2 ** i, channel_cap)
            self.stages.append(nn.Sequential(conv(cin, cout, stride=2, sn=sn),
                                             nn.LeakyReLU(0.2)))
            self.heads.append(conv(cout, 1, k=3, sn=sn))
            cin = cout

    def forward(self, x):
        logits, feats = [], []
        for stage, head in zip(self.stages, self.heads):
            x = stage(x)
            feats.append(x)
            logits.append(head(x))
        return logits, feats


class VideoDiscriminator(nn.Module):
    """Judges K frames plus their label maps, concatenated along channels."""

    def __init__(self, cfg: DiscVConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        k, n = cfg.frames_per_window, cfg.num_classes
        self.net = PatchDiscriminator(k * (3 + n), cfg.patch_levels, cfg.base_channels,
                                      cfg.channel_cap, cfg.spectral_norm)

    def forward(self, clip, sem_clip):
        """``clip`` (B, K, 3, H, W); ``sem_clip`` (B, K, H, W) labels or (B, K, N, H, W) one-hot."""
        k = self.cfg.frames_per_window
        if clip.dim() != 5 or clip.shape[1] != k:
            raise ValidationError(f"video discriminator expects {k} frames per window, "
                                  f"got shape {tuple(clip.shape)}")
        b, _, _, h, w = clip.shape
        d = 2 ** self.cfg.patch_levels
        if h % d or w % d:
            raise ConfigError(f"clip dims {(h, w)} not divisible by {d}")
        if not sem_clip.is_floating_point():
            sem = one_hot(sem_clip.reshape(b * k, h, w), self.cfg.num_classes, clip.dtype)
            sem_clip = sem.view(b, k, -1, h, w)
        x = torch.cat([clip, sem_clip.to(clip.dtype)], 2).reshape(b, -1, h, w)
        return self.net(x)


class MultiScalePatchDiscriminator(nn.Module):
    """Label-conditioned image patch discriminator at two scales (the non-OASIS baseline)."""

    def __init__(self, num_classes, levels=3, base_channels=32, channel_cap=256, sn=True, scales=2):
        super().__init__()
        self.num_classes = num_classes
        self.nets = nn.ModuleList(PatchDiscriminator(3 + num_classes, levels, base_channels,
                                                     channel_cap, sn) for _ in range(scales))

    def forward(self, image, labels):
        x = torch.cat([image, one_hot(labels, self.num_classes, image.dtype)], 1)
        logits, feats = [], []
        for i, net in enumerate(self.nets):
            if i:
                x = F.avg_pool2d(x, 2)
            lg, ft = net(x)
            logits.append(lg)
            feats.extend(ft)
        return logits, feats


def window_indices(length: int, rate: int, k: int = 3) -> list[tuple[int, ...]]:
    span = 1 + (k - 1) * rate
    if length < span:
        raise ValidationError(f"sequence of {length} frames too short for K={k} at rate {rate}")
    return [tuple(t + j * rate for j in range(k)) for t in range(length - span + 1)]


def extract_windows(frames, maps, rate: int, k: int = 3):
    """All maximal windows ``[t, t+rate, ..., t+(k-1)rate]``.

    ``frames`` (B, T, 3, H, W), ``maps`` (B, T, H, W) -> clips (B*W, k, 3, H, W), (B*W, k, H, W).
    """
    idx = torch.tensor(window_indices(frames.shape[1], rate, k), device=frames.device)
    clips = frames[:, idx]  # (B, W, k, ...)
    sems = maps[:, idx]
    return clips.flatten(0, 1), sems.flatten(0, 1)
