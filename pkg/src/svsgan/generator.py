"""Triple-pyramid generator.

A flow/occlusion network predicts motion from the previous and current label maps; the
previous frame is warped with it. An image encoder extracts a pyramid from the warped
frame, a semantic encoder extracts one from the current labels (each level concatenated
with the upsampled bottleneck), and a SPADE decoder rebuilds the frame, fusing the image
skips with its own features through the predicted occlusion at every level.

Pyramid level ``l`` has resolution ``H / 2**l`` for ``l = 0..levels``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm as _sn

from .errors import ConfigError, DimensionError, ValidationError
from .warp import bilinear_warp, fuse_occlusion, resize_flow, resize_map

NORM_EPS = 1e-5


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int
    levels: int = 3
    base_channels: int = 32
    channel_cap: int = 256
    flow_net_blocks: int = 4
    flow_levels: int = 2
    flow_channels: int = 32
    flow_range: int = 4
    spectral_norm: bool = False
    noise_dim: int = 0
    spade_hidden: int = 64
    use_spade: bool = True
    grown: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.levels < 2:
            raise ConfigError("levels must be >= 2")
        if self.base_channels < 4:
            raise ConfigError("base_channels must be >= 4")
        if self.channel_cap < self.base_channels:
            raise ConfigError("channel_cap must be >= base_channels")
        if self.flow_net_blocks < 0 or self.noise_dim < 0 or self.grown < 0 or self.flow_range < 0:
            raise ConfigError("counts must be non-negative")
        if not 1 <= self.flow_levels <= self.levels:
            raise ConfigError("flow_levels must lie in [1, levels]")
        if self.flow_channels < 4:
            raise ConfigError("flow_channels must be >= 4")

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2 ** level, self.channel_cap)

    def flow_width(self, level: int) -> int:
        return min(self.flow_channels * 2 ** level, max(self.channel_cap, self.flow_channels))

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels + self.grown)

    def to_dict(self) -> dict:
        return asdict(self)


class GeneratorOutput(NamedTuple):
    frame: torch.Tensor  # (B, 3, H, W) in [-1, 1]
    flow: torch.Tensor  # (B, 2, H, W)
    occlusion: torch.Tensor  # (B, 1, H, W) in [0, 1]
    warped: torch.Tensor  # (B, 3, H, W)


def one_hot(labels: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """(B, H, W) integer labels -> (B, N, H, W); float input is assumed one-hot already."""
    if labels.is_floating_point():
        if labels.shape[1] != num_classes:
            raise DimensionError(f"one-hot map has {labels.shape[1]} channels, expected {num_classes}")
        return labels
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValidationError(f"labels outside [0, {num_classes})")
    return F.one_hot(labels, num_classes).permute(0, 3, 1, 2).to(dtype)


def conv(cin, cout, k=3, stride=1, sn=False):
    layer = nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)
    return _sn(layer) if sn else layer


def _scale_init(layer: nn.Conv2d, gain: float) -> nn.Conv2d:
    with torch.no_grad():
        layer.weight.mul_(gain)
        layer.bias.zero_()
    return layer


def param_free_norm(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Per-channel normalisation over batch and spatial dims (biased variance)."""
    mean = x.mean(dim=(0, 2, 3), keepdim=True)
    var = x.var(dim=(0, 2, 3), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


class SPADE(nn.Module):
    """(1 + gamma) * norm(x) + beta with gamma, beta predicted from semantic features.

    The modulation convs start near zero (``mod_gain``) so each block begins close to a
    plain normalisation; ``mod_gain=0`` makes them exactly zero.
    """

    def __init__(self, norm_nc, label_nc, hidden=64, sn=False, mod_gain=0.1):
        super().__init__()
        self.shared = nn.Sequential(conv(label_nc, hidden, sn=sn), nn.ReLU())
        self.gamma = _scale_init(nn.Conv2d(hidden, norm_nc, 3, padding=1), mod_gain)
        self.beta = _scale_init(nn.Conv2d(hidden, norm_nc, 3, padding=1), mod_gain)

    def forward(self, x, seg):
        if x.shape[-2:] != seg.shape[-2:]:
            raise DimensionError(f"features {tuple(x.shape[-2:])} vs semantics {tuple(seg.shape[-2:])}")
        actv = self.shared(seg)
        return (1 + self.gamma(actv)) * param_free_norm(x) + self.beta(actv)


class AffineNorm(nn.Module):
    """Parameter-free normalisation followed by a learned per-channel affine; ignores ``seg``."""

    def __init__(self, norm_nc, *_, **__):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(1, norm_nc, 1, 1))
        self.bias = nn.Parameter(torch.zeros(1, norm_nc, 1, 1))

    def forward(self, x, seg=None):
        return param_free_norm(x) * self.weight + self.bias


class ResBlock(nn.Module):
    """SPADE ResNet block (or its unconditional twin when ``spade=False``)."""

    def __init__(self, fin, fout, label_nc, hidden=64, sn=False, spade=True):
        super().__init__()
        norm = SPADE if spade else AffineNorm
        fmid = min(fin, fout)
        self.norm_0 = norm(fin, label_nc, hidden, sn)
        self.conv_0 = conv(fin, fmid, sn=sn)
        self.norm_1 = norm(fmid, label_nc, hidden, sn)
        self.conv_1 = conv(fmid, fout, sn=sn)
        self.learned_shortcut = fin != fout
        if self.learned_shortcut:
            self.norm_s = norm(fin, label_nc, hidden, sn)
            self.conv_s = nn.Conv2d(fin, fout, 1, bias=False)

    def forward(self, x, seg=None):
        xs = self.conv_s(self.norm_s(x, seg)) if self.learned_shortcut else x
        dx = self.conv_0(F.leaky_relu(self.norm_0(x, seg), 0.2))
        dx = self.conv_1(F.leaky_relu(self.norm_1(dx, seg), 0.2))
        return xs + dx


class _PlainRes(nn.Module):
    def __init__(self, ch, sn=False):
        super().__init__()
        self.body = nn.Sequential(conv(ch, ch, sn=sn), nn.LeakyReLU(0.2), conv(ch, ch, sn=sn))

    def forward(self, x):
        return x + self.body(x)


class SoftArgmaxFlow(nn.Module):
    """Expected displacement over a (2r+1)^2 grid of integer offsets, plus a linear residual.

    The expectation is well conditioned for sparse motion; the residual conv starts at
    zero and keeps the output unbounded.
    """

    def __init__(self, cin, radius):
        super().__init__()
        self.logits = nn.Conv2d(cin, (2 * radius + 1) ** 2, 3, padding=1)
        self.residual = _scale_init(nn.Conv2d(cin, 2, 3, padding=1), 0.0)
        ys, xs = torch.meshgrid(torch.arange(-radius, radius + 1.0), torch.arange(-radius, radius + 1.0),
                                indexing="ij")
        self.register_buffer("disp", torch.stack([xs.flatten(), ys.flatten()], 1), persistent=False)

    def forward(self, x):
        p = torch.softmax(self.logits(x), 1)
        return torch.einsum("bkhw,kc->bchw", p, self.disp.to(p.dtype)) + self.residual(x)


class FlowNet(nn.Module):
    """Encoder-decoder with residual blocks: (s_prev, s_cur) -> (flow, occlusion).

    The occlusion head reads detached trunk features, so the unsupervised occlusion map
    cannot pull the motion features away from the flow targets.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        sn, n = cfg.spectral_norm, cfg.num_classes
        depth, ch = cfg.flow_levels, cfg.flow_width
        self.stem = nn.Sequential(conv(2 * n, ch(0), sn=sn), nn.LeakyReLU(0.2))
        self.down = nn.ModuleList(
            nn.Sequential(conv(ch(i), ch(i + 1), stride=2, sn=sn), nn.LeakyReLU(0.2))
            for i in range(depth))
        self.res = nn.Sequential(*[_PlainRes(ch(depth), sn) for _ in range(cfg.flow_net_blocks)])
        self.up = nn.ModuleList(
            nn.Sequential(conv(ch(i + 1) + ch(i), ch(i), sn=sn), nn.LeakyReLU(0.2))
            for i in reversed(range(depth)))
        if cfg.flow_range:
            self.flow_head = SoftArgmaxFlow(ch(0), cfg.flow_range)
        else:
            self.flow_head = _scale_init(nn.Conv2d(ch(0), 2, 3, padding=1), 0.1)
        self.occ_head = nn.Sequential(conv(ch(0) + 2 * n, ch(0), sn=sn), nn.LeakyReLU(0.2),
                                      nn.Conv2d(ch(0), 1, 3, padding=1))

    def forward(self, s_prev, s_cur):
        labels = torch.cat([s_prev, s_cur], 1)
        x = self.stem(labels)
        skips = [x]
        for d in self.down:
            x = d(x)
            skips.append(x)
        x = self.res(x)
        for up, skip in zip(self.up, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = up(torch.cat([x, skip], 1))
        occ = torch.sigmoid(self.occ_head(torch.cat([x.detach(), labels], 1)))
        return self.flow_head(x), occ


class PyramidEncoder(nn.Module):
    """Stem at full resolution then ``levels`` stride-2 stages: returns levels+1 features."""

    def __init__(self, cin, cfg: GeneratorConfig):
        super().__init__()
        sn = cfg.spectral_norm
        self.stem = nn.Sequential(conv(cin, cfg.channels(0), sn=sn), nn.LeakyReLU(0.2))
        self.stages = nn.ModuleList(
            nn.Sequential(conv(cfg.channels(i), cfg.channels(i + 1), stride=2, sn=sn), nn.LeakyReLU(0.2),
                          conv(cfg.channels(i + 1), cfg.channels(i + 1), sn=sn), nn.LeakyReLU(0.2))
            for i in range(cfg.levels))

    def forward(self, x):
        x = self.stem(x)
        feats = [x]
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class GrowthBlock(nn.Module):
    """One spatial-progression step: doubles the output resolution."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        ch, sn = cfg.channels(0), cfg.spectral_norm
        label_nc = cfg.num_classes if cfg.use_spade else 0
        self.image_stem = nn.Sequential(conv(3, ch, sn=sn), nn.LeakyReLU(0.2))
        self.block = ResBlock(ch, ch, label_nc, cfg.spade_hidden, sn, cfg.use_spade)
        self.head = conv(ch, 3, sn=sn)

    def forward(self, x, warped, occlusion, seg):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = fuse_occlusion(x, self.image_stem(warped), occlusion, check=False)
        return self.block(x, seg)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        n, sn, L = cfg.num_classes, cfg.spectral_norm, cfg.levels
        self.flow_net = FlowNet(cfg)
        img_in = 3 if cfg.use_spade else 3 + n
        self.image_encoder = PyramidEncoder(img_in, cfg)
        if cfg.use_spade:
            self.semantic_encoder = PyramidEncoder(n + cfg.noise_dim, cfg)
            self.decoder_start = conv(2 * cfg.channels(L), cfg.channels(L), sn=sn)
        self.blocks = nn.ModuleList()
        for lvl in range(L, -1, -1):
            fout = cfg.channels(max(lvl - 1, 0))
            label_nc = cfg.channels(lvl) + cfg.channels(L)
            self.blocks.append(ResBlock(cfg.channels(lvl), fout, label_nc, cfg.spade_hidden, sn, cfg.use_spade))
        self.head = conv(cfg.channels(0), 3, sn=sn)
        self.growth = nn.ModuleList(GrowthBlock(cfg) for _ in range(cfg.grown))

    # -- pyramid pieces -------------------------------------------------------------

    def predict_flow(self, s_prev, s_cur):
        s_prev = one_hot(s_prev, self.cfg.num_classes, self._dtype)
        s_cur = one_hot(s_cur, self.cfg.num_classes, self._dtype)
        if s_prev.shape != s_cur.shape:
            raise DimensionError(f"s_prev {tuple(s_prev.shape)} vs s_cur {tuple(s_cur.shape)}")
        return self.flow_net(s_prev, s_cur)

    def encode_warped_image(self, warped, s_cur=None):
        if not self.cfg.use_spade:
            warped = torch.cat([warped, one_hot(s_cur, self.cfg.num_classes, self._dtype)], 1)
        return self.image_encoder(warped)

    def encode_semantics(self, s_cur, noise=None):
        """Per-level semantic features, each concatenated with the upsampled bottleneck."""
        if not self.cfg.use_spade:
            return None
        x = one_hot(s_cur, self.cfg.num_classes, self._dtype)
        if self.cfg.noise_dim:
            if noise is None:
                noise = torch.randn(x.shape[0], self.cfg.noise_dim, dtype=x.dtype, device=x.device)
            x = torch.cat([x, noise[:, :, None, None].expand(-1, -1, *x.shape[-2:])], 1)
        feats = self.semantic_encoder(x)
        bottleneck = feats[-1]
        return [torch.cat([f, F.interpolate(bottleneck, size=f.shape[-2:], mode="bilinear",
                                            align_corners=False)], 1) for f in feats]

    def decode_features(self, sem_pyramid, img_pyramid, occlusion):
        L = self.cfg.levels
        if len(img_pyramid) != L + 1 or (sem_pyramid is not None and len(sem_pyramid) != L + 1):
            raise ConfigError(f"decoder expects {L + 1} pyramid levels")
        if self.cfg.use_spade:
            x = self.decoder_start(sem_pyramid[L])
        else:
            x = img_pyramid[L]
        for block, lvl in zip(self.blocks, range(L, -1, -1)):
            occ = resize_map(occlusion, img_pyramid[lvl].shape[-2:])
            x = fuse_occlusion(x, img_pyramid[lvl], occ, check=False)
            x = block(x, sem_pyramid[lvl] if sem_pyramid is not None else None)
            if lvl > 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
        return x

    def decode_frame(self, sem_pyramid, img_pyramid, occlusion):
        return torch.tanh(self.head(F.leaky_relu(
            self.decode_features(sem_pyramid, img_pyramid, occlusion), 0.2)))

    @property
    def _dtype(self):
        return next(self.parameters()).dtype

    # -- full step ------------------------------------------------------------------

    def forward(self, x_prev, s_prev, s_cur, noise=None, occlusion_override=None) -> GeneratorOutput:
        n = self.cfg.num_classes
        h, w = x_prev.shape[-2:]
        d = self.cfg.divisor
        if h % d or w % d:
            raise ConfigError(f"input {h}x{w} not divisible by {d}")
        s_prev = one_hot(s_prev, n, x_prev.dtype)
        s_cur = one_hot(s_cur, n, x_prev.dtype)
        if s_prev.shape[-2:] != (h, w) or s_cur.shape[-2:] != (h, w):
            raise DimensionError("semantic maps and frame disagree in size")
        g = self.cfg.grown
        f = 2 ** g
        base = (h // f, w // f)
        xb = F.avg_pool2d(x_prev, f) if g else x_prev
        sp = F.interpolate(s_prev, size=base, mode="nearest") if g else s_prev
        sc = F.interpolate(s_cur, size=base, mode="nearest") if g else s_cur

        flow_b, occ_b = self.predict_flow(sp, sc)
        if occlusion_override is not None:
            occ_b = resize_map(occlusion_override.to(x_prev.dtype).expand(x_prev.shape[0], 1, h, w), base)
        warped_b = bilinear_warp(xb, flow_b)
        img_pyr = self.encode_warped_image(warped_b, sc)
        sem_pyr = self.encode_semantics(sc, noise)
        if not g:
            frame = self.decode_frame(sem_pyr, img_pyr, occ_b)
            if not self.cfg.use_spade:
                frame = fuse_occlusion(frame, warped_b, occ_b, check=False)
            return GeneratorOutput(frame, flow_b, occ_b, warped_b)

        x = self.decode_features(sem_pyr, img_pyr, occ_b)
        for i, block in enumerate(self.growth):
            size = (x.shape[-2] * 2, x.shape[-1] * 2)
            k = f // 2 ** (i + 1)
            wi = bilinear_warp(F.avg_pool2d(x_prev, k) if k > 1 else x_prev, resize_flow(flow_b, size))
            occ = resize_map(occ_b, size)
            seg = F.interpolate(s_cur, size=size, mode="nearest")
            x = block(x, wi, occ, seg if self.cfg.use_spade else None)
        flow, occ = resize_flow(flow_b, (h, w)), resize_map(occ_b, (h, w))
        warped = bilinear_warp(x_prev, flow)
        frame = torch.tanh(self.growth[-1].head(F.leaky_relu(x, 0.2)))
        if not self.cfg.use_spade:
            frame = fuse_occlusion(frame, warped, occ, check=False)
        return GeneratorOutput(frame, flow, occ, warped)


def generate_next_frame(gen: Generator, x_prev, s_prev, s_cur, noise=None) -> GeneratorOutput:
    return gen(x_prev, s_prev, s_cur, noise)


def param_count(params) -> int:
    """Total element count of a module, a state dict, or an iterable of tensors."""
    if isinstance(params, nn.Module):
        params = params.parameters()
    elif isinstance(params, dict):
        params = params.values()
    return sum(p.numel() for p in params)


def grow_resolution(gen: Generator) -> Generator:
    """Append one resolution-doubling block; every existing tensor is carried over unchanged."""
    old = gen.state_dict()
    grown = Generator(replace(gen.cfg, grown=gen.cfg.grown + 1)).to(
        dtype=next(gen.parameters()).dtype)
    missing, unexpected = grown.load_state_dict(old, strict=False)
    prefix = f"growth.{gen.cfg.grown}."
    if unexpected or any(not k.startswith(prefix) for k in missing):
        raise ValidationError("generator parameters do not match its config")
    return grown
