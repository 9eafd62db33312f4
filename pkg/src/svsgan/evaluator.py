"""Fréchet distances on random-feature Gaussians, mIoU, and the evaluation segmenter.

The feature extractors are frozen conv stacks drawn from a fixed seed, so absolute
FID/FVD values here are only comparable with each other, not with Inception/I3D scores.
"""
from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, NumericalError, ValidationError

EIG_CLAMP = 1e-6


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise DimensionError(f"covariance {self.cov.shape} does not match mean ({d},)")
        if self.count < 2:
            raise ValidationError("Gaussian statistics need at least 2 samples")
        if not np.allclose(self.cov, self.cov.T, rtol=0, atol=1e-8):
            raise ValidationError("covariance is not symmetric")


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased covariance of an (n, d) feature matrix."""
    x = np.asarray(features, np.float64)
    if x.ndim != 2:
        raise DimensionError(f"features must be (n, d), got {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValidationError("Gaussian statistics need at least 2 samples")
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (n - 1)
    return GaussianStats(mu, 0.5 * (cov + cov.T), n)


def _psd_eigvals(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    tol = EIG_CLAMP * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise NumericalError(f"{what} has eigenvalue {vals.min():.3e} below -{tol:.1e}")
    return np.clip(vals, 0.0, None), vecs


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The trace of the square root is taken from the eigenvalues of the symmetric product
    S_a^{1/2} S_b S_a^{1/2}, which shares its spectrum with S_a S_b.
    """
    if a.mean.shape != b.mean.shape:
        raise DimensionError(f"feature dims differ: {a.mean.shape} vs {b.mean.shape}")
    vals, vecs = _psd_eigvals(a.cov, "covariance a")
    sqrt_a = (vecs * np.sqrt(vals)) @ vecs.T
    prod_vals, _ = _psd_eigvals(sqrt_a @ b.cov @ sqrt_a, "covariance product")
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(prod_vals).sum())
    # round-off can leave identical distributions a hair below zero
    return max(d, 0.0)


def _random_init(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv3d)):
                fan_in = m.weight[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                m.bias.zero_()


class FrameFeatureExtractor(nn.Module):
    """Frozen random 2-D conv stack + global average pooling -> (n, d) features."""

    def __init__(self, channels=(32, 64, 64, 128), seed: int = 2024):
        super().__init__()
        layers, cin = [], 3
        for cout in channels:
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        self.net = nn.Sequential(*layers)
        _random_init(self, seed)
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, frames):
        x = self.net(frames.float())
        # mean and spread of every channel keeps texture/noise statistics visible
        return torch.cat([x.mean(dim=(2, 3)), x.std(dim=(2, 3))], 1)


class ClipFeatureExtractor(nn.Module):
    """Frozen random 3-D conv stack over (n, K, 3, H, W) clips."""

    def __init__(self, channels=(32, 64, 64), seed: int = 2025):
        super().__init__()
        layers, cin = [], 3
        for cout in channels:
            layers += [nn.Conv3d(cin, cout, 3, stride=(1, 2, 2), padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        self.net = nn.Sequential(*layers)
        _random_init(self, seed)
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, clips):
        x = self.net(clips.float().permute(0, 2, 1, 3, 4))
        return torch.cat([x.mean(dim=(2, 3, 4)), x.std(dim=(2, 3, 4))], 1)


def _features(extractor, batches, chunk=64) -> np.ndarray:
    x = torch.as_tensor(batches)
    out = [extractor(x[i:i + chunk]) for i in range(0, x.shape[0], chunk)]
    return torch.cat(out).double().numpy()


def fid(real_frames, fake_frames, extractor: FrameFeatureExtractor | None = None) -> float:
    """Fréchet distance between (n, 3, H, W) frame sets under ``extractor``."""
    extractor = extractor or FrameFeatureExtractor()
    return frechet_distance(gaussian_stats(_features(extractor, real_frames)),
                            gaussian_stats(_features(extractor, fake_frames)))


def video_clips(videos, length: int = 8, stride: int = 4) -> torch.Tensor:
    """Cut (n, T, 3, H, W) videos into (m, length, 3, H, W) clips."""
    videos = torch.as_tensor(videos)
    t = videos.shape[1]
    if t < length:
        raise ValidationError(f"videos of {t} frames are shorter than the clip length {length}")
    return torch.cat([videos[:, s:s + length] for s in range(0, t - length + 1, stride)])


def fvd(real_clips, fake_clips, extractor: ClipFeatureExtractor | None = None) -> float:
    extractor = extractor or ClipFeatureExtractor()
    return frechet_distance(gaussian_stats(_features(extractor, real_clips, 16)),
                            gaussian_stats(_features(extractor, fake_clips, 16)))


class ConfusionMatrix:
    """Rows are ground truth, columns predictions."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, gt, pred) -> "ConfusionMatrix":
        gt = np.asarray(gt, np.int64).reshape(-1)
        pred = np.asarray(pred, np.int64).reshape(-1)
        if gt.shape != pred.shape:
            raise DimensionError("ground truth and prediction sizes differ")
        n = self.num_classes
        if gt.size and (gt.min() < 0 or gt.max() >= n or pred.min() < 0 or pred.max() >= n):
            raise ValidationError(f"labels outside [0, {n})")
        self.counts += np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(confusion: ConfusionMatrix) -> tuple[float, np.ndarray]:
    """Mean IoU over classes with a non-empty union; absent classes get NaN in the vector."""
    cm = confusion.counts.astype(np.float64)
    tp = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - tp
    iou = np.full(cm.shape[0], np.nan)
    valid = union > 0
    iou[valid] = tp[valid] / union[valid]
    if not valid.any():
        raise ValidationError("confusion matrix is empty")
    return float(iou[valid].mean()), iou


# -- evaluation segmenter ---------------------------------------------------------------


class Segmenter(nn.Module):
    """Small encoder-decoder for labelling synthetic frames."""

    def __init__(self, num_classes: int, width: int = 24):
        super().__init__()
        self.num_classes = num_classes
        c = width
        self.enc0 = nn.Sequential(nn.Conv2d(3, c, 3, padding=1), nn.ReLU(), nn.Conv2d(c, c, 3, padding=1), nn.ReLU())
        self.enc1 = nn.Sequential(nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.ReLU(),
                                  nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.ReLU())
        self.dec = nn.Sequential(nn.Conv2d(3 * c, c, 3, padding=1), nn.ReLU(), nn.Conv2d(c, num_classes, 1))

    def forward(self, x):
        e0 = self.enc0(x)
        e1 = F.interpolate(self.enc1(e0), size=x.shape[-2:], mode="nearest")
        return self.dec(torch.cat([e0, e1], 1))

    @torch.no_grad()
    def predict(self, frames: torch.Tensor, chunk: int = 64) -> torch.Tensor:
        self.eval()
        return torch.cat([self(frames[i:i + chunk].float()).argmax(1)
                          for i in range(0, frames.shape[0], chunk)])


def module_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class FrozenSegmenter:
    model: Segmenter
    val_miou: float
    checksum: str

    def verify(self) -> None:
        if module_checksum(self.model) != self.checksum:
            raise ValidationError("evaluation segmenter weights changed after freezing")

    def predict(self, frames) -> torch.Tensor:
        return self.model.predict(torch.as_tensor(frames))

    def score(self, frames, labels) -> tuple[float, np.ndarray]:
        cm = ConfusionMatrix(self.model.num_classes)
        cm.update(np.asarray(labels), self.predict(frames).numpy())
        return miou(cm)


def train_eval_segmenter(frames, labels, num_classes: int, seed: int = 0, val_fraction: float = 0.25,
                         threshold: float = 0.90, max_steps: int = 1500, batch: int = 16,
                         lr: float = 2e-3) -> FrozenSegmenter:
    """Train on real frames until held-out mIoU reaches ``threshold``, then freeze.

    ``frames`` (n, 3, H, W) in [-1, 1] and ``labels`` (n, H, W), grouped so that the last
    ``val_fraction`` of rows is held out (pass whole sequences in order).
    """
    frames = torch.as_tensor(frames, dtype=torch.float32)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(torch.unique(labels)) < 2:
        raise ValidationError("segmenter training data must contain at least 2 classes")
    n_val = max(1, int(round(frames.shape[0] * val_fraction)))
    train_x, val_x = frames[:-n_val], frames[-n_val:]
    train_y, val_y = labels[:-n_val], labels[-n_val:]
    if train_x.shape[0] == 0:
        raise ValidationError("not enough frames to hold out a validation split")

    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = Segmenter(num_classes)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    counts = torch.bincount(train_y.reshape(-1), minlength=num_classes).double()
    weight = torch.where(counts > 0, counts.sum() / (counts.clamp(min=1) * (counts > 0).sum()),
                         torch.zeros_like(counts)).float()
    score = 0.0
    for step in range(1, max_steps + 1):
        model.train()
        idx = torch.randint(0, train_x.shape[0], (batch,), generator=gen)
        x = train_x[idx]
        # photometric jitter so the segmenter keys on colour families, not exact values
        x = (x + 0.1 * torch.randn(x.shape, generator=gen)
             + 0.1 * torch.randn(x.shape[0], 3, 1, 1, generator=gen)).clamp(-1, 1)
        loss = F.cross_entropy(model(x), train_y[idx], weight=weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0:
            cm = ConfusionMatrix(num_classes).update(val_y.numpy(), model.predict(val_x).numpy())
            score = miou(cm)[0]
            if score >= threshold and step >= 300:
                break
    if score < threshold:
        raise NumericalError(f"segmenter reached only {score:.3f} held-out mIoU (< {threshold})")
    model.requires_grad_(False)
    model.eval()
    return FrozenSegmenter(model, score, module_checksum(model))


def save_segmenter(seg: FrozenSegmenter, path) -> None:
    buf = io.BytesIO()
    torch.save({"state": seg.model.state_dict(), "num_classes": seg.model.num_classes,
                "val_miou": seg.val_miou, "checksum": seg.checksum}, buf)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_segmenter(path) -> FrozenSegmenter:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    model = Segmenter(blob["num_classes"])
    model.load_state_dict(blob["state"])
    model.requires_grad_(False)
    model.eval()
    seg = FrozenSegmenter(model, blob["val_miou"], blob["checksum"])
    seg.verify()
    return seg
