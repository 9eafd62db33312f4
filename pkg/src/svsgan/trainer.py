"""Alternating adversarial training with autoregressive rollouts and progressive schedules."""
from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import config as config_mod
from .discriminators import (DiscIConfig, DiscVConfig, MultiScalePatchDiscriminator,
                             SegmentationDiscriminator, VideoDiscriminator, extract_windows)
from .errors import ConfigError, NumericalError, ValidationError
from .evaluator import ConfusionMatrix, FrozenSegmenter, miou
from .generator import Generator, GeneratorConfig, GeneratorOutput, grow_resolution
from .losses import (LossWeights, PerceptualExtractor, class_weights, feature_matching_loss,
                     flow_warp_terms, generator_adv_loss, oasis_d_loss, oasis_g_loss,
                     perceptual_loss, total_generator_loss, video_adv_losses)
from .scene_forge import VideoSample
from .warp import bilinear_warp, resize_flow


@dataclass(frozen=True)
class TrainSchedule:
    stages: tuple[tuple[int, int], ...] = ((1, 6), (6, 12), (11, 24), (16, 30))
    constant_epochs: int = 20
    decay_epochs: int = 20
    post_growth_epochs: int = 8
    base_lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999

    def validate(self) -> None:
        lens = [s for _, s in self.stages]
        if any(b < a for a, b in zip(lens, lens[1:])):
            raise ValidationError("sequence lengths must be non-decreasing")
        if min(self.constant_epochs, self.decay_epochs, self.post_growth_epochs) < 0:
            raise ValidationError("epoch counts must be >= 0")

    @property
    def base_epochs(self) -> int:
        return self.constant_epochs + self.decay_epochs

    @property
    def total_epochs(self) -> int:
        return self.base_epochs + self.post_growth_epochs

    def resolve_stage(self, epoch: int) -> tuple[int, float]:
        """(sequence length, learning rate) for a 1-based epoch.

        Epochs after the base phase belong to post-growth training, where the sequence
        ramp restarts compressed into ``post_growth_epochs`` at the base learning rate.
        """
        if epoch < 1:
            raise ValidationError(f"epochs are 1-based, got {epoch}")
        if epoch <= self.base_epochs:
            seq = self.stages[0][1]
            for start, length in self.stages:
                if epoch >= start:
                    seq = length
            if epoch <= self.constant_epochs:
                return seq, self.base_lr
            return seq, self.base_lr * (self.base_epochs - epoch) / self.decay_epochs
        k = epoch - self.base_epochs - 1
        per_stage = max(self.post_growth_epochs, 1) / len(self.stages)
        idx = min(int(k // per_stage), len(self.stages) - 1)
        return self.stages[idx][1], self.base_lr


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    oasis: bool = True
    adv_mode: str = "hinge"
    fm_source: str = "both"
    detach: bool = True
    batch_size: int = 1
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    generator: GeneratorConfig
    disc_image: DiscIConfig
    disc_video: DiscVConfig


def configs_from_run(run: dict, num_classes: int) -> tuple[ModelConfig, TrainConfig]:
    gcfg = GeneratorConfig(
        num_classes=num_classes, levels=run["model.levels"], base_channels=run["model.base_channels"],
        channel_cap=run["model.channel_cap"], flow_net_blocks=run["model.flow_net_blocks"],
        flow_levels=run["model.flow_levels"], flow_channels=run["model.flow_channels"],
        flow_range=run["model.flow_range"],
        spectral_norm=run["model.spectral_norm"], noise_dim=run["model.noise_dim"],
        spade_hidden=run["model.spade_hidden"], use_spade=run["model.use_spade"])
    dcfg = DiscIConfig(num_classes, run["model.d_levels"], run["model.d_base_channels"],
                       spectral_norm=run["model.d_spectral_norm"])
    vcfg = DiscVConfig(num_classes, run["model.dv_frames"], tuple(run["model.dv_rates"]),
                       run["model.dv_patch_levels"], run["model.dv_base_channels"],
                       spectral_norm=run["model.d_spectral_norm"])
    sched = TrainSchedule(tuple(run["schedule.stages"]), run["schedule.constant_epochs"],
                          run["schedule.decay_epochs"], run["schedule.post_growth_epochs"],
                          run["schedule.base_lr"], run["schedule.beta1"], run["schedule.beta2"])
    weights = LossWeights(run["loss.vgg"], run["loss.fm"], run["loss.flow"], run["loss.warp"])
    tcfg = TrainConfig(weights, sched, run["loss.oasis"], run["loss.adv_mode"], run["loss.fm_source"],
                       run["train.detach"], run["train.batch_size"], run["seed"])
    return ModelConfig(gcfg, dcfg, vcfg), tcfg


def state_from_run(run: dict, num_classes: int, num_samples: int) -> TrainState:
    """Fresh training state for a resolved run config and a dataset of ``num_samples``."""
    model, tc = configs_from_run(run, num_classes)
    spe = run.get("train.steps_per_epoch", 0) or math.ceil(num_samples / tc.batch_size)
    return init_state(model, tc, spe)


# -- batches ---------------------------------------------------------------------------


class Batch(NamedTuple):
    frames: torch.Tensor  # (B, T, 3, H, W)
    sems: torch.Tensor  # (B, T, H, W) long
    flows: torch.Tensor  # (B, T-1, 2, H, W)
    occlusions: torch.Tensor  # (B, T-1, 1, H, W)


def make_batch(samples: Sequence[VideoSample]) -> Batch:
    return Batch(
        torch.stack([torch.from_numpy(np.ascontiguousarray(s.frames)).permute(0, 3, 1, 2) for s in samples]),
        torch.stack([torch.from_numpy(np.asarray(s.semantic_maps, np.int64)) for s in samples]),
        torch.stack([torch.from_numpy(np.ascontiguousarray(s.gt_flows)).permute(0, 3, 1, 2) for s in samples]),
        torch.stack([torch.from_numpy(np.ascontiguousarray(s.gt_occlusions))[:, None] for s in samples]),
    )


def upscale_batch(batch: Batch, factor: int) -> Batch:
    """Resample a batch to ``factor`` times the resolution (flows rescaled with it)."""
    if factor == 1:
        return batch
    b, t, _, h, w = batch.frames.shape
    size = (h * factor, w * factor)
    frames = F.interpolate(batch.frames.flatten(0, 1), size=size, mode="bilinear",
                           align_corners=False).clamp(-1, 1)
    sems = F.interpolate(batch.sems.flatten(0, 1)[:, None].float(), size=size, mode="nearest")
    flows = resize_flow(batch.flows.flatten(0, 1), size)
    occs = F.interpolate(batch.occlusions.flatten(0, 1), size=size, mode="nearest")
    return Batch(frames.view(b, t, 3, *size), sems.long().view(b, t, *size),
                 flows.view(b, t - 1, 2, *size), occs.view(b, t - 1, 1, *size))


# -- rollouts --------------------------------------------------------------------------


class RolloutResult(NamedTuple):
    frames: torch.Tensor  # (B, T, 3, H, W); frame 0 is the real reference
    outputs: list[GeneratorOutput]


def rollout(gen: Generator, frames: torch.Tensor, sems: torch.Tensor, length: int,
            detach: bool = True, noise=None) -> RolloutResult:
    """Generate frames 1..length-1 autoregressively from the real frame 0."""
    if length < 2:
        raise ValidationError(f"rollouts need at least 2 frames, got {length}")
    if length > frames.shape[1]:
        raise ValidationError(f"rollout length {length} exceeds sample length {frames.shape[1]}")
    out = [frames[:, 0]]
    outputs = []
    prev = frames[:, 0]
    for t in range(1, length):
        o = gen(prev, sems[:, t - 1], sems[:, t], noise)
        outputs.append(o)
        out.append(o.frame)
        prev = o.frame.detach() if detach else o.frame
    return RolloutResult(torch.stack(out, 1), outputs)


# -- state -----------------------------------------------------------------------------


@dataclass
class TrainState:
    model: ModelConfig
    train: TrainConfig
    generator: Generator
    disc_image: nn.Module
    disc_video: nn.ModuleList
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    steps_per_epoch: int = 1
    step: int = 0
    phase_start_step: int = 0
    phase_start_epoch: int = 1
    data_scale: int = 1
    perceptual: PerceptualExtractor = field(default_factory=PerceptualExtractor)

    @property
    def epoch(self) -> int:
        return self.phase_start_epoch + (self.step - self.phase_start_step) // self.steps_per_epoch

    @property
    def stage(self) -> str:
        return "post_growth" if self.model.generator.grown else "base"

    def discriminators(self) -> list[nn.Module]:
        return [self.disc_image, *self.disc_video]


def _d_params(disc_image, disc_video):
    return list(disc_image.parameters()) + list(disc_video.parameters())


def _build_discriminators(model: ModelConfig, oasis: bool):
    if oasis:
        d_img = SegmentationDiscriminator(model.disc_image)
    else:
        dc = model.disc_image
        d_img = MultiScalePatchDiscriminator(dc.num_classes, dc.levels, dc.base_channels,
                                             dc.channel_cap, dc.spectral_norm)
    d_vid = nn.ModuleList(VideoDiscriminator(model.disc_video) for _ in model.disc_video.temporal_rates)
    return d_img, d_vid


def _adam(params, sched: TrainSchedule):
    return torch.optim.Adam(params, lr=sched.base_lr, betas=(sched.beta1, sched.beta2))


def init_state(model: ModelConfig, train: TrainConfig, steps_per_epoch: int = 1) -> TrainState:
    train.schedule.validate()
    train.weights.validate()
    with torch.random.fork_rng():
        torch.manual_seed(train.seed)
        gen = Generator(model.generator)
        d_img, d_vid = _build_discriminators(model, train.oasis)
    return TrainState(model, train, gen, d_img, d_vid,
                      _adam(gen.parameters(), train.schedule),
                      _adam(_d_params(d_img, d_vid), train.schedule),
                      steps_per_epoch=max(1, steps_per_epoch))


# -- losses for one step ---------------------------------------------------------------


def _image_disc(state: TrainState, images, labels):
    """(logits or logit list, features) from the image discriminator."""
    if state.train.oasis:
        return state.disc_image(images)
    return state.disc_image(images, labels)


def _video_passes(state: TrainState, seq, sems):
    """Per video discriminator: (logits, feats), or None when the sequence is too short."""
    k = state.model.disc_video.frames_per_window
    out = []
    for rate, disc in zip(state.model.disc_video.temporal_rates, state.disc_video):
        if seq.shape[1] < 1 + (k - 1) * rate:
            out.append(None)
            continue
        clips, sem_clips = extract_windows(seq, sems, rate, k)
        out.append(disc(clips, sem_clips))
    return out


def _check_finite(report: dict, tensors: dict) -> None:
    for name, value in tensors.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NumericalError(f"non-finite {name} loss ({v}) at step {report.get('step')}")
        report[name] = v


def train_step(state: TrainState, batch: Batch) -> tuple[TrainState, dict]:
    """One discriminator update then one generator update on a batch of sequences."""
    tc, w = state.train, state.train.weights
    n = state.model.generator.num_classes
    seq_len, lr = tc.schedule.resolve_stage(state.epoch)
    batch = upscale_batch(batch, state.data_scale)
    length = min(seq_len, batch.frames.shape[1])
    for opt in (state.opt_g, state.opt_d):
        for group in opt.param_groups:
            group["lr"] = lr
    report = {"step": state.step + 1, "epoch": state.epoch, "seq_len": length, "lr": lr}

    frames, sems = batch.frames[:, :length], batch.sems[:, :length]
    real = frames[:, 1:].flatten(0, 1)
    labels = sems[:, 1:].flatten(0, 1)

    state.generator.train()
    roll = rollout(state.generator, frames, sems, length, tc.detach)
    fake = roll.frames[:, 1:].flatten(0, 1)

    # discriminator update on detached generator output
    for d in state.discriminators():
        d.train()
        d.requires_grad_(True)
    alpha = class_weights(labels, n)
    if tc.oasis:
        logits_real, _ = state.disc_image(real)
        logits_fake, _ = state.disc_image(fake.detach())
        d_img = oasis_d_loss(logits_real, logits_fake, labels, alpha)
    else:
        d_img, _ = video_adv_losses(_image_disc(state, real, labels)[0],
                                    _image_disc(state, fake.detach(), labels)[0], tc.adv_mode)
    d_adv = torch.zeros((), dtype=real.dtype)
    for r, f in zip(_video_passes(state, frames, sems), _video_passes(state, roll.frames.detach(), sems)):
        if r is not None:
            d_adv = d_adv + video_adv_losses(r[0], f[0], tc.adv_mode)[0]
    total_d = d_img + d_adv
    img_key = "oasis" if tc.oasis else "image"
    _check_finite(report, {f"d_{img_key}": d_img, "d_adv": d_adv, "total_d": total_d})
    state.opt_d.zero_grad(set_to_none=True)
    total_d.backward()
    state.opt_d.step()

    # generator update against the refreshed discriminators
    for d in state.discriminators():
        d.eval()
        d.requires_grad_(False)
    fake_img_out = _image_disc(state, fake, labels)
    with torch.no_grad():
        real_img_out = _image_disc(state, real, labels)
    if tc.oasis:
        g_img = oasis_g_loss(fake_img_out[0], labels, alpha)
    else:
        g_img = generator_adv_loss(fake_img_out[0], tc.adv_mode)
    g_adv = torch.zeros((), dtype=real.dtype)
    fm = torch.zeros((), dtype=real.dtype)
    if tc.fm_source in ("image", "both"):
        fm = fm + feature_matching_loss(fake_img_out[1], real_img_out[1], w.fm_layers)
    fake_vid = _video_passes(state, roll.frames, sems)
    with torch.no_grad():
        real_vid = _video_passes(state, frames, sems)
    for r, f in zip(real_vid, fake_vid):
        if f is None:
            continue
        g_adv = g_adv + generator_adv_loss(f[0], tc.adv_mode)
        if tc.fm_source in ("video", "both"):
            fm = fm + feature_matching_loss(f[1], r[1], w.fm_layers)
    vgg = perceptual_loss(fake, real, state.perceptual.to(real.dtype), w.perceptual_layers)
    # warp term: real previous frame carried by the predicted flow onto the real current one
    pred_flow = torch.stack([o.flow for o in roll.outputs], 1).flatten(0, 1)
    warped = bilinear_warp(frames[:, :-1].flatten(0, 1), pred_flow)
    flow_l, warp_l = flow_warp_terms(pred_flow, batch.flows[:, :length - 1].flatten(0, 1).to(real.dtype),
                                     warped, real, 1.0, 1.0)
    parts = {"image_adv": g_img, "adv": g_adv, "vgg": vgg, "fm": fm,
             "flow_warp": w.flow * flow_l + w.warp * warp_l}
    total_g = total_generator_loss(parts, w)
    _check_finite(report, {f"g_{img_key}": g_img, "g_adv": g_adv, "vgg": vgg, "fm": fm,
                           "flow": flow_l, "warp": warp_l, "total_g": total_g})
    state.opt_g.zero_grad(set_to_none=True)
    total_g.backward()
    state.opt_g.step()
    for d in state.discriminators():
        d.requires_grad_(True)

    state.step += 1
    return state, report


# -- data order and loop -------------------------------------------------------------------


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def next_batch_indices(state: TrainState, n: int) -> list[int]:
    """Deterministic indices for the upcoming step: a fresh permutation every epoch."""
    bs = state.train.batch_size
    order = epoch_order(state.train.seed, state.epoch, n)
    k = (state.step - state.phase_start_step) % state.steps_per_epoch
    return [int(order[(k * bs + j) % n]) for j in range(bs)]


def train(state: TrainState, dataset, steps: int, log_path=None, callback=None) -> TrainState:
    """Run ``steps`` train steps over ``dataset`` (indexable VideoSamples)."""
    n = len(dataset)
    log = open(log_path, "a") if log_path else None
    try:
        for _ in range(steps):
            idx = next_batch_indices(state, n)
            state, report = train_step(state, make_batch([dataset[i] for i in idx]))
            if log:
                log.write(json.dumps(report, sort_keys=True) + "\n")
            if callback:
                callback(state, report)
    finally:
        if log:
            log.close()
    return state


# -- spatial progression ---------------------------------------------------------------


def spatial_progression(state: TrainState) -> TrainState:
    """Grow the generator, double the data resolution and restart the sequence ramp."""
    old_names = {id(p): name for name, p in state.generator.named_parameters()}
    old_opt = state.opt_g.state_dict()
    old_states = {old_names[id(p)]: state.opt_g.state[p] for p in state.generator.parameters()
                  if p in state.opt_g.state}
    gen = grow_resolution(state.generator)
    opt_g = _adam(gen.parameters(), state.train.schedule)
    for name, p in gen.named_parameters():
        if name in old_states:
            opt_g.state[p] = {k: v.clone() if torch.is_tensor(v) else v for k, v in old_states[name].items()}
    del old_opt
    model = replace(state.model, generator=gen.cfg)
    return replace(state, model=model, generator=gen, opt_g=opt_g, data_scale=state.data_scale * 2,
                   phase_start_step=state.step,
                   phase_start_epoch=state.train.schedule.base_epochs + 1)


# -- checkpoints -----------------------------------------------------------------------


def _config_echo(state: TrainState) -> dict:
    return {"generator": state.model.generator.to_dict(),
            "disc_image": state.model.disc_image.to_dict(),
            "disc_video": state.model.disc_video.to_dict(),
            "train": _train_to_dict(state.train)}


def _train_to_dict(tc: TrainConfig) -> dict:
    d = asdict(tc)
    d["schedule"]["stages"] = [list(s) for s in tc.schedule.stages]
    return d


def _train_from_dict(d: dict) -> TrainConfig:
    sched = dict(d["schedule"])
    sched["stages"] = tuple(tuple(s) for s in sched["stages"])
    weights = LossWeights(**d["weights"])
    rest = {k: v for k, v in d.items() if k not in ("schedule", "weights")}
    return TrainConfig(weights=weights, schedule=TrainSchedule(**sched), **rest)


def _model_from_dict(d: dict) -> ModelConfig:
    dv = dict(d["disc_video"])
    dv["temporal_rates"] = tuple(dv["temporal_rates"])
    return ModelConfig(GeneratorConfig(**d["generator"]), DiscIConfig(**d["disc_image"]), DiscVConfig(**dv))


def config_digest(echo: dict) -> str:
    return hashlib.sha256(json.dumps(echo, sort_keys=True).encode()).hexdigest()[:16]


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    with os.fdopen(fd, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def sidecar_path(path) -> Path:
    return Path(path).parent / "checkpoint.json"


def save_checkpoint(state: TrainState, path) -> None:
    """Tensor archive at ``path`` plus a ``checkpoint.json`` sidecar in the same directory."""
    import io

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rng = torch.get_rng_state()
    blob = {
        "config": _config_echo(state),
        "generator": state.generator.state_dict(),
        "disc_image": state.disc_image.state_dict(),
        "disc_video": state.disc_video.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "counters": {"step": state.step, "phase_start_step": state.phase_start_step,
                     "phase_start_epoch": state.phase_start_epoch, "data_scale": state.data_scale,
                     "steps_per_epoch": state.steps_per_epoch},
        "torch_rng": rng,
    }
    buf = io.BytesIO()
    torch.save(blob, buf)
    _atomic_write_bytes(path, buf.getvalue())
    side = {
        "config": blob["config"],
        "config_digest": config_digest(blob["config"]),
        "epoch": state.epoch,
        "step": state.step,
        "stage": state.stage,
        "rng_digest": hashlib.sha256(rng.numpy().tobytes()).hexdigest()[:16],
        "archive": path.name,
    }
    _atomic_write_bytes(sidecar_path(path), json.dumps(side, indent=2, sort_keys=True).encode())


def load_checkpoint(path, expect: ModelConfig | None = None, expect_train: TrainConfig | None = None,
                    restore_rng: bool = True) -> TrainState:
    path = Path(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise FileNotFoundError(f"missing checkpoint: {path}") from None
    except Exception as exc:  # torch raises assorted errors on corrupt archives
        raise OSError(f"corrupt checkpoint {path}: {exc}") from None
    model = _model_from_dict(blob["config"])
    tc = _train_from_dict(blob["config"]["train"])
    if expect is not None and expect != model:
        raise ConfigError(f"checkpoint {path} was written for a different model config")
    if expect_train is not None and expect_train != tc:
        raise ConfigError(f"checkpoint {path} was written for a different training config")
    c = blob["counters"]
    base_gen = replace(model.generator, grown=0)
    state = init_state(ModelConfig(base_gen, model.disc_image, model.disc_video), tc, c["steps_per_epoch"])
    for _ in range(model.generator.grown):
        state = spatial_progression(state)
    try:
        state.generator.load_state_dict(blob["generator"])
        state.disc_image.load_state_dict(blob["disc_image"])
        state.disc_video.load_state_dict(blob["disc_video"])
        state.opt_g.load_state_dict(blob["opt_g"])
        state.opt_d.load_state_dict(blob["opt_d"])
    except (RuntimeError, KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint {path} does not match its recorded config: {exc}") from None
    state.step = c["step"]
    state.phase_start_step = c["phase_start_step"]
    state.phase_start_epoch = c["phase_start_epoch"]
    state.data_scale = c["data_scale"]
    if restore_rng:
        torch.set_rng_state(blob["torch_rng"])
    return state


# -- evaluation helpers ------------------------------------------------------------------


@torch.no_grad()
def generate_sequences(gen: Generator, samples: Sequence[VideoSample], length: int | None = None,
                       scale: int = 1) -> tuple[torch.Tensor, torch.Tensor]:
    """Roll out every sample from its real first frame; returns (videos, label maps)."""
    gen.eval()
    vids, maps = [], []
    for s in samples:
        b = upscale_batch(make_batch([s]), scale)
        t = length or b.frames.shape[1]
        vids.append(rollout(gen, b.frames, b.sems, t).frames)
        maps.append(b.sems[:, :t])
    gen.train()
    return torch.cat(vids), torch.cat(maps)


def generated_miou(gen: Generator, samples: Sequence[VideoSample], segmenter: FrozenSegmenter,
                   scale: int = 1) -> tuple[float, np.ndarray]:
    """mIoU of the segmenter on generated frames 1..T-1 against the conditioning maps."""
    segmenter.verify()
    vids, maps = generate_sequences(gen, samples, scale=scale)
    cm = ConfusionMatrix(segmenter.model.num_classes)
    cm.update(maps[:, 1:].numpy(), segmenter.predict(vids[:, 1:].flatten(0, 1)).numpy())
    return miou(cm)
