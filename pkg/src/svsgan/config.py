"""Flat ``section.key = value`` run configuration with a fixed schema.

Precedence: command-line overrides > ``SVS_SEED`` environment variable (seed only) >
config file > schema defaults. Unknown keys are rejected.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v) -> tuple[int, ...]:
    if isinstance(v, (tuple, list)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).replace(" ", "").split(",") if x)


def _stages(v) -> tuple[tuple[int, int], ...]:
    if isinstance(v, (tuple, list)):
        return tuple((int(a), int(b)) for a, b in v)
    out = []
    for item in str(v).replace(" ", "").split(","):
        a, b = item.split(":")
        out.append((int(a), int(b)))
    return tuple(out)


# key -> (parser, default, help)
SCHEMA: dict[str, tuple[Callable[[Any], Any], Any, str]] = {
    "seed": (int, 0, "global seed for weights, data order and noise"),
    "model.levels": (int, 3, "generator pyramid depth"),
    "model.base_channels": (int, 32, "generator width at full resolution"),
    "model.channel_cap": (int, 256, "maximum generator width"),
    "model.flow_net_blocks": (int, 4, "residual blocks in the flow/occlusion network"),
    "model.flow_levels": (int, 2, "stride-2 stages in the flow/occlusion network"),
    "model.flow_channels": (int, 32, "flow/occlusion network width at full resolution"),
    "model.flow_range": (int, 4, "soft-argmax flow radius in pixels (0: direct regression)"),
    "model.spectral_norm": (_bool, False, "spectral norm on generator convs"),
    "model.noise_dim": (int, 0, "noise channels fed to the semantic encoder (0 disables)"),
    "model.spade_hidden": (int, 64, "hidden width of SPADE modulation convs"),
    "model.use_spade": (_bool, True, "SPADE decoder; false gives the label-concat baseline"),
    "model.d_levels": (int, 3, "image discriminator U-Net depth"),
    "model.d_base_channels": (int, 32, "image discriminator base width"),
    "model.d_spectral_norm": (_bool, True, "spectral norm on discriminator convs"),
    "model.dv_frames": (int, 3, "frames per video-discriminator window"),
    "model.dv_rates": (_ints, (1, 2), "temporal strides of the video discriminators"),
    "model.dv_patch_levels": (int, 3, "stride-2 stages of the video discriminators"),
    "model.dv_base_channels": (int, 32, "video discriminator base width"),
    "loss.vgg": (float, 10.0, "perceptual loss weight"),
    "loss.fm": (float, 10.0, "feature-matching loss weight"),
    "loss.flow": (float, 10.0, "flow loss weight"),
    "loss.warp": (float, 10.0, "warp loss weight"),
    "loss.oasis": (_bool, True, "segmentation discriminator with OASIS loss; false uses a patch D"),
    "loss.adv_mode": (str, "hinge", "video adversarial form: hinge or bce"),
    "loss.fm_source": (str, "both", "discriminators used for feature matching: image, video or both"),
    "train.batch_size": (int, 1, "sequences per step"),
    "train.detach": (_bool, True, "detach the previous generated frame during rollouts"),
    "train.steps_per_epoch": (int, 0, "steps counted as one epoch (0: one pass over the data)"),
    "train.max_steps": (int, 0, "stop after this many steps (0 follows the schedule)"),
    "train.checkpoint_every": (int, 0, "steps between checkpoints (0: only at the end)"),
    "schedule.base_lr": (float, 2e-4, "Adam learning rate before decay"),
    "schedule.beta1": (float, 0.5, "Adam beta1"),
    "schedule.beta2": (float, 0.999, "Adam beta2"),
    "schedule.stages": (_stages, ((1, 6), (6, 12), (11, 24), (16, 30)), "start_epoch:seq_len ramp"),
    "schedule.constant_epochs": (int, 20, "epochs at constant learning rate"),
    "schedule.decay_epochs": (int, 20, "epochs of linear learning-rate decay"),
    "schedule.post_growth_epochs": (int, 8, "epochs after spatial growth"),
    "data.max_sequences": (int, 0, "use at most this many sequences (0: all)"),
}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple) and v and isinstance(v[0], tuple):
        return ",".join(f"{a}:{b}" for a, b in v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


class RunConfig(dict):
    """Fully resolved configuration; every schema key present."""

    def dump(self) -> str:
        return "".join(f"{k} = {format_value(self[k])}\n" for k in sorted(self))

    def write(self, path) -> None:
        Path(path).write_text(self.dump())


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        raw[key] = value
    return raw


def resolve(file_values: dict | None = None, overrides: dict | None = None,
            env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    merged: dict[str, Any] = {}
    layers = [file_values or {}]
    if "SVS_SEED" in env:
        layers.append({"seed": env["SVS_SEED"]})
    layers.append(overrides or {})
    for layer in layers:
        for k, v in layer.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = v
    cfg = RunConfig()
    for key, (parse, default, _) in SCHEMA.items():
        if key in merged:
            try:
                cfg[key] = parse(merged[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {merged[key]!r} ({exc})") from None
        else:
            cfg[key] = default
    if cfg["loss.adv_mode"] not in ("hinge", "bce"):
        raise ConfigError("loss.adv_mode must be hinge or bce")
    if cfg["loss.fm_source"] not in ("image", "video", "both"):
        raise ConfigError("loss.fm_source must be image, video or both")
    if cfg["train.batch_size"] < 1:
        raise ConfigError("train.batch_size must be >= 1")
    seqs = [b for _, b in cfg["schedule.stages"]]
    if any(b < a for a, b in zip(seqs, seqs[1:])):
        raise ConfigError("schedule.stages sequence lengths must be non-decreasing")
    return cfg


def load(path=None, overrides: dict | None = None, env: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except FileNotFoundError:
            raise FileNotFoundError(f"missing config file: {p}") from None
        values = parse_text(text, str(p))
    return resolve(values, overrides, env)


ABLATIONS = {
    "full": {},
    "no_oasis": {"loss.oasis": False},
    "no_spade": {"model.use_spade": False},
}
