"""``svsgan`` command line: data generation, training, inference, evaluation and growth.

Exit codes: 0 success, 2 validation or configuration error, 3 missing or unreadable
files, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from . import evaluator, scene_forge, trainer
from .errors import NumericalError, ValidationError
from .flo import write_flo

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4

FID_NOTE = "fixed-seed random feature extractors; values are not comparable to published FID/FVD"


# -- helpers -----------------------------------------------------------------------------


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(root) -> str:
    """Digest over relative paths and contents of every file below ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode() + b"\0")
        h.update(file_digest(p).encode())
    return h.hexdigest()


def inputs_manifest(paths: dict) -> dict:
    out = {}
    for name, p in paths.items():
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            out[name] = {"path": str(p), "sha256": tree_digest(p), "kind": "directory"}
        else:
            out[name] = {"path": str(p), "sha256": file_digest(p), "kind": "file"}
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def atomic_write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        f.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


class staged_dir:
    """Write into a sibling temp directory and move it into place only on success."""

    def __init__(self, final):
        self.final = Path(final)

    def __enter__(self) -> Path:
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(dir=self.final.parent, prefix=f".{self.final.name}."))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.tmp, self.final)
        return False


def parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValidationError(f"size must look like WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise ValidationError(f"size must be positive, got {text!r}")
    return w, h


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_png_frame(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise FileNotFoundError(f"missing image: {path}") from None
    except OSError as exc:
        raise OSError(f"unreadable image {path}: {exc}") from None
    return scene_forge.bytes_to_frame(arr)


def _save_png(path, array) -> None:
    from PIL import Image

    Image.fromarray(array).save(path, format="PNG", optimize=False)


def _load_labels(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im).astype(np.int64)
    except FileNotFoundError:
        raise FileNotFoundError(f"missing label map: {path}") from None
    except OSError as exc:
        raise OSError(f"unreadable label map {path}: {exc}") from None


# -- commands ----------------------------------------------------------------------------


def cmd_make_data(args) -> int:
    args.seed = resolve_seed(args.seed)
    w, h = parse_size(args.size)
    if args.scenes < 1 or args.frames < 2 or args.classes < 2:
        raise ValidationError("need --scenes >= 1, --frames >= 2 and --classes >= 2")
    specs = scene_forge.make_scenes(args.scenes, seed=args.seed, width=w, height=h,
                                    num_classes=args.classes, frames=args.frames,
                                    max_speed=args.max_speed, ego_speed=args.ego_speed,
                                    subpixel=args.subpixel)
    samples = [scene_forge.render_scene(s) for s in specs]
    with staged_dir(args.out) as tmp:
        scene_forge.write_dataset(samples, tmp, {
            "num_classes": args.classes, "seed": args.seed,
            "generator": {"max_speed": args.max_speed, "ego_speed": args.ego_speed,
                          "subpixel": args.subpixel},
            "scenes": [scene_forge.spec_to_dict(s) for s in specs],
        })
        _write_json(tmp / "inputs.json", {"command": "make-data", "inputs": {},
                                          "arguments": _arg_echo(args)})
    print(f"wrote {len(samples)} sequences to {args.out}")
    return EXIT_OK


def resolve_seed(flag, env=None) -> int:
    """Seed flag, else ``SVS_SEED``, else 0."""
    env = os.environ if env is None else env
    if flag is not None:
        return int(flag)
    try:
        return int(env.get("SVS_SEED", 0))
    except ValueError:
        raise ValidationError(f"SVS_SEED must be an integer, got {env['SVS_SEED']!r}") from None


def _arg_echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _dataset(path, run) -> tuple[scene_forge.SceneDataset, list]:
    ds = scene_forge.read_dataset(path)
    n = len(ds)
    if run["data.max_sequences"]:
        n = min(n, run["data.max_sequences"])
    return ds, list(range(n))


class _Subset:
    def __init__(self, ds, idx):
        self.ds, self.idx = ds, idx

    def __len__(self):
        return len(self.idx)

    def __getitem__(self, i):
        return self.ds[self.idx[i]]


def cmd_train(args) -> int:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    overrides.update(config_mod.ABLATIONS[args.ablation])
    run = config_mod.load(args.config, overrides)
    ds, idx = _dataset(args.data, run)
    data = _Subset(ds, idx)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        model, tc = trainer.configs_from_run(run, ds.num_classes)
        state = trainer.load_checkpoint(args.resume, expect_train=tc)
        if replace(state.model.generator, grown=0) != model.generator or \
                state.model.disc_image != model.disc_image or state.model.disc_video != model.disc_video:
            raise ValidationError(f"checkpoint {args.resume} was written for a different model config")
    else:
        torch.manual_seed(run["seed"])
        state = trainer.state_from_run(run, ds.num_classes, len(data))
    run.write(out / "config.txt")
    _write_json(out / "inputs.json", {
        "command": "train", "arguments": _arg_echo(args),
        "inputs": inputs_manifest({"data": args.data, "config": args.config, "resume": args.resume}),
    })
    sched = state.train.schedule
    last_epoch = sched.total_epochs if state.model.generator.grown else sched.base_epochs
    target = state.phase_start_step + (last_epoch - state.phase_start_epoch + 1) * state.steps_per_epoch
    if run["train.max_steps"]:
        target = min(target, run["train.max_steps"])
    every = run["train.checkpoint_every"]
    ckpt = out / "ckpt.pt"
    while state.step < target:
        chunk = target - state.step
        if every:
            chunk = min(chunk, every - state.step % every)
        state = trainer.train(state, data, chunk, log_path=out / "train_log.jsonl")
        trainer.save_checkpoint(state, ckpt)
    if not ckpt.exists():
        trainer.save_checkpoint(state, ckpt)
    print(f"trained to step {state.step} (epoch {state.epoch}); checkpoint {ckpt}")
    return EXIT_OK


def cmd_generate(args) -> int:
    args.seed = resolve_seed(args.seed)
    if args.frames < 2:
        raise ValidationError("--frames must be >= 2")
    state = trainer.load_checkpoint(args.ckpt, restore_rng=False)
    gen = state.generator
    n = gen.cfg.num_classes
    ref = _load_png_frame(args.ref)
    maps_dir = Path(args.maps)
    if not maps_dir.is_dir():
        raise FileNotFoundError(f"missing label-map directory: {maps_dir}")
    maps = np.stack([_load_labels(maps_dir / f"sem_{t:04d}.png") for t in range(args.frames)])
    if maps.min() < 0 or maps.max() >= n:
        raise ValidationError(f"label maps hold classes outside [0, {n})")
    if maps.shape[1:] != ref.shape[:2]:
        raise ValidationError(f"reference {ref.shape[1]}x{ref.shape[0]} and maps "
                              f"{maps.shape[2]}x{maps.shape[1]} differ in size")
    frames = torch.from_numpy(ref).permute(2, 0, 1)[None, None]
    sems = torch.from_numpy(maps)[None]
    torch.manual_seed(args.seed)
    noise = None
    if gen.cfg.noise_dim:
        noise = torch.randn(1, gen.cfg.noise_dim)
    gen.eval()
    with staged_dir(args.out) as tmp:
        with torch.no_grad():
            prev = frames[:, 0]
            _save_png(tmp / "frame_0000.png", scene_forge.frame_to_bytes(ref))
            for t in range(1, args.frames):
                o = gen(prev, sems[:, t - 1], sems[:, t], noise)
                prev = o.frame
                img = o.frame[0].permute(1, 2, 0).numpy()
                if not np.isfinite(img).all():
                    raise NumericalError(f"generated frame {t} is not finite")
                _save_png(tmp / f"frame_{t:04d}.png", scene_forge.frame_to_bytes(img))
                if args.debug:
                    write_flo(tmp / f"flow_{t:04d}.flo", o.flow[0].permute(1, 2, 0).numpy())
                    occ = np.round(255 * o.occlusion[0, 0].clamp(0, 1).numpy()).astype(np.uint8)
                    _save_png(tmp / f"occ_{t:04d}.png", occ)
        _write_json(tmp / "inputs.json", {
            "command": "generate", "arguments": _arg_echo(args),
            "inputs": inputs_manifest({"ckpt": args.ckpt, "ref": args.ref, "maps": args.maps}),
        })
    print(f"wrote {args.frames - 1} generated frames plus the reference to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    args.seed = resolve_seed(args.seed)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(metrics) - {"fid", "fvd", "miou"}
    if unknown or not metrics:
        raise ValidationError(f"unknown metrics: {sorted(unknown) or 'none given'}")
    state = trainer.load_checkpoint(args.ckpt, restore_rng=False)
    ds = scene_forge.read_dataset(args.data)
    if ds.num_classes != state.model.generator.num_classes:
        raise ValidationError(f"dataset has {ds.num_classes} classes, checkpoint expects "
                              f"{state.model.generator.num_classes}")
    samples = list(ds)
    torch.manual_seed(args.seed)
    fake, maps = trainer.generate_sequences(state.generator, samples, scale=state.data_scale)
    real = torch.cat([trainer.upscale_batch(trainer.make_batch([s]), state.data_scale).frames
                      for s in samples])
    report = {"seed": args.seed,
              "config_digest": trainer.config_digest(trainer._config_echo(state)),
              "dataset_digest": tree_digest(args.data),
              "note": FID_NOTE}
    if "fid" in metrics:
        report["fid"] = evaluator.fid(real[:, 1:].flatten(0, 1), fake[:, 1:].flatten(0, 1))
    if "fvd" in metrics:
        length = min(8, real.shape[1])
        report["fvd"] = evaluator.fvd(evaluator.video_clips(real, length), evaluator.video_clips(fake, length))
    if "miou" in metrics:
        if args.segmenter:
            seg = evaluator.load_segmenter(args.segmenter)
        else:
            seg = evaluator.train_eval_segmenter(real.flatten(0, 1), maps.flatten(0, 1),
                                                 ds.num_classes, seed=args.seed)
        cm = evaluator.ConfusionMatrix(ds.num_classes)
        cm.update(maps[:, 1:].numpy(), seg.predict(fake[:, 1:].flatten(0, 1)).numpy())
        mean, per_class = evaluator.miou(cm)
        report["miou"] = mean
        report["per_class_iou"] = [None if math.isnan(v) else float(v) for v in per_class]
        report["segmenter"] = {"checksum": seg.checksum, "val_miou": seg.val_miou}
    for key in ("fid", "fvd", "miou"):
        if key in report and not math.isfinite(report[key]):
            raise NumericalError(f"{key} is not finite")
    report["inputs"] = inputs_manifest({"ckpt": args.ckpt, "data": args.data, "segmenter": args.segmenter})
    atomic_write_json(args.report, report)
    print(json.dumps({k: report[k] for k in ("fid", "fvd", "miou") if k in report}))
    return EXIT_OK


def cmd_grow(args) -> int:
    state = trainer.load_checkpoint(args.ckpt)
    grown = trainer.spatial_progression(state)
    out = Path(args.out)
    trainer.save_checkpoint(grown, out)
    atomic_write_json(out.with_name(out.stem + ".inputs.json"), {
        "command": "grow", "arguments": _arg_echo(args),
        "inputs": inputs_manifest({"ckpt": args.ckpt})})
    print(f"grown generator (x{2 ** grown.model.generator.grown}) written to {out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svsgan", description="Semantic video synthesis toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("make-data", help="render a synthetic scene dataset")
    m.add_argument("--out", required=True, help="output dataset directory")
    m.add_argument("--scenes", type=int, default=16, help="number of sequences")
    m.add_argument("--frames", type=int, default=8, help="frames per sequence")
    m.add_argument("--size", default="64x32", help="frame size as WxH")
    m.add_argument("--classes", type=int, default=4, help="semantic classes including background")
    m.add_argument("--seed", type=int, help="scene seed (default: $SVS_SEED or 0)")
    m.add_argument("--max-speed", type=int, default=2, help="largest per-axis shape speed in pixels/frame")
    m.add_argument("--ego-speed", type=int, default=0, help="largest per-axis camera speed (0: static)")
    m.add_argument("--subpixel", action="store_true", help="continuous rather than integer velocities")
    m.set_defaults(func=cmd_make_data)

    t = sub.add_parser("train", help="train a generator and discriminators")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--out", required=True, help="run directory (config echo, log, checkpoint)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--ablation", choices=sorted(config_mod.ABLATIONS), default="full",
                   help="full model, patch discriminator (no_oasis) or label-concat generator (no_spade)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    t.add_argument("--seed", type=int, help="run seed; beats $SVS_SEED, which beats the config file")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="autoregressive inference from a reference frame")
    g.add_argument("--ckpt", required=True, help="checkpoint archive")
    g.add_argument("--ref", required=True, help="reference frame image (frame 0)")
    g.add_argument("--maps", required=True, help="directory of sem_%%04d.png label maps")
    g.add_argument("--out", required=True, help="output directory for frame_%%04d.png")
    g.add_argument("--frames", type=int, required=True, help="total frames including the reference")
    g.add_argument("--seed", type=int, help="noise seed (default: $SVS_SEED or 0)")
    g.add_argument("--debug", action="store_true", help="also write predicted flow (.flo) and occlusion maps")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="FID / FVD / mIoU of generated sequences")
    e.add_argument("--ckpt", required=True, help="checkpoint archive")
    e.add_argument("--data", required=True, help="dataset directory of real sequences")
    e.add_argument("--metrics", default="fid,fvd,miou", help="comma-separated subset of fid,fvd,miou")
    e.add_argument("--report", required=True, help="output report.json path")
    e.add_argument("--segmenter", help="frozen segmenter file (default: train one on the real frames)")
    e.add_argument("--seed", type=int, help="seed for noise and segmenter training (default: $SVS_SEED or 0)")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("grow", help="append a resolution-doubling block to a checkpoint")
    w.add_argument("--ckpt", required=True, help="input checkpoint archive")
    w.add_argument("--out", required=True, help="output checkpoint archive")
    w.set_defaults(func=cmd_grow)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:  # includes config and dimension errors
        code, msg = EXIT_VALIDATION, str(exc)
    except OSError as exc:
        code, msg = EXIT_IO, str(exc)
    except (NumericalError, ArithmeticError) as exc:
        code, msg = EXIT_NUMERICAL, str(exc)
    print(f"svsgan: error: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
