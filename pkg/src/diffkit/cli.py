"""Command-line entry points.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as tn
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, coerce, config_hash, parse_config, parse_text
from .data import (
    Batch,
    ChannelStats,
    Dataset,
    LoaderConfig,
    array_batches,
    batches,
    compute_stats,
    load_cifar10,
    load_image_folder,
    normalize,
)
from .diffusion import train
from .errors import ConfigError, DataFormatError, NumericError
from .latent import VAE, encode_dataset, latent_scale, save_latents, vae_train_step
from .metrics import RandomConvExtractor, TinyClassifier, collect, fid, fit_gaussian, inception_score, train_classifier
from .optim import OptimizerState
from .report import plot_loss, plot_schedules, write_samples
from .rng import Rng
from .sampler import generate
from .schedule import ScheduleConfig, build_schedule, dump_rows
from .unet import UNet

logger = logging.getLogger("diffkit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# -- config plumbing -------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    group = p.add_argument_group("config overrides (one flag per config key)")
    for f in fields(RunConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None,
                           metavar="VALUE")


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def _read_text(path: Optional[Path]) -> str:
    if path is None:
        return ""
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    return path.read_text()


def resolve_config(args: argparse.Namespace, base_text: str = "") -> RunConfig:
    """Layer file and flags; an unset ``unet_in_size`` follows the data pipeline output."""
    text = base_text + "\n" + _read_text(getattr(args, "config", None))
    overrides = _overrides(args)
    if "unet_in_size" not in overrides and "unet_in_size" not in parse_text(text):
        probe = {**parse_text(text), **{k: coerce(k, v) for k, v in overrides.items()}}
        size = probe.get("image_size", RunConfig.image_size)
        factor = probe.get("latent_factor", RunConfig.latent_factor)
        overrides["unet_in_size"] = str(size // factor if probe.get("latent", False) else size)
    return parse_config(text, overrides)


def _to_params(arrays: dict[str, np.ndarray]) -> dict[str, tn.Tensor]:
    return {k: tn.parameter(v) for k, v in arrays.items()}


def _write_manifest(path: Path, cfg: RunConfig, command: str, **extra) -> None:
    manifest = {"command": command, "seed": cfg.seed, "config_hash": config_hash(cfg),
                "config": cfg.to_dict(), **extra}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- data ---------------------------------------------------------------------------

def load_dataset(path: Path, image_size: Optional[int]) -> Dataset:
    """CIFAR-10 ``*.bin`` files (or a directory of them) or an image folder."""
    if not path.exists():
        raise FileNotFoundError(f"dataset path {path} not found")
    if path.is_file():
        return load_cifar10([path])
    bins = sorted(path.glob("*.bin"))
    if bins:
        return load_cifar10(bins)
    return load_image_folder(path, image_size)


def _check_dataset(ds: Dataset, cfg: RunConfig) -> None:
    side = ds.images.shape[-1]
    if side != cfg.image_size:
        raise ConfigError(f"image_size: config says {cfg.image_size} but the dataset has {side}x{side} images")
    if not cfg.latent and ds.images.shape[1] != cfg.unet_in_ch:
        raise ConfigError(f"unet_in_ch: {cfg.unet_in_ch} but the dataset has {ds.images.shape[1]} channels")
    if cfg.class_conditional and ds.class_count > cfg.num_classes - 1:
        raise ConfigError(
            f"num_classes: {cfg.num_classes} leaves {cfg.num_classes - 1} real classes, "
            f"dataset has {ds.class_count}"
        )


def _loader_config(cfg: RunConfig, flip: Optional[float] = None) -> LoaderConfig:
    return LoaderConfig(cfg.batch_size, True, cfg.seed, cfg.num_workers,
                        cfg.flip_prob if flip is None else flip, cfg.normalization)


# -- subcommands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(args.data, cfg.image_size)
    _check_dataset(ds, cfg)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    meta: dict = {"kind": "diffusion", "dataset": str(args.data), "class_names": ds.class_names}
    tensors: dict[str, np.ndarray] = {}
    scale = None
    stats = None
    if cfg.normalization == "dataset_standardize":
        stats = compute_stats(ds)
        stats.save(out / "stats.json")
        meta["stats"] = {"mean": stats.mean, "std": stats.std}
    labels = ds.labels if cfg.class_conditional else None
    if cfg.latent:
        if args.vae is None:
            raise ConfigError("latent: true needs --vae CHECKPOINT")
        vae = _load_vae(load_checkpoint(args.vae))
        if vae.latent_channels != cfg.latent_channels or vae.factor != cfg.latent_factor:
            raise ConfigError("latent_channels/latent_factor do not match the VAE checkpoint")
        plain = LoaderConfig(cfg.batch_size, False, cfg.seed, cfg.num_workers, 0.0, cfg.normalization)
        latents, _ = encode_dataset(vae, _all_batches(ds, plain, stats))
        scale = latent_scale(latents)
        vae.scale = scale
        save_latents(out / "latents.dflt", latents, ds.labels)
        scaled = (latents * scale).astype(np.float32)
        loader = lambda epoch: array_batches(scaled, labels, cfg.batch_size, cfg.seed, epoch)  # noqa: E731
        tensors.update({f"vae/{k}": v.data for k, v in vae.params.items()})
        meta["vae"] = {"base_ch": vae.cfg.base_ch}
    else:
        lcfg = _loader_config(cfg)

        def loader(epoch):
            for b in batches(ds, lcfg, epoch, stats):
                if labels is None:
                    b.labels = None
                yield b

    model = UNet(cfg.unet_config(), seed=cfg.seed)
    table = build_schedule(cfg.schedule_config())
    with open(out / "train_log.jsonl", "w") as log:
        model, opt, records = train(model, loader, cfg.train_config(), table, log_file=log)
    tensors.update({f"model/{k}": v.data for k, v in model.params.items()})
    tensors.update({f"opt.m/{k}": v for k, v in opt.m.items()})
    tensors.update({f"opt.v/{k}": v for k, v in opt.v.items()})
    save_checkpoint(out / "checkpoint.dfck", Checkpoint(cfg, tensors, opt.step, scale, meta))
    plot_loss(records, out / "loss.png")
    _write_manifest(out / "manifest.json", cfg, "train", steps=opt.step, data=str(args.data))
    print(json.dumps({"steps": opt.step, "final_loss": records[-1]["loss"], "out": str(out)}))
    return EXIT_OK


def _all_batches(ds: Dataset, lcfg: LoaderConfig, stats):
    """Every image once, in order, including a final partial batch."""
    for i in range(0, len(ds), lcfg.batch_size):
        yield Batch(normalize(ds.images[i : i + lcfg.batch_size], lcfg.normalization, stats),
                    ds.labels[i : i + lcfg.batch_size])


def _load_vae(ckpt: Checkpoint) -> VAE:
    params = ckpt.group("vae")
    if not params:
        raise DataFormatError("checkpoint holds no VAE tensors")
    vcfg = ckpt.config.vae_config()
    vcfg.base_ch = int(ckpt.meta.get("vae", {}).get("base_ch", vcfg.base_ch))
    return VAE(vcfg, _to_params(params), scale=ckpt.latent_scale or 1.0)


def cmd_train_vae(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(args.data, cfg.image_size)
    if ds.images.shape[-1] % cfg.latent_factor:
        raise ConfigError(f"latent_factor: {cfg.latent_factor} does not divide image size {ds.images.shape[-1]}")
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    vae = VAE(cfg.vae_config(), seed=cfg.seed)
    opt = OptimizerState.for_params(vae.params, learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    lcfg = _loader_config(cfg)
    root = Rng(cfg.seed, 0x7AE)
    records = []
    with open(out / "vae_log.jsonl", "w") as log:
        for epoch in range(cfg.num_epochs):
            for batch in batches(ds, lcfg, epoch):
                if cfg.max_steps and opt.step >= cfg.max_steps:
                    break
                recon, kl = vae_train_step(vae, batch, cfg.beta_kl, opt, root.child(opt.step))
                rec = {"step": opt.step, "epoch": epoch, "loss": recon + cfg.beta_kl * kl,
                       "lr": opt.learning_rate, "recon": recon, "kl": kl}
                records.append(rec)
                if opt.step % cfg.log_every == 0:
                    log.write(json.dumps(rec) + "\n")
    plain = LoaderConfig(cfg.batch_size, False, cfg.seed, cfg.num_workers, 0.0, cfg.normalization)
    latents, _ = encode_dataset(vae, _all_batches(ds, plain, None))
    scale = latent_scale(latents)
    tensors = {f"vae/{k}": v.data for k, v in vae.params.items()}
    meta = {"kind": "vae", "vae": {"base_ch": vae.cfg.base_ch}}
    save_checkpoint(out / "vae.dfck", Checkpoint(cfg, tensors, opt.step, scale, meta))
    if records:
        plot_loss(records, out / "vae_loss.png", title="VAE loss")
    _write_manifest(out / "manifest.json", cfg, "train-vae", steps=opt.step, latent_scale=scale)
    print(json.dumps({"steps": opt.step, "latent_scale": scale, "out": str(out)}))
    return EXIT_OK


def _parse_labels(text: Optional[str], n: int) -> Optional[np.ndarray]:
    if not text:
        return None
    values = [int(v) for v in text.replace(",", " ").split()]
    if len(values) == 1:
        values = values * n
    if len(values) != n:
        raise ConfigError(f"--labels: got {len(values)} labels for {n} images")
    return np.asarray(values, dtype=np.int64)


def cmd_sample(args) -> int:
    manifest = {}
    if args.manifest is not None:
        if not args.manifest.is_file():
            raise FileNotFoundError(f"manifest {args.manifest} not found")
        manifest = json.loads(args.manifest.read_text())
    ckpt_path = args.checkpoint or (Path(manifest["checkpoint"]) if "checkpoint" in manifest else None)
    if ckpt_path is None:
        raise ConfigError("sample needs --checkpoint (or a --manifest naming one)")
    ckpt = load_checkpoint(ckpt_path)
    base = ckpt.config
    if manifest:
        base = parse_config("", manifest["config"], env={})
    if args.steps is not None:
        args.cfg_num_inference_steps = str(args.steps)
    from .config import to_text

    cfg = parse_config(to_text(base) + _read_text(args.config), _overrides(args), env={})
    n = args.num_images or manifest.get("num_images", 16)
    labels = _parse_labels(args.labels, n)
    if labels is None and manifest.get("labels") is not None:
        labels = np.asarray(manifest["labels"], dtype=np.int64)
    model = UNet(cfg.unet_config(), _to_params(ckpt.group("model")))
    codec = _load_vae(ckpt) if cfg.latent else None
    stats = None
    if cfg.normalization == "dataset_standardize":
        stats = ChannelStats(**ckpt.meta["stats"])
    table = build_schedule(cfg.schedule_config())
    shape = (n, cfg.unet_in_ch, cfg.unet_in_size, cfg.unet_in_size)
    max_batch = args.max_batch or manifest.get("max_batch") or n
    images = generate(model, table, cfg.sampler_config(), shape, labels, codec, cfg.normalization,
                      stats, max_batch=max_batch)
    out: Path = args.out
    write_samples(images, out)
    _write_manifest(out / "manifest.json", cfg, "sample", checkpoint=str(ckpt_path), num_images=n,
                    labels=None if labels is None else labels.tolist(), max_batch=max_batch)
    print(json.dumps({"num_images": n, "config_hash": config_hash(cfg), "out": str(out)}))
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(args.data, cfg.image_size)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    clf = TinyClassifier(ds.images.shape[1], ds.class_count, width=args.width, seed=cfg.seed)
    opt = OptimizerState.for_params(clf.params, learning_rate=args.lr, weight_decay=0.0)
    lcfg = _loader_config(cfg)
    records = []
    with open(out / "classifier_log.jsonl", "w") as log:
        for epoch in range(cfg.num_epochs):
            for loss in train_classifier(clf, batches(ds, lcfg, epoch), opt):
                rec = {"step": opt.step, "epoch": epoch, "loss": loss, "lr": opt.learning_rate}
                records.append(rec)
                log.write(json.dumps(rec) + "\n")
    meta = {"kind": "classifier", "in_ch": clf.in_ch, "num_classes": clf.num_classes,
            "width": clf.width, "layers": clf.layers}
    tensors = {f"classifier/{k}": v.data for k, v in clf.params.items()}
    save_checkpoint(out / "classifier.dfck", Checkpoint(cfg, tensors, opt.step, None, meta))
    if records:
        plot_loss(records, out / "classifier_loss.png", title="classifier loss")
    print(json.dumps({"steps": opt.step, "out": str(out)}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    real = load_image_folder(args.real, args.image_size)
    gen = load_image_folder(args.gen, args.image_size)
    if real.images.shape[1:] != gen.images.shape[1:]:
        raise ConfigError(
            f"real images {real.images.shape[1:]} and generated {gen.images.shape[1:]} differ; pass --image-size"
        )
    if args.classifier is not None:
        ckpt = load_checkpoint(args.classifier)
        m = ckpt.meta
        extractor = TinyClassifier(m["in_ch"], m["num_classes"], m["width"],
                                   params=_to_params(ckpt.group("classifier")), layers=m["layers"])
    else:
        extractor = RandomConvExtractor(real.images.shape[1], dim=args.features_dim, seed=args.seed)
    f_real, _ = collect(extractor, normalize(real.images).data)
    f_gen, p_gen = collect(extractor, normalize(gen.images).data)
    is_mean, is_std = inception_score(p_gen, splits=min(args.splits, len(p_gen)))
    result = {"fid": fid(fit_gaussian(f_real), fit_gaussian(f_gen)), "is_mean": is_mean,
              "is_std": is_std, "n_real": len(real), "n_gen": len(gen)}
    text = json.dumps(result)
    if args.out is not None:
        args.out.write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_schedule_dump(args) -> int:
    if args.cfg_num_inference_steps is None:
        args.cfg_num_inference_steps = "1"  # sampler steps play no part in a dump
    cfg = resolve_config(args)
    table = build_schedule(cfg.schedule_config())
    sink = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(sink, lineterminator="\n")
        writer.writerow(["t", "beta", "alpha", "alpha_cumprod"])
        for t, beta, alpha, abar in dump_rows(table):
            writer.writerow([t, repr(beta), repr(alpha), repr(abar)])
    finally:
        if args.out:
            sink.close()
    if args.figure:
        tables = [table]
        if args.compare:
            other = "cosine" if table.kind == "linear" else "linear"
            sc = cfg.schedule_config()
            tables.append(build_schedule(ScheduleConfig(sc.beta_start, sc.beta_end, sc.num_train_timesteps,
                                                        other, sc.stability_epsilon)))
        plot_schedules(tables, args.figure)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffkit", description="Desk-scale diffusion toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the noise-prediction UNet")
    t.add_argument("--data", type=Path, required=True, help="CIFAR-10 .bin file(s) or image folder")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--vae", type=Path, help="VAE checkpoint (latent diffusion)")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("train-vae", help="train the latent codec")
    v.add_argument("--data", type=Path, required=True)
    v.add_argument("--out", type=Path, required=True)
    _add_config_flags(v)
    v.set_defaults(func=cmd_train_vae)

    c = sub.add_parser("train-classifier", help="train the tiny CNN used as metric backend")
    c.add_argument("--data", type=Path, required=True)
    c.add_argument("--out", type=Path, required=True)
    c.add_argument("--width", type=int, default=32)
    c.add_argument("--lr", type=float, default=1e-3)
    _add_config_flags(c)
    c.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("sample", help="generate images from a checkpoint")
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--manifest", type=Path, help="re-run from a previous sample manifest")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--num-images", type=int)
    s.add_argument("--labels", help="class label(s), comma separated; one value applies to all")
    s.add_argument("--steps", type=int, help="alias for --num-inference-steps")
    s.add_argument("--max-batch", type=int)
    _add_config_flags(s)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="FID and Inception Score between two image folders")
    e.add_argument("--real", type=Path, required=True)
    e.add_argument("--gen", type=Path, required=True)
    e.add_argument("--out", type=Path)
    e.add_argument("--classifier", type=Path, help="classifier checkpoint; default random conv features")
    e.add_argument("--splits", type=int, default=10)
    e.add_argument("--image-size", type=int)
    e.add_argument("--features-dim", type=int, default=64)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    sc = sub.add_parser("schedule", help="noise schedule utilities")
    sc_sub = sc.add_subparsers(dest="schedule_command", required=True)
    d = sc_sub.add_parser("dump", help="CSV of t,beta,alpha,alpha_cumprod")
    d.add_argument("--out", type=Path, help="CSV path (default stdout)")
    d.add_argument("--figure", type=Path, help="also render a PNG of the schedule")
    d.add_argument("--compare", action="store_true", help="overlay the other schedule kind")
    _add_config_flags(d)
    d.set_defaults(func=cmd_schedule_dump)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
