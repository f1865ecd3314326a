"""``cyclecap`` command line.

Exit codes: 0 success, 2 bad arguments or configuration, 3 bad data or
checkpoint, 4 training aborted.  Failures print one line to stderr of the
form ``error: <ErrorClass>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (DEFAULT_T, CaptionDataset, DataError, SynthConfig, detokenize, load_png,
                   preprocess_caption, save_png, synth_generate)
from .losses import LossWeights, cycle_terms
from .metrics import (EvalPair, MetricReport, binomial_test_two_sided, corpus_scores, inception_score,
                      reports_to_csv, reports_to_table)
from .models import PRESETS, ModelConfig, preset_config
from .training import (Checkpoint, CheckpointError, TrainConfig, Trainer, TrainingAborted, load_checkpoint)

DATA_ENV = "CYCAP_DATA_DIR"

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_ABORT = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config

def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_floats(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(","))


CONFIG_KEYS = {
    "preset": str, "seed": int, "caption_length": int,
    "epochs_pretrain": int, "epochs_main": int, "epochs_encoder": int, "batch_size": int,
    "lr": float, "encoder_lr": float, "captioner_lr": float, "betas": _parse_floats, "weight_decay": float,
    "lambda_kl": float, "lambda1": float, "lambda2": float, "lambda3": float,
    "pairing": str, "cycle_enabled": _parse_bool, "tau": float, "shuffle_seed": int,
}
MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"vocab_size", "image_size", "caption_length"}


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _convert(key: str, value):
    if key in CONFIG_KEYS:
        conv = CONFIG_KEYS[key]
    elif key in MODEL_KEYS:
        default = next(f.default for f in fields(ModelConfig) if f.name == key)
        conv = _parse_floats if isinstance(default, tuple) else type(default)
    else:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        if conv is _parse_floats and key == "encoder_channels":
            return tuple(int(v) for v in _parse_floats(value))
        return conv(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None


def resolve_config(args) -> dict:
    """File values first, then any flag the user actually passed."""
    resolved = {"preset": "smoke", "seed": 0, "caption_length": DEFAULT_T}
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            resolved[k] = _convert(k, v)
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            resolved[key] = _convert(key, v)
    if getattr(args, "no_cycle", False):
        resolved["cycle_enabled"] = False
    if getattr(args, "unpaired", False):
        resolved["pairing"] = "unpaired"
    return resolved


def train_config_from(resolved: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)} - {"weights"}
    weights = LossWeights(**{k: resolved[k] for k in ("lambda_kl", "lambda1", "lambda2", "lambda3") if k in resolved})
    return TrainConfig(weights=weights, **{k: v for k, v in resolved.items() if k in names})


def model_config_from(resolved: dict, dataset: CaptionDataset) -> ModelConfig:
    overrides = {k: v for k, v in resolved.items() if k in MODEL_KEYS}
    return preset_config(resolved.get("preset", "smoke"), vocab_size=len(dataset.vocab),
                         image_size=int(dataset.images.shape[-1]), caption_length=dataset.T, **overrides)


def write_resolved(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for k in sorted(resolved):
        v = resolved[k]
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- helpers

def _data_dir(args) -> Path:
    path = args.data or os.environ.get(DATA_ENV)
    if not path:
        raise ConfigError(f"no dataset given (use --data or set {DATA_ENV})")
    return Path(path)


def _load_dataset(path: Path, T: int) -> CaptionDataset:
    if not path.is_dir():
        raise DataError(f"dataset directory not found: {path}")
    return CaptionDataset.load(path, T=T)


def _load_image(path, size: int) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    try:
        pixels = load_png(path)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    if pixels.shape[1:] != (size, size):
        raise DataError(f"image {path} is {pixels.shape[2]}x{pixels.shape[1]}, model expects {size}x{size}")
    return pixels


def _checkpoint(path) -> Checkpoint:
    ckpt = load_checkpoint(path)
    if not ckpt.header.get("encoder_frozen"):
        raise CheckpointError(f"checkpoint {path} has no trained image encoder")
    return ckpt


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    out = Path(args.out)
    if (out / "manifest.json").exists():
        raise DataError(f"{out} already contains a dataset")
    manifest = synth_generate(args.n, args.seed, out, SynthConfig(image_size=args.image_size))
    n_test = sum(r["split"] == "test" for r in manifest.records)
    print(f"wrote {len(manifest.records)} images ({n_test} test) to {out}")
    return EXIT_OK


def _trainer(args, resolved, dataset, out: Path, model_cfg=None) -> Trainer:
    cfg = train_config_from(resolved)
    mcfg = model_cfg or model_config_from(resolved, dataset)
    return Trainer(dataset, mcfg, cfg, out_dir=out)


def _maybe_resume(trainer: Trainer, out: Path, resume: bool) -> bool:
    last = out / "last.ckpt"
    if resume and last.is_file():
        trainer.restore(load_checkpoint(last))
        trainer.truncate_logs()
        return True
    for name in ("losses.csv", "eval.csv"):
        if (out / name).exists():
            (out / name).unlink()
    return False


def cmd_pretrain(args) -> int:
    resolved = resolve_config(args)
    dataset = _load_dataset(_data_dir(args), resolved["caption_length"])
    out = Path(args.out)
    write_resolved(out, {**resolved, "data": str(_data_dir(args))})
    trainer = _trainer(args, resolved, dataset, out)
    _maybe_resume(trainer, out, args.resume)
    for phase, name in (("encoder", None), ("captioner", "phase1.ckpt"), ("t2i", "phase2.ckpt")):
        if phase not in trainer.phases_done:
            trainer.run_phase(phase)
        if name:
            trainer.save(out / name)
    trainer.save(out / "pretrain.ckpt")
    stats = trainer.evaluate()
    print(f"pretraining done: colour accuracy {stats['color_accuracy']:.3f}, "
          f"held-out cycle image loss {stats['heldout_cycle_image']:.4f}")
    print(f"checkpoint: {out / 'pretrain.ckpt'}")
    return EXIT_OK


def cmd_train(args) -> int:
    resolved = resolve_config(args)
    ckpt = _checkpoint(args.from_pretrain)
    missing = {"encoder", "captioner", "t2i"} - set(ckpt.header.get("phases_done", []))
    if missing:
        raise CheckpointError(f"{args.from_pretrain} is missing pretraining phases: {', '.join(sorted(missing))}")
    if args.seed is None and not getattr(args, "config", None):
        resolved["seed"] = ckpt.header["train_config"]["seed"]
    dataset = _load_dataset(_data_dir(args), ckpt.model_config.caption_length)
    out = Path(args.out)
    write_resolved(out, {**resolved, "data": str(_data_dir(args)), "from_pretrain": str(args.from_pretrain)})
    trainer = _trainer(args, resolved, dataset, out, model_cfg=ckpt.model_config)
    if not _maybe_resume(trainer, out, args.resume):
        trainer.restore(ckpt, reset_phase=True)
    trainer.run_phase("main")
    trainer.save(out / "main.ckpt")
    first, last = trainer.eval_rows[0], trainer.eval_rows[-1]
    print(f"main training done ({'cycle' if trainer.cfg.cycle_enabled else 'no-cycle'}): "
          f"held-out cycle image loss {first['heldout_cycle_image']:.4f} -> {last['heldout_cycle_image']:.4f}, "
          f"colour accuracy {first['color_accuracy']:.3f} -> {last['color_accuracy']:.3f}")
    print(f"checkpoint: {out / 'main.ckpt'}")
    return EXIT_OK


def cmd_caption(args) -> int:
    ckpt = _checkpoint(args.ckpt)
    bundle = ckpt.bundle()
    pixels = _load_image(args.image, bundle.cfg.image_size)
    with ad.precision(np.float32):
        ids = bundle.greedy_caption(Tensor(pixels[None]))[0]
    print(detokenize(ids, ckpt.vocab))
    return EXIT_OK


def _image_from_caption(bundle, caption_ids: np.ndarray, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    cfg = bundle.cfg
    with ad.precision(np.float32), ad.no_grad():
        _, ca = bundle.encode_text(caption_ids[None], eps=rng.standard_normal((1, cfg.cond_dim)))
        return bundle.image_from_text(ca.c, rng.standard_normal((1, cfg.latent_dim))).data[0]


def cmd_imagine(args) -> int:
    ckpt = _checkpoint(args.ckpt)
    bundle = ckpt.bundle()
    try:
        ids = preprocess_caption(args.text, ckpt.vocab, bundle.cfg.caption_length)
    except DataError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(_image_from_caption(bundle, ids, args.seed), out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_cycle(args) -> int:
    ckpt = _checkpoint(args.ckpt)
    bundle = ckpt.bundle()
    pixels = _load_image(args.image, bundle.cfg.image_size)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    weights = ckpt.train_config.weights
    with ad.precision(np.float32), ad.no_grad():
        x = Tensor(pixels[None])
        ids = bundle.greedy_caption(x)
        regen = _image_from_caption(bundle, ids[0], args.seed)
        feats = bundle.image_encode(Tensor(regen[None]))
        back = bundle.caption_from_image(None, mode="teacher_forced", reference=ids, feats=feats)
        terms = cycle_terms(x, Tensor(regen[None]), back.logits, ids, bundle.image_encode, weights)
    text = detokenize(ids[0], ckpt.vocab)
    (out / "caption.txt").write_text(text + "\n", encoding="utf-8")
    save_png(regen, out / "regenerated.png")
    breakdown = terms.breakdown()
    (out / "cycle_loss.json").write_text(json.dumps(breakdown, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(text)
    for k, v in breakdown.items():
        print(f"{k} {v!r}")
    return EXIT_OK


def evaluate_checkpoint(ckpt: Checkpoint, dataset: CaptionDataset, n_refs: int = 10, splits: int = 5,
                        seed: int = 0, split: str = "test") -> MetricReport:
    """Greedy captions scored against the references; images from test captions scored by F_IE."""
    bundle = ckpt.bundle()
    if bundle.cfg.vocab_size != len(dataset.vocab) or ckpt.vocab != dataset.vocab:
        raise DataError("dataset vocabulary does not match the checkpoint")
    idx = dataset.indices(split)
    rng = np.random.default_rng(seed)
    pairs, generated = [], []
    with ad.precision(np.float32), ad.no_grad():
        for s in range(0, len(idx), 128):
            part = idx[s:s + 128]
            x = Tensor(dataset.images[part].astype(np.float32))
            for i, row in zip(part, bundle.greedy_caption(x)):
                refs = [dataset.vocab.decode(c) for c in dataset.captions[i][:n_refs]]
                pairs.append(EvalPair(dataset.vocab.decode(row), refs))
            caps = np.stack([dataset.pick_caption(int(i), rng) for i in part])
            _, ca = bundle.encode_text(caps, eps=rng.standard_normal((len(part), bundle.cfg.cond_dim)))
            z = rng.standard_normal((len(part), bundle.cfg.latent_dim))
            generated.append(bundle.image_from_text(ca.c, z).data)
    images = np.concatenate(generated)
    classifier = lambda batch: bundle.image_encoder.class_probs(Tensor(batch.astype(np.float32)), "shape")
    is_mean, is_std = inception_score(images, classifier, splits=min(splits, len(images)))
    return MetricReport(inception_mean=is_mean, inception_std=is_std, **corpus_scores(pairs))


def cmd_eval(args) -> int:
    out = Path(args.out)
    reports = {}
    for spec in args.ckpt:
        name, _, path = spec.rpartition("=") if "=" in spec else (Path(spec).parent.name or "model", "", spec)
        ckpt = _checkpoint(path)
        dataset = _load_dataset(_data_dir(args), ckpt.model_config.caption_length)
        reports[name] = evaluate_checkpoint(ckpt, dataset, n_refs=args.refs, splits=args.splits, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out, {"ckpt": ";".join(args.ckpt), "data": str(_data_dir(args)), "refs": args.refs,
                         "splits": args.splits, "seed": args.seed})
    (out / "metrics.csv").write_text(reports_to_csv(reports), encoding="utf-8")
    table = reports_to_table(reports)
    (out / "metrics.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_binom(args) -> int:
    print(f"{binomial_test_two_sided(args.k, args.n, args.p0):.4g}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--epochs-pretrain", dest="epochs_pretrain", type=int)
    p.add_argument("--epochs-main", dest="epochs_main", type=int)
    p.add_argument("--epochs-encoder", dest="epochs_encoder", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt if present")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cyclecap", description="Cycle-consistent image/caption GAN training at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="render a synthetic shapes corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", dest="image_size", type=int, default=32)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="encoder, captioner and text-to-image pretraining")
    p.add_argument("--data", help=f"dataset directory (default: ${DATA_ENV})")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="joint training from a pretraining checkpoint")
    p.add_argument("--data", help=f"dataset directory (default: ${DATA_ENV})")
    p.add_argument("--from-pretrain", dest="from_pretrain", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-cycle", dest="no_cycle", action="store_true", help="drop the cycle-consistency terms")
    p.add_argument("--unpaired", action="store_true", help="shuffle captions away from their images")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="caption one PNG image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("imagine", help="generate a PNG from text")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="imagined.png")
    p.set_defaults(func=cmd_imagine)

    p = sub.add_parser("cycle", help="image -> caption -> image round trip")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_cycle)

    p = sub.add_parser("eval", help="caption metrics and inception score on the test split")
    p.add_argument("--ckpt", required=True, action="append", help="PATH or NAME=PATH; repeatable")
    p.add_argument("--data", help=f"dataset directory (default: ${DATA_ENV})")
    p.add_argument("--out", required=True)
    p.add_argument("--refs", type=int, default=10, help="references per image")
    p.add_argument("--splits", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="significance tests")
    stats = p.add_subparsers(dest="test", required=True, parser_class=_Parser)
    b = stats.add_parser("binom", help="exact two-sided binomial test")
    b.add_argument("--k", type=int, required=True)
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--p0", type=float, default=0.5)
    b.set_defaults(func=cmd_binom)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"error: {exc.__class__.__name__}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        # checkpoints are float32, so the commands run there whatever the caller's default
        with ad.precision(np.float32):
            return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_ARGS, exc)
    except TrainingAborted as exc:
        return _fail(EXIT_ABORT, exc)
    except (DataError, CheckpointError, ad.ShapeError) as exc:
        return _fail(EXIT_DATA, exc)
    except ValueError as exc:
        return _fail(EXIT_ARGS, exc)


if __name__ == "__main__":
    sys.exit(main())
