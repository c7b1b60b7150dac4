"""Command-line jobs: train, score, evaluate, fuse, features.

Settings come from (lowest to highest priority) a flat ``key=value`` config
file, ``SHRINKSV_<KEY>`` environment variables, and command-line flags.
Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import tensor
from .amsoftmax import AmSoftmax
from .audio_io import load_speaker_dataset, parse_trial_list, read_wav
from .augment import NoiseCorpusIndex
from .dsp import log_mel_features, write_feature_cache
from .errors import AlignmentError, ConfigurationError
from .shrinkage import ModelConfig, SpeakerNet
from .trainer import TrainConfig, load_checkpoint, train
from .verification import (DcfParams, ScoreSet, attach_labels, embed_crops, evaluation_report,
                           normalize_and_fuse, pair_score, read_scores, write_scores)

log = logging.getLogger("shrinksv")

ENV_PREFIX = "SHRINKSV_"
REQUIRED = object()


def _bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    return tuple(int(v) for v in str(text).split(","))


def _opt_float(text):
    return None if str(text).lower() in ("", "none", "off") else float(text)


COMMON = {"seed": (int, 0), "workers": (int, 1), "precision": (str, None)}

SCHEMAS = {
    "train": {
        "dataset": (Path, REQUIRED), "output": (Path, REQUIRED),
        "variant": (str, "Q"), "pooling": (str, "SAP"),
        "channels": (_ints, None), "blocks": (_ints, None), "n_mels": (int, 64),
        "embed_dim": (int, 512), "attention_dim": (int, 128),
        "margin": (float, 0.2), "scale": (float, 30.0),
        "augment": (_bool, False), "corpus": (Path, None),
        "epochs": (int, 200), "batch_size": (int, 50), "lr": (float, 0.001), "lr_decay": (float, 0.9),
        "crop_len": (int, 32000), "grad_clip": (_opt_float, None),
    },
    "score": {"checkpoint": (Path, REQUIRED), "trials": (Path, REQUIRED),
              "wav_root": (Path, REQUIRED), "output": (Path, REQUIRED)},
    "evaluate": {"scores": (Path, REQUIRED), "trials": (Path, REQUIRED), "output": (Path, None)},
    "fuse": {"scores_a": (Path, REQUIRED), "scores_b": (Path, REQUIRED), "trials": (Path, REQUIRED),
             "output": (Path, REQUIRED), "w_a": (float, 0.3), "w_b": (float, 0.7)},
    "features": {"wav_root": (Path, REQUIRED), "output": (Path, REQUIRED)},
}


def read_config(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


def resolve(command: str, config_path, flags: dict) -> dict:
    schema = {**COMMON, **SCHEMAS[command]}
    raw = read_config(config_path) if config_path else {}
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigurationError(f"unknown key: {unknown[0]}")
    for key in schema:
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            raw[key] = env
    raw.update({k: v for k, v in flags.items() if v is not None})
    settings = {}
    for key, (kind, default) in schema.items():
        if key not in raw:
            if default is REQUIRED:
                raise ConfigurationError(f"missing key: {key}")
            settings[key] = default
            continue
        try:
            settings[key] = kind(raw[key]) if raw[key] is not None else None
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad value for {key}: {raw[key]!r} ({exc})") from None
    if settings["precision"] not in (None, "f32", "f64"):
        raise ConfigurationError(f"bad value for precision: {settings['precision']!r}")
    return settings


def _require_dir(path, key):
    if not Path(path).is_dir():
        raise ConfigurationError(f"{key}: {path} is not a directory")


def _require_file(path, key):
    if not Path(path).is_file():
        raise ConfigurationError(f"{key}: {path} does not exist")


# ---------------------------------------------------------------- commands

def cmd_train(s: dict) -> int:
    _require_dir(s["dataset"], "dataset")
    if s["augment"]:
        if s["corpus"] is None:
            raise ConfigurationError("missing key: corpus (required when augment=true)")
        _require_dir(s["corpus"], "corpus")
    items, speakers = load_speaker_dataset(s["dataset"])
    if not items:
        raise ConfigurationError(f"dataset: no WAV files under {s['dataset']}")
    overrides = {"n_mels": s["n_mels"]}
    if s["channels"]:
        overrides["stage_channels"] = s["channels"]
    if s["blocks"]:
        overrides["blocks_per_stage"] = s["blocks"]
    model_cfg = ModelConfig.preset(s["variant"], s["pooling"], attention_dim=s["attention_dim"],
                                   embed_dim=s["embed_dim"], **overrides)
    config = TrainConfig(batch_size=s["batch_size"], initial_lr=s["lr"], lr_decay=s["lr_decay"],
                         epochs=s["epochs"], crop_len=s["crop_len"], seed=s["seed"],
                         augment=s["augment"], grad_clip=s["grad_clip"])
    rng = np.random.default_rng(s["seed"])
    model = SpeakerNet(model_cfg, rng)
    loss = AmSoftmax(model_cfg.embed_dim, len(speakers), rng, s["margin"], s["scale"])
    index = NoiseCorpusIndex.from_root(s["corpus"]) if s["augment"] else None
    log.info("training %s/%s on %d utterances from %d speakers", model_cfg.trunk.variant,
             model_cfg.pooling, len(items), len(speakers))
    result = train(config, model, loss, items, index, out_dir=s["output"])
    log.info("wrote %d checkpoints and %s", len(result.checkpoints), Path(s["output"]) / "metrics.csv")
    return 0


def _file_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def cmd_score(s: dict) -> int:
    _require_file(s["checkpoint"], "checkpoint")
    _require_file(s["trials"], "trials")
    trials = parse_trial_list(s["trials"])
    root = Path(s["wav_root"])
    utts = list(dict.fromkeys(u for t in trials for u in (t.enroll_utt, t.test_utt)))
    missing = [u for u in utts if not (root / u).is_file()]
    if missing:
        log.error("missing WAV: %s (%d missing in total)", root / missing[0], len(missing))
        return 1
    model = load_checkpoint(s["checkpoint"])
    ckpt_hash = _file_hash(s["checkpoint"])
    cache = {}

    def work(utt):
        return utt, embed_crops(model, read_wav(root / utt))

    with ThreadPoolExecutor(max_workers=max(1, s["workers"])) as pool:
        for utt, crops in pool.map(work, utts):
            cache[(ckpt_hash, utt)] = crops
    lookups = 2 * len(trials)
    log.info("embedded %d utterances, cache hits %d", len(utts), lookups - len(utts))
    scores = [pair_score(cache[(ckpt_hash, t.enroll_utt)], cache[(ckpt_hash, t.test_utt)]) for t in trials]
    write_scores(s["output"], ScoreSet([t.enroll_utt for t in trials], [t.test_utt for t in trials], scores))
    log.info("wrote %d scores to %s", len(trials), s["output"])
    return 0


def cmd_evaluate(s: dict) -> int:
    _require_file(s["scores"], "scores")
    _require_file(s["trials"], "trials")
    scores = attach_labels(read_scores(s["scores"]), parse_trial_list(s["trials"]))
    report = evaluation_report(scores, DcfParams())
    sys.stdout.write(report)
    if s["output"]:
        Path(s["output"]).write_text(report, encoding="utf-8")
    return 0


def cmd_fuse(s: dict) -> int:
    for key in ("scores_a", "scores_b", "trials"):
        _require_file(s[key], key)
    trials = parse_trial_list(s["trials"])
    a = attach_labels(read_scores(s["scores_a"]), trials)
    b = attach_labels(read_scores(s["scores_b"]), trials)
    fused = normalize_and_fuse(a, b, s["w_a"], s["w_b"])
    write_scores(s["output"], fused)
    log.info("fused with weights w_a=%g w_b=%g into %s", s["w_a"], s["w_b"], s["output"])
    sys.stdout.write(f"weights w_a={s['w_a']:g} w_b={s['w_b']:g}\n")
    return 0


def cmd_features(s: dict) -> int:
    _require_dir(s["wav_root"], "wav_root")
    root, out = Path(s["wav_root"]), Path(s["output"])
    wavs = sorted(root.rglob("*.wav"))

    def work(wav):
        target = out / wav.relative_to(root).with_suffix(".feat")
        target.parent.mkdir(parents=True, exist_ok=True)
        write_feature_cache(target, log_mel_features(read_wav(wav)))

    with ThreadPoolExecutor(max_workers=max(1, s["workers"])) as pool:
        list(pool.map(work, wavs))
    log.info("wrote %d feature files under %s", len(wavs), out)
    return 0


COMMANDS = {"train": cmd_train, "score": cmd_score, "evaluate": cmd_evaluate,
            "fuse": cmd_fuse, "features": cmd_features}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="parallel utterance workers")
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="shrinksv", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, parents=[common])
        for key in schema:
            p.add_argument("--" + key.replace("_", "-"), dest=key)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        settings = resolve(args.command, args.config, flags)
    except (ConfigurationError, OSError) as exc:
        print(f"shrinksv {args.command}: {exc}", file=sys.stderr)
        return 2
    previous = tensor.get_dtype()
    if settings["precision"]:
        tensor.set_precision(settings["precision"])
    try:
        return COMMANDS[args.command](settings)
    except ConfigurationError as exc:
        print(f"shrinksv {args.command}: {exc}", file=sys.stderr)
        return 2
    except (AlignmentError, OSError, ValueError, ArithmeticError) as exc:
        print(f"shrinksv {args.command}: {exc}", file=sys.stderr)
        return 1
    finally:
        tensor.set_precision("f64" if previous is np.float64 else "f32")


if __name__ == "__main__":
    sys.exit(main())
