"""Command-line surface: datagen, train, eval-retrieval, eval-grounding, heatmaps.

Every command is deterministic given its inputs and seed, writes its outputs
under --out, and records a run_manifest.json beside them with the resolved
configuration, the seed, git-style content hashes of the input files, and
start/finish timestamps. Exit codes: 0 success, 1 runtime failure, 2 usage
or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .data import Dataset, generate_synthetic_corpus
from .encoders import ModelConfig
from .errors import ContractError
from .evaluation import (DEFAULT_TOPK, default_heatmap_layer, export_heatmaps,
                         ground_corpus, mlm_accuracy, retrieve)
from .objectives import AlignmentModel
from .training import AblationFlags, OptimizerState, TrainSettings, train

log = logging.getLogger(__name__)

_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainSettings)}


class UsageError(Exception):
    """Configuration or argument problem; maps to exit code 2."""


# ---------------------------------------------------------------------------
# run manifests

def content_hash(path) -> str:
    """Git blob sha1 of a file: sha1(b"blob <size>\\0" + bytes)."""
    data = Path(path).read_bytes()
    h = hashlib.sha1()
    h.update(b"blob %d\x00" % len(data))
    h.update(data)
    return h.hexdigest()


def _hash_existing(paths: dict[str, Path]) -> dict[str, str]:
    return {name: content_hash(p) for name, p in paths.items() if Path(p).exists()}


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict[str, str]
    started: str
    finished: str = ""

    def write(self, out_dir) -> None:
        self.finished = _utcnow()
        path = Path(out_dir) / "run_manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")


def _dataset_inputs(data_dir, split: str) -> dict[str, Path]:
    root = Path(data_dir)
    return {f"{split}.jsonl": root / f"{split}.jsonl", "vocab.txt": root / "vocab.txt"}


def _checkpoint_inputs(ckpt_dir) -> dict[str, Path]:
    root = Path(ckpt_dir)
    return {"manifest.json": root / "manifest.json", "params.bin": root / "params.bin"}


# ---------------------------------------------------------------------------
# configuration files

def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; blank lines and # comments ignored."""
    raw: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key or not value:
            raise UsageError(f"{path}:{lineno}: empty key or value")
        raw[key] = value
    return raw


def _coerce(field: dataclasses.Field, value: str):
    if field.name in ("pixel_mean", "pixel_std"):
        parts = tuple(float(p) for p in value.split(","))
        if len(parts) != 3:
            raise UsageError(f"{field.name} needs three comma-separated floats, got {value!r}")
        return parts
    if field.type in ("int", int):
        return int(value)
    if field.type in ("float", float):
        return float(value)
    return value


def split_config(raw: dict[str, str]) -> tuple[dict, dict]:
    """Partition raw keys into ModelConfig and TrainSettings overrides."""
    model: dict = {}
    training: dict = {}
    for key, value in raw.items():
        if key == "vocab_size":
            raise UsageError("vocab_size comes from the dataset's vocab.txt; remove it")
        if key in _MODEL_FIELDS:
            try:
                model[key] = _coerce(_MODEL_FIELDS[key], value)
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {value!r} ({exc})") from exc
        elif key in _TRAIN_FIELDS:
            try:
                training[key] = _coerce(_TRAIN_FIELDS[key], value)
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {value!r} ({exc})") from exc
        else:
            raise UsageError(f"unknown config key {key!r}")
    return model, training


def _threads() -> int:
    value = os.environ.get("XGRAIN_THREADS")
    if value is None:
        return 1
    try:
        return max(1, int(value))
    except ValueError as exc:
        raise UsageError(f"XGRAIN_THREADS must be an integer, got {value!r}") from exc


# ---------------------------------------------------------------------------
# commands

def cmd_datagen(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = Path(args.out)
    started = _utcnow()
    summary = generate_synthetic_corpus(seed=args.seed, n_images=args.n, out_dir=out,
                                        image_size=args.image_size, workers=_threads())
    manifest = RunManifest(command="datagen",
                           config={"n": args.n, "image_size": args.image_size,
                                   "summary": summary},
                           seed=args.seed, inputs={}, started=started)
    manifest.write(out)
    print(json.dumps(summary))
    return 0


def _load_dataset(args, split: str | None = None) -> Dataset:
    data_dir = Path(args.data)
    split = split if split is not None else getattr(args, "split", "records")
    if not (data_dir / f"{split}.jsonl").exists():
        raise UsageError(f"no {split}.jsonl under {data_dir}")
    return Dataset.open(data_dir, split=split)


def cmd_train(args) -> int:
    dataset = _load_dataset(args, split="records")
    raw = parse_config_file(args.config) if args.config else {}
    model_overrides, train_overrides = split_config(raw)
    if args.steps is not None:
        if args.steps < 1:
            raise UsageError("--steps must be >= 1")
        train_overrides["total_steps"] = args.steps
    if args.seed is not None:
        train_overrides["seed"] = args.seed
    if "total_steps" in train_overrides and "warmup_steps" not in train_overrides:
        train_overrides["warmup_steps"] = train_overrides["total_steps"] // 10
    settings = TrainSettings(**train_overrides)

    started = _utcnow()
    inputs = _hash_existing(_dataset_inputs(args.data, "records"))
    start_step = 0
    optimizer = None
    if args.resume:
        if not (Path(args.resume) / "manifest.json").exists():
            raise UsageError(f"no checkpoint manifest under {args.resume}")
        model, start_step, arrays = AlignmentModel.load(args.resume)
        if model.cfg.vocab_size != len(dataset.vocab):
            raise UsageError(f"checkpoint vocab {model.cfg.vocab_size} != dataset "
                             f"vocab {len(dataset.vocab)}")
        if arrays is not None:
            optimizer = OptimizerState.from_arrays(model.params(), arrays,
                                                   weight_decay=settings.weight_decay)
        inputs.update({f"resume/{k}": v for k, v in
                       _hash_existing(_checkpoint_inputs(args.resume)).items()})
    else:
        config = ModelConfig(vocab_size=len(dataset.vocab), **model_overrides)
        model = AlignmentModel(config, np.random.default_rng(settings.seed))

    flags = AblationFlags(no_object=args.no_object, no_region=args.no_region,
                          no_bbox_loss=args.no_bbox_loss)
    out = Path(args.out)
    summary = train(model, dataset, settings, out, flags=flags,
                    start_step=start_step, optimizer=optimizer)
    manifest = RunManifest(command="train",
                           config={"model": dataclasses.asdict(model.cfg),
                                   "training": dataclasses.asdict(settings),
                                   "flags": dataclasses.asdict(flags),
                                   "resumed_from_step": start_step},
                           seed=settings.seed, inputs=inputs, started=started)
    manifest.write(out)
    print(json.dumps({"final": summary["final"], "checkpoint": summary["checkpoint"]}))
    return 0


def _load_model(args) -> AlignmentModel:
    ckpt = Path(args.ckpt)
    if not (ckpt / "manifest.json").exists():
        raise UsageError(f"no checkpoint manifest under {ckpt}")
    model, _, _ = AlignmentModel.load(ckpt)
    return model


def _gallery_records(dataset: Dataset, limit: int | None):
    indices = [i for i in range(len(dataset)) if dataset.records[i].caption]
    if limit is not None:
        indices = indices[:limit]
    if not indices:
        raise UsageError("no captioned records in the chosen split")
    return indices


def cmd_eval_retrieval(args) -> int:
    model = _load_model(args)
    dataset = _load_dataset(args)
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    started = _utcnow()
    indices = _gallery_records(dataset, args.limit)
    images = np.stack([dataset.image(i) for i in indices])
    texts = [dataset.records[i].caption for i in indices]
    result = retrieve(model, images, texts, dataset.vocab, k=args.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"k": args.k, "gallery_size": len(indices), **result.as_dict()}
    (out / "retrieval.json").write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    inputs = _hash_existing({**_dataset_inputs(args.data, args.split),
                             **_checkpoint_inputs(args.ckpt)})
    RunManifest(command="eval-retrieval", config={"k": args.k, "split": args.split,
                                                  "limit": args.limit},
                seed=None, inputs=inputs, started=started).write(out)
    print(json.dumps(payload))
    return 0


def cmd_eval_grounding(args) -> int:
    model = _load_model(args)
    dataset = _load_dataset(args)
    started = _utcnow()
    metrics = ground_corpus(model, dataset, max_records=args.limit)
    rng = np.random.default_rng(args.seed)
    metrics["mlm"] = mlm_accuracy(model, dataset, rng, max_records=args.limit)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grounding.json").write_text(json.dumps(metrics, indent=1) + "\n", encoding="utf-8")
    inputs = _hash_existing({**_dataset_inputs(args.data, args.split),
                             **_checkpoint_inputs(args.ckpt)})
    RunManifest(command="eval-grounding", config={"split": args.split, "limit": args.limit},
                seed=args.seed, inputs=inputs, started=started).write(out)
    print(json.dumps(metrics))
    return 0


def cmd_heatmaps(args) -> int:
    model = _load_model(args)
    dataset = _load_dataset(args)
    layer = args.layer if args.layer is not None else default_heatmap_layer(model.cfg.fusion_layers)
    if not 0 <= layer < model.cfg.fusion_layers:
        raise UsageError(f"--layer {layer} outside [0, {model.cfg.fusion_layers})")
    started = _utcnow()
    indices = _gallery_records(dataset, args.limit)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_maps = 0
    for i in indices:
        record = dataset.records[i]
        maps = export_heatmaps(model, dataset.image(i), record.caption, dataset.vocab,
                               layer=layer, out_dir=out, image_id=record.image_id)
        n_maps += len(maps)
    inputs = _hash_existing({**_dataset_inputs(args.data, args.split),
                             **_checkpoint_inputs(args.ckpt)})
    RunManifest(command="heatmaps", config={"layer": layer, "split": args.split,
                                            "limit": args.limit},
                seed=None, inputs=inputs, started=started).write(out)
    print(json.dumps({"images": len(indices), "maps": n_maps, "layer": layer}))
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xgrain",
        description="Multi-grained vision-language alignment at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, required=True, help="number of training images")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="pre-train on a corpus directory")
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--no-object", action="store_true")
    p.add_argument("--no-region", action="store_true")
    p.add_argument("--no-bbox-loss", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-retrieval", help="two-stage retrieval recall")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="heldout")
    p.add_argument("--k", type=int, default=DEFAULT_TOPK)
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-grounding", help="box hit-rate and masked-token accuracy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="heldout")
    p.add_argument("--seed", type=int, default=0, help="masking seed for the MLM metric")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_grounding)

    p = sub.add_parser("heatmaps", help="per-word cross-attention overlays")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="heldout")
    p.add_argument("--layer", type=int)
    p.add_argument("--limit", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmaps)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"run 'xgrain {args.command} --help' for usage", file=sys.stderr)
        return 2
    except (ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
