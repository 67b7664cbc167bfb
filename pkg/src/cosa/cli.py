"""Command line entry point: ``cosa <subcommand> ...``.

Exit codes: 0 success, 1 invalid input (flags, files, schemas), 2 runtime failure.
Relative output paths are resolved under ``$COSA_ARTIFACT_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from .data import MODALITIES, DataError, SyntheticSpec, generate_synthetic, load_dataset, parse_modalities
from .diffcore import CheckpointError, NonFiniteError
from .dpsr import similarity_by_interval
from .trainer import (ABLATION_ROWS, ConfigError, TrainConfig, Trainer, TrainingDiverged, _to_torch,
                      ablate, format_ablation)

log = logging.getLogger("cosa")

ARTIFACT_ROOT_ENV = "COSA_ARTIFACT_ROOT"


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; route those to the validation exit code
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(ARTIFACT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _config_from_args(args) -> TrainConfig:
    doc = _read_json(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        doc[key] = _parse_value(value)
    if args.seed is not None:
        doc["seed"] = args.seed
    if getattr(args, "modalities", None):
        doc["modalities"] = args.modalities
    if getattr(args, "epochs", None) is not None:
        doc["epochs"] = args.epochs
    return TrainConfig.from_dict(doc)


def _open_run(run: Path, data=None) -> tuple[Trainer, dict]:
    run = Path(run)
    if not (run / "config.json").exists():
        raise UsageError(f"{run} is not a run directory (no config.json)")
    config = TrainConfig.from_dict(_read_json(run / "config.json"))
    inputs = _read_json(run / "inputs.json")
    data_path = data or inputs.get("data")
    if not data_path:
        raise UsageError(f"{run}/inputs.json does not record a dataset; pass --data")
    dataset = load_dataset(data_path)
    trainer = Trainer(config, dataset)
    return trainer, inputs


def _load_checkpoint(trainer: Trainer, run: Path, which: str) -> None:
    path = Path(run) / f"{which}.csa1"
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    trainer.load_params(path)


def _split(trainer: Trainer, split: str):
    if split not in trainer.splits:
        raise UsageError(f"dataset has no split {split!r}; available: {sorted(trainer.splits)}")
    return split


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    doc = _read_json(args.spec) if args.spec else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.task:
        doc["task"] = args.task
    known = {f.name for f in fields(SyntheticSpec)}
    unknown = set(doc) - known
    if unknown:
        raise UsageError(f"unknown synthetic spec keys {sorted(unknown)}; known: {sorted(known)}")
    spec = SyntheticSpec(**doc)
    out = _out_path(args.out)
    dataset = generate_synthetic(spec, out)
    print(json.dumps({"manifest": str(out / "manifest.json"), "dataset_hash": dataset.digest()}))
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    data = Path(args.data).resolve()
    dataset = load_dataset(data)
    run = _out_path(args.out)
    if (run / "metrics.jsonl").exists() and not args.resume:
        raise UsageError(f"{run} already holds a run; choose a fresh --out")
    trainer = Trainer(config, dataset, run, extra_inputs={"data": str(data)})
    if args.resume:
        trainer.load_state(args.resume)
    trainer.fit(config.epochs - trainer.epoch if args.resume else None)
    trainer.restore_best()
    summary = {"run": str(run), "best_epoch": trainer.artifacts.best_epoch,
               "best_valid_L_p": trainer.artifacts.best_valid}
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    trainer, _ = _open_run(args.run, args.data)
    _load_checkpoint(trainer, args.run, args.checkpoint)
    split = _split(trainer, args.split)
    out = trainer.forward_split(split)
    report = trainer.metrics(out["pred"], out["labels"])
    doc = {"split": split, "checkpoint": args.checkpoint, **report.to_dict()}
    Path(args.run, f"eval_{split}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(report.table(split) if args.table else json.dumps(doc, sort_keys=True))
    return 0


def _load_matrix(path) -> dict:
    if path is None:
        return dict(ABLATION_ROWS)
    doc = _read_json(path)
    if isinstance(doc, list):
        unknown = [r for r in doc if r not in ABLATION_ROWS]
        if unknown:
            raise UsageError(f"unknown ablation rows {unknown}; known: {list(ABLATION_ROWS)}")
        return {r: ABLATION_ROWS[r] for r in doc}
    if isinstance(doc, dict):
        for row, overrides in doc.items():
            if not isinstance(overrides, dict):
                raise UsageError(f"matrix row {row!r} must map to an object of config overrides")
        return doc
    raise UsageError("matrix must be a list of row names or an object {row: overrides}")


def cmd_ablate(args) -> int:
    config = _config_from_args(args)
    data = Path(args.data).resolve()
    dataset = load_dataset(data)
    matrix = _load_matrix(args.matrix)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = _out_path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        inputs = {"config_hash": config.digest(), "dataset_hash": dataset.digest(),
                  "data": str(data), "matrix": matrix, "seeds": seeds}
        (out / "inputs.json").write_text(json.dumps(inputs, indent=2, sort_keys=True) + "\n")
    table = ablate(config, dataset, matrix, seeds, out, args.workers, args.split)
    text = format_ablation(table, config.task)
    if out is not None:
        (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True, default=str) + "\n")
        (out / "ablation.txt").write_text(text + "\n")
    print(text)
    return 0


def _write_csv(path: Path, header, rows) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
            n += 1
    return n


def _fmt(x: float) -> str:
    return repr(float(x))


def _feature_rows(ids, feats: dict[str, np.ndarray], active):
    for i, sid in enumerate(ids):
        for m in MODALITIES:
            if m not in active:
                continue
            for t, vec in enumerate(feats[m][i]):
                yield [int(sid), m, t, *map(_fmt, vec)]


@torch.no_grad()
def _disentangled(trainer: Trainer, split: str):
    """f_s, f_m and the fused-path f for every sample of ``split``, in file order."""
    net = trainer.net
    net.eval()
    f_s = {m: [] for m in MODALITIES}
    f_m = {m: [] for m in MODALITIES}
    f = {m: [] for m in MODALITIES}
    for batch in trainer.splits[split].batches(trainer.config.batch_size):
        x, _ = _to_torch(batch, trainer.config.task)
        pairs = net.msd.disentangle(x, net.active)
        rep = net.represent(x)
        for m in net.active:
            f_s[m].append(pairs[m].f_s.numpy())
            f_m[m].append(pairs[m].f_m.numpy())
            f[m].append(rep.f[m].numpy())
    cat = lambda d: {m: np.concatenate(v) for m, v in d.items() if v}
    return cat(f_s), cat(f_m), cat(f)


def export_features(trainer: Trainer, split: str, out_dir: Path) -> dict:
    f_s, f_m, _ = _disentangled(trainer, split)
    ids = trainer.splits[split].ids
    h = trainer.config.embed_dim
    header = ["sample_id", "modality", "frame", *[f"h{k}" for k in range(h)]]
    counts = {}
    for name, feats in (("f_s", f_s), ("f_m", f_m)):
        path = out_dir / f"features_{name}_{split}.csv"
        counts[name] = _write_csv(path, header, _feature_rows(ids, feats, trainer.net.active))
    return counts


def export_weights(trainer: Trainer, split: str, out_dir: Path) -> int:
    out = trainer.forward_split(split)
    rows = (
        [int(sid), m, t, _fmt(out["weights"][m][i, t])]
        for i, sid in enumerate(out["ids"]) for m in trainer.net.active
        for t in range(out["weights"][m].shape[1])
    )
    return _write_csv(out_dir / f"weights_{split}.csv", ["sample_id", "modality", "frame", "weight"], rows)


def export_similarity(trainer: Trainer, split: str, out_dir: Path) -> dict:
    """Similarity-by-interval before (f_s) and after (f) the temporal reconstruction."""
    f_s, _, f = _disentangled(trainer, split)
    curves = {}
    for label, feats in (("without_dpsr", f_s), ("with_dpsr", f)):
        if label == "with_dpsr" and not trainer.net.use_dpsr:
            continue
        rows = []
        for m in trainer.net.active:
            sims = similarity_by_interval(feats[m])
            curves.setdefault(label, {})[m] = sims.tolist()
            rows.extend([m, k + 1, _fmt(s)] for k, s in enumerate(sims))
        _write_csv(out_dir / f"similarity_{label}_{split}.csv", ["modality", "interval", "cosine"], rows)
    return curves


def cmd_diagnose(args) -> int:
    trainer, _ = _open_run(args.run, args.data)
    _load_checkpoint(trainer, args.run, args.checkpoint)
    split = _split(trainer, args.split)
    out_dir = Path(args.run) / "exports"
    if args.kind == "similarity":
        result = export_similarity(trainer, split, out_dir)
    elif args.kind == "weights":
        result = {"rows": export_weights(trainer, split, out_dir)}
    else:
        result = {"rows": export_features(trainer, split, out_dir)}
    print(json.dumps({"kind": args.kind, "split": split, "out": str(out_dir), "result": result}))
    return 0


def cmd_export_features(args) -> int:
    args.kind = "features"
    return cmd_diagnose(args)


def cmd_export_weights(args) -> int:
    args.kind = "weights"
    return cmd_diagnose(args)


# ---------------------------------------------------------------------------


def _train_flags(p):
    p.add_argument("--config", help="training config JSON (see SCHEMAS.md)")
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--modalities", help="active modality subset, e.g. VAT, VA, T")


def _run_flags(p, default_split="test"):
    p.add_argument("--run", required=True, type=Path, help="run directory written by 'train'")
    p.add_argument("--split", default=default_split)
    p.add_argument("--data", help="override the dataset recorded in the run")
    p.add_argument("--checkpoint", choices=("best", "last"), default="best")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cosa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--spec", help="synthetic spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--task", choices=("msa", "mer"))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    _train_flags(p)
    p.add_argument("--out", required=True, help="fresh run directory")
    p.add_argument("--resume", help="state checkpoint (state.csa1) to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a trained run on one split")
    _run_flags(p)
    p.add_argument("--table", action="store_true", help="print an aligned text table instead of JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate an ablation matrix")
    _train_flags(p)
    p.add_argument("--matrix", help="JSON list of row names or {row: overrides}")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("diagnose", help="CSV diagnostics of a trained run")
    _run_flags(p)
    p.add_argument("--kind", choices=("similarity", "weights", "features"), required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("export-features", help="dump f_s / f_m per sample and frame")
    _run_flags(p)
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("export-weights", help="dump per-frame fusion weights")
    _run_flags(p)
    p.set_defaults(func=cmd_export_weights)
    return parser


VALIDATION_ERRORS = (UsageError, ConfigError, DataError, CheckpointError, FileNotFoundError, ValueError)
RUNTIME_ERRORS = (TrainingDiverged, NonFiniteError, RuntimeError, OSError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "modalities", None):
        try:
            parse_modalities(args.modalities)
        except DataError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
