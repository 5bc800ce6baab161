"""Command-line entry point.

Every command resolves its configuration as defaults <- ``--config`` file
<- ``--set key=value`` overrides, echoes the resolved configuration into a
``manifest.json`` next to its outputs, and accepts such a manifest as
``--config`` to repeat the run (input paths fall back to the manifest's).

Exit status: 0 success, 1 validation/config error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .covsync import read_field_csv, read_nodes_csv, sync_covariates, write_covariates_csv
from .datasyn import SynthConfig, generate_dataset
from .downstream import WorkflowConfig, pretrain_then_finetune
from .gradcheck import format_table, full_suite
from .graph_stack import LayerStackSample, iter_jsonl, read_jsonl, sample_from_json, validate_sample, write_jsonl
from .model import GraphTransformer, ModelConfig, complete, load_checkpoint, save_checkpoint
from .objective import LossConfig, masked_mae, rmse
from .optim import TrainConfig, fit, split_holdout
from .traces import traces_svg, write_traces_csv

log = logging.getLogger("icestack")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2
LOG_ENV = "ICESTACK_LOG_LEVEL"


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


# configuration ----------------------------------------------------------------------

def _deep_update(base: dict, new: dict) -> dict:
    out = dict(base)
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def _parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise UsageError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def resolve_config(defaults: dict, config_path: Optional[str], overrides: list[str]) -> tuple[dict, dict]:
    """Merge defaults, a config (or manifest) file and overrides; also return manifest inputs."""
    cfg = dict(defaults)
    inputs: dict = {}
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            loaded = json.load(fh)
        if "resolved_config" in loaded:
            inputs = loaded.get("inputs", {})
            loaded = loaded["resolved_config"]
        cfg = _deep_update(cfg, loaded)
    for item in overrides or []:
        keys, value = _parse_override(item)
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return cfg, inputs


def write_manifest(path: Path, command: str, config: dict, seed, inputs: dict, outputs: dict,
                   started: float) -> None:
    manifest = {
        "command": command,
        "resolved_config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "code_version": __version__,
        "duration_s": round(time.time() - started, 3),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)


def _input(args_value, inputs: dict, key: str) -> str:
    value = args_value or inputs.get(key)
    if not value:
        raise UsageError(f"missing required input --{key.replace('_', '-')}")
    return value


def train_defaults() -> dict:
    return {
        "model": asdict(ModelConfig()),
        "train": asdict(TrainConfig()),
        "loss": asdict(LossConfig()),
        "val_fraction": 0.1,
        "epochs": None,
        "checkpoint_every": None,
    }


# commands ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    started = time.time()
    cfg_dict, _ = resolve_config(asdict(SynthConfig()), args.config, args.set)
    cfg = SynthConfig.from_dict(cfg_dict)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data, truth = out / "dataset.jsonl", out / "truth.jsonl"
    generate_dataset(cfg, data, truth)
    write_manifest(out / "manifest.json", "generate", cfg_dict, cfg.seed, {},
                   {"dataset": data, "truth": truth}, started)
    print(f"wrote {cfg.n_samples} samples to {data}")
    return EXIT_OK


def cmd_sync(args) -> int:
    started = time.time()
    from .covsync import FieldCountError
    from .graph_stack import PHYS_FIELDS

    if len(args.fields) != len(PHYS_FIELDS):
        raise FieldCountError(f"sync needs exactly {len(PHYS_FIELDS)} field files ({', '.join(PHYS_FIELDS)}), got {len(args.fields)}")
    fields = [read_field_csv(p, name) for p, name in zip(args.fields, PHYS_FIELDS)]
    nodes = read_nodes_csv(args.nodes)
    cov, flags = sync_covariates(fields, nodes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_covariates_csv(out, cov, flags)
    write_manifest(out.with_name(out.stem + ".manifest.json"), "sync", {}, None,
                   {"fields": ",".join(args.fields), "nodes": args.nodes}, {"covariates": out}, started)
    n_extra = int(flags.any(axis=1).sum())
    print(f"wrote {cov.shape[0]} rows to {out} ({n_extra} extrapolated)")
    return EXIT_OK


def _check_dataset(samples: list[LayerStackSample], path) -> None:
    for i, s in enumerate(samples):
        report = validate_sample(s)
        if report:
            first = report[0]
            raise ValueError(f"{path}: sample {i} ({s.sample_id!r}) invalid: {first.kind} at {first.where} "
                             f"(+{len(report) - 1} more)")


def cmd_train(args) -> int:
    started = time.time()
    cfg, inputs = resolve_config(train_defaults(), args.config, args.set)
    dataset_path = _input(args.dataset, inputs, "dataset")
    model_cfg = ModelConfig.from_dict(cfg["model"])
    train_cfg = TrainConfig.from_dict(cfg["train"])
    loss_cfg = LossConfig(**cfg["loss"])
    samples = read_jsonl(dataset_path)
    _check_dataset(samples, dataset_path)
    train, val = split_holdout(samples, float(cfg["val_fraction"]), train_cfg.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = GraphTransformer(model_cfg, seed=train_cfg.seed)
    fit(model, train, train_cfg, loss="masked_huber", loss_cfg=loss_cfg, val=val, epochs=cfg["epochs"],
        checkpoint_every=cfg["checkpoint_every"], checkpoint_dir=out / "checkpoints",
        metrics_path=out / "metrics.csv")
    ckpt = out / "checkpoint.npz"
    save_checkpoint(ckpt, model, {"val_ids": [s.sample_id for s in val]})
    write_manifest(out / "manifest.json", "train", cfg, train_cfg.seed, {"dataset": dataset_path},
                   {"checkpoint": ckpt, "metrics": out / "metrics.csv"}, started)
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def cmd_complete(args) -> int:
    started = time.time()
    cfg, inputs = resolve_config({}, args.config, args.set)
    ckpt = _input(args.checkpoint, inputs, "checkpoint")
    dataset_path = _input(args.dataset, inputs, "dataset")
    model, _ = load_checkpoint(ckpt)
    samples = read_jsonl(dataset_path)
    _check_dataset(samples, dataset_path)
    preds = model.predict(samples)
    done, extras = [], []
    for s, p in zip(samples, preds):
        filled = complete(s, p)
        done.append(LayerStackSample(s.node_features, filled, np.ones_like(s.mask), s.adjacency_spec, s.sample_id))
        extras.append({"observed": s.mask.T.astype(int).tolist()})
    out = Path(args.out)
    write_jsonl(out, done, extras)
    write_manifest(out.with_name(out.stem + ".manifest.json"), "complete", cfg, model.seed,
                   {"checkpoint": ckpt, "dataset": dataset_path}, {"completed": out}, started)
    print(f"completed {len(done)} samples into {out}")
    return EXIT_OK


def evaluate_completion(completed_path, truth_path) -> dict:
    truth = {s.sample_id: s for s in read_jsonl(truth_path)}
    held_err, obs_err, sq = [], [], []
    n_samples = 0
    for lineno, rec in iter_jsonl(completed_path):
        s = sample_from_json(rec)
        if s.sample_id not in truth:
            raise ValueError(f"{completed_path}:{lineno}: sample {s.sample_id!r} missing from truth file")
        if not np.all(s.mask == 1):
            raise ValueError(f"{completed_path}:{lineno}: completed sample has missing entries")
        t = truth[s.sample_id].thickness
        observed = np.asarray(rec.get("observed", np.ones((s.n_layers, s.n_nodes))), dtype=np.int8).T
        diff = s.thickness - t
        held_err.append(np.abs(diff[observed == 0]))
        obs_err.append(np.abs(diff[observed == 1]))
        sq.append(diff.ravel() ** 2)
        n_samples += 1
    held = np.concatenate(held_err) if held_err else np.zeros(0)
    obs = np.concatenate(obs_err) if obs_err else np.zeros(0)
    allsq = np.concatenate(sq) if sq else np.zeros(0)
    return {
        "n_samples": n_samples,
        "heldout_masked_mae": float(held.mean()) if held.size else 0.0,
        "observed_mae": float(obs.mean()) if obs.size else 0.0,
        "rmse": float(np.sqrt(allsq.mean())) if allsq.size else 0.0,
        "n_heldout": int(held.size),
        "n_observed": int(obs.size),
    }


def cmd_eval(args) -> int:
    metrics = evaluate_completion(args.completed, args.truth)
    text = json.dumps(metrics, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_workflow(args) -> int:
    started = time.time()
    cfg, inputs = resolve_config(WorkflowConfig().to_dict(), args.config, args.set)
    wf = WorkflowConfig.from_dict(cfg)
    incomplete_path = _input(args.incomplete, inputs, "incomplete")
    complete_path = _input(args.complete, inputs, "complete")
    ckpt = _input(args.checkpoint, inputs, "checkpoint")
    if not Path(ckpt).exists():
        raise FileNotFoundError(f"completion checkpoint not found: {ckpt}")
    completion_model, _ = load_checkpoint(ckpt)
    incomplete = read_jsonl(incomplete_path)
    full = read_jsonl(complete_path)
    _check_dataset(incomplete, incomplete_path)
    _check_dataset(full, complete_path)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = pretrain_then_finetune(incomplete, full, completion_model, wf, out)
    report_path = out / "report.json"
    report_path.write_text(json.dumps(result.report, indent=2) + "\n", encoding="utf-8")
    write_manifest(out / "manifest.json", "workflow", cfg, wf.seed,
                   {"incomplete": incomplete_path, "complete": complete_path, "checkpoint": ckpt},
                   {"report": report_path}, started)
    print(json.dumps({k: result.report[k] for k in ("pretrain_finetune_rmse", "scratch_rmse", "improvement_pct")}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    defaults = {"model": asdict(ModelConfig()), "seed": 0, "sampled_entries": 6}
    cfg, _ = resolve_config(defaults, args.config, args.set)
    results = full_suite(ModelConfig.from_dict(cfg["model"]), int(cfg["seed"]), int(cfg["sampled_entries"]))
    print(format_table(results))
    failed = [r.name for rows in results.values() for r in rows if not r.passed]
    print(f"{'FAIL' if failed else 'PASS'}: {sum(len(v) for v in results.values()) - len(failed)} checks passed, {len(failed)} failed")
    return EXIT_VALIDATION if failed else EXIT_OK


def cmd_export_traces(args) -> int:
    for lineno, rec in iter_jsonl(args.completed):
        if str(rec.get("id")) != args.sample_id:
            continue
        s = sample_from_json(rec)
        if not np.all(s.mask == 1):
            raise ValueError(f"{args.completed}:{lineno}: sample {args.sample_id!r} is not completed")
        observed = rec.get("observed")
        obs = np.asarray(observed, dtype=np.int8).T if observed is not None else None
        prefix = Path(args.out_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        write_traces_csv(prefix.with_suffix(".csv"), s.thickness, obs)
        prefix.with_suffix(".svg").write_text(traces_svg(s.thickness, obs, title=args.sample_id), encoding="utf-8")
        print(f"wrote {prefix.with_suffix('.csv')} and {prefix.with_suffix('.svg')}")
        return EXIT_OK
    raise ValueError(f"sample {args.sample_id!r} not found in {args.completed}")


# parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="icestack", description="Physics-conditioned completion of ice-layer thickness stacks.")
    p.add_argument("--version", action="version", version=f"icestack {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file or a previous run's manifest.json")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (dotted keys, JSON values)")

    g = sub.add_parser("generate", help="write a synthetic dataset and its hidden truth")
    common(g)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("sync", help="interpolate five gridded covariates to node locations")
    s.add_argument("--fields", nargs="+", required=True, help="five x,y,value CSV files in covariate order")
    s.add_argument("--nodes", required=True, help="CSV with lat,lon columns")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sync)

    t = sub.add_parser("train", help="train the completion model")
    common(t)
    t.add_argument("--dataset")
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("complete", help="fill unobserved thickness with model predictions")
    common(c)
    c.add_argument("--checkpoint")
    c.add_argument("--dataset")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_complete)

    e = sub.add_parser("eval", help="score a completed dataset against hidden truth")
    e.add_argument("--completed", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("workflow", help="pretrain on completions, fine-tune, compare with scratch")
    common(w)
    w.add_argument("--incomplete")
    w.add_argument("--complete")
    w.add_argument("--checkpoint")
    w.add_argument("--out-dir", required=True)
    w.set_defaults(func=cmd_workflow)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(gc)
    gc.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-traces", help="write one completed stack as CSV and SVG traces")
    x.add_argument("--completed", required=True)
    x.add_argument("--sample-id", required=True)
    x.add_argument("--out-prefix", required=True)
    x.set_defaults(func=cmd_export_traces)
    return p


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"icestack {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, RuntimeError) as exc:
        print(f"icestack {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
