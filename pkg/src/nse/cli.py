"""Command-line entry point: train, evaluate, case-study, sweep, export-embeddings.

Settings are flat ``key=value`` pairs. A value is resolved from, in order of
precedence, a command-line flag, an ``NSE_<KEY>`` environment variable, a
``--config`` file, and the built-in default.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .casestudy import export_log_csv, export_log_jsonl, geometry_report, record_run
from .dataset import DatasetError, InteractionDataset, ParseError, build_graph, load_interactions
from .encoder import export_embeddings, propagate
from .evaluation import EvaluationError, evaluate_stack
from .samplers import ABLATIONS, SamplerConfig, SamplerError
from .synthetic import clustered_dataset, separable_toy
from .training import TrainConfig, Trainer, TrainingDiverged, load_checkpoint, save_checkpoint

log = logging.getLogger("nse")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
ENV_PREFIX = "NSE_"


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default, help). Defaults mirror TrainConfig / SamplerConfig.
_T, _S = TrainConfig(), SamplerConfig()
KEYS = {
    "data": (str, "", "dataset directory with train.txt/test.txt, or synthetic:separable / synthetic:clustered[:seed]"),
    "out": (str, "runs", "parent directory for run directories"),
    "epochs": (int, _T.epochs, "training epochs"),
    "batch": (int, _T.batch_size, "mini-batch size"),
    "lr": (float, _T.learning_rate, "Adam learning rate"),
    "wd": (float, _T.weight_decay, "L2 coefficient"),
    "seed": (int, _T.seed, "random seed"),
    "encoder": (str, _T.encoder, "mf or lightgcn"),
    "layers": (int, 3, "propagation layers (lightgcn)"),
    "dim": (int, _T.dim, "embedding size"),
    "pooling": (str, _T.pooling, "mean or concat"),
    "include_layer0": (_bool, _T.include_layer0, "pool the ego layer too"),
    "eval_every": (int, _T.eval_every, "evaluate every N epochs (0 = only at the end)"),
    "K": (int, _T.K, "cut-off for Recall/NDCG"),
    "sampler": (str, _S.strategy, "rns, popularity, dns, mixgcf or dins"),
    "M": (int, _S.M, "candidate set size"),
    "beta": (float, _S.beta, "DINS positive-pull weight"),
    "boundary_mode": (str, _S.boundary_mode, "dp, random, min_volume or max_volume"),
    "ablation": (str, "full", "full, A, B or C"),
    "grad_through_alpha": (_bool, _S.grad_through_alpha, "differentiate the DINS weights"),
    "mix_a": (float, _S.mix_a, "MixGCF Beta(a, b) parameter a"),
    "mix_b": (float, _S.mix_b, "MixGCF Beta(a, b) parameter b"),
}
# keys that do not change what a run computes
OUTPUT_KEYS = ("out",)


class ConfigError(ValueError):
    pass


def parse_config_file(path) -> dict:
    out = {}
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: config file not found")
    for n, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in KEYS:
            raise ConfigError(f"{path}:{n}: unknown key {k!r}")
        out[k] = v
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    lowered = {k.lower(): k for k in KEYS}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):]
        if key in KEYS:
            out[key] = value
        elif key.lower() in lowered:
            out[lowered[key.lower()]] = value
        else:
            raise ConfigError(f"unknown environment override {name}")
    return out


def resolve(cli: dict, file_path=None, environ=None) -> dict:
    """Merge the layers and type-check every value."""
    merged = {k: d for k, (_, d, _) in KEYS.items()}
    if file_path:
        merged.update(parse_config_file(file_path))
    merged.update(env_overrides(environ))
    merged.update({k: v for k, v in cli.items() if v is not None})
    unknown = set(merged) - set(KEYS)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    out = {}
    for k, v in merged.items():
        try:
            out[k] = KEYS[k][0](v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{k}: {exc}") from None
    build_train_config(out)  # validation before any work
    return out


def build_train_config(cfg: dict) -> TrainConfig:
    if cfg["ablation"] not in ABLATIONS:
        raise ConfigError(f"ablation: choose from {ABLATIONS}")
    try:
        sampler = SamplerConfig(cfg["sampler"], M=cfg["M"], beta=cfg["beta"], boundary_mode=cfg["boundary_mode"],
                                grad_through_alpha=cfg["grad_through_alpha"], mix_a=cfg["mix_a"],
                                mix_b=cfg["mix_b"]).with_ablation(cfg["ablation"])
        return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch"], learning_rate=cfg["lr"],
                           weight_decay=cfg["wd"], seed=cfg["seed"], encoder=cfg["encoder"],
                           num_layers=cfg["layers"], dim=cfg["dim"], pooling=cfg["pooling"],
                           include_layer0=cfg["include_layer0"], eval_every=cfg["eval_every"], K=cfg["K"],
                           sampler=sampler)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def config_hash(cfg: dict) -> str:
    blob = json.dumps({k: v for k, v in cfg.items() if k not in OUTPUT_KEYS}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in KEYS)


def load_data(spec: str) -> InteractionDataset:
    if not spec:
        raise ConfigError("no dataset given (--data)")
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        seed = int(parts[2]) if len(parts) > 2 else 0
        if parts[1] == "separable":
            return separable_toy(seed=seed)
        if parts[1] == "clustered":
            return clustered_dataset(seed=seed)
        raise ConfigError(f"unknown synthetic dataset {parts[1]!r}")
    root = Path(spec)
    return load_interactions(root / "train.txt", root / "test.txt")


def _new_run_dir(parent, cfg) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(parent) / f"{stamp}-{config_hash(cfg)}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def run_training(cfg: dict, run_dir, dataset: InteractionDataset | None = None) -> dict:
    """Train one resolved config into ``run_dir``; returns the final report record."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    tcfg = build_train_config(cfg)
    ds = dataset if dataset is not None else load_data(cfg["data"])
    chash = config_hash(cfg)
    (run_dir / "config.txt").write_text(format_config(cfg))
    _write_json(run_dir / "config.json", {"config": cfg, "config_hash": chash, "train_config": tcfg.as_dict()})

    has_test = len(ds.test_users()) > 0

    def evaluate(tr):
        rep = evaluate_stack(tr.snapshot(), ds, tcfg.K)
        return {"recall": rep.recall, "ndcg": rep.ndcg}

    trainer = Trainer(ds, tcfg)
    with open(run_dir / "log.jsonl", "w") as fh:
        def on_epoch(report):
            fh.write(json.dumps(report.as_record(), sort_keys=True) + "\n")
            fh.flush()
        trainer.fit(on_epoch=on_epoch, evaluate=evaluate if has_test else None)

    save_checkpoint(run_dir / "checkpoint.bin", trainer, {"config_hash": chash})
    meta = {"seed": tcfg.seed, "sampler": tcfg.sampler.strategy, "encoder": tcfg.encoder,
            "epoch": trainer.epoch, "config_hash": chash,
            "final_loss": trainer.history[-1].mean_loss if trainer.history else None}
    if has_test:
        rep = evaluate_stack(trainer.snapshot(), ds, tcfg.K, meta=meta)
        record = rep.as_record()
        rep.write_per_user_csv(run_dir / "per_user.csv")
    else:
        log.warning("no test interactions; report carries no metrics")
        record = dict(meta)
    _write_json(run_dir / "report.json", record)
    return record


# ------------------------------------------------------------------ commands

def cmd_train(args, cfg) -> int:
    ds = load_data(cfg["data"])
    run_dir = Path(args.run_dir) if args.run_dir else _new_run_dir(cfg["out"], cfg)
    record = run_training(cfg, run_dir, ds)
    print(json.dumps(dict(record, run_dir=str(run_dir)), sort_keys=True))
    return EXIT_OK


def _load_model_for(ckpt, ds):
    header, model, _ = load_checkpoint(ckpt)
    if model.user_table.shape[0] != ds.num_users or model.item_table.shape[0] != ds.num_items:
        raise ConfigError(
            f"{ckpt}: checkpoint has {model.user_table.shape[0]} users x {model.item_table.shape[0]} items, "
            f"dataset has {ds.num_users} x {ds.num_items}")
    return header, model


def cmd_evaluate(args, cfg) -> int:
    ds = load_data(cfg["data"])
    header, model = _load_model_for(args.checkpoint, ds)
    meta = {"seed": header["seed"], "epoch": header["epoch"], "sampler": header["config"]["sampler"]["strategy"],
            "encoder": header["config"]["encoder"]}
    rep = evaluate_stack(propagate(build_graph(ds), model), ds, cfg["K"], meta=meta)
    if args.per_user_csv:
        rep.write_per_user_csv(args.per_user_csv)
    print(rep.to_json())
    return EXIT_OK


def cmd_case_study(args, cfg) -> int:
    ds = load_data(cfg["data"])
    if args.checkpoint:
        _, model = _load_model_for(args.checkpoint, ds)
        stack = propagate(build_graph(ds), model)
    else:
        stack = Trainer(ds, build_train_config(cfg)).fit().snapshot()
    user, item = (args.user, args.item) if args.user is not None else map(int, ds.train_edges[0])
    if not ds.is_train_positive(np.array([user]), np.array([item]))[0]:
        raise ConfigError(f"({user}, {item}) is not a training pair")
    out = Path(args.out_dir) if args.out_dir else _new_run_dir(cfg["out"], cfg)
    out.mkdir(parents=True, exist_ok=True)
    base = build_train_config(cfg).sampler
    rng = np.random.default_rng(cfg["seed"])
    with open(out / "geometry.jsonl", "w") as fh:
        for name in args.samplers.split(","):
            scfg = replace(base, strategy=name.strip())
            slog = record_run(stack, scfg, user, item, ds, rng, args.N)
            rec = geometry_report(slog).as_record()
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            print(json.dumps(rec, sort_keys=True))
            export_log_csv(out / f"{scfg.strategy}.csv", slog)
            export_log_jsonl(out / f"{scfg.strategy}.jsonl", slog)
    return EXIT_OK


def parse_grid(items) -> list:
    """``["beta=0.1,1", "M=8,16"]`` -> list of override dicts (cartesian)."""
    axes = []
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"grid axis {item!r}: expected key=v1,v2,...")
        k, vals = item.split("=", 1)
        k = k.strip()
        if k not in KEYS or k in ("data", "out"):
            raise ConfigError(f"grid axis {k!r} is not a sweepable key")
        axes.append([(k, v.strip()) for v in vals.split(",") if v.strip()])
    return [dict(combo) for combo in itertools.product(*axes)]


def _sweep_lane(job):
    cfg, run_dir, ds = job
    return run_training(cfg, run_dir, ds)


def cmd_sweep(args, cfg) -> int:
    points = parse_grid(args.grid)
    if not points:
        raise ConfigError("empty grid (use --grid key=v1,v2)")
    ds = load_data(cfg["data"])
    # cfg already carries the file and env layers, so grid values win over them
    resolved = [resolve({**cfg, **point}, environ={}) for point in points]
    root = Path(args.run_dir) if args.run_dir else _new_run_dir(cfg["out"], cfg)
    jobs = [(pcfg, root / f"{n:03d}-{config_hash(pcfg)}", ds) for n, pcfg in enumerate(resolved)]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            records = list(pool.map(_sweep_lane, jobs))
    else:
        records = [_sweep_lane(j) for j in jobs]
    keys = list(points[0])
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys + ["recall", "ndcg", "config_hash", "run"])
        for (pcfg, rdir, _), rec in zip(jobs, records):
            w.writerow([pcfg[k] for k in keys] + [rec.get("recall"), rec.get("ndcg"),
                                                  config_hash(pcfg), rdir.name])
    print(root / "sweep.csv")
    return EXIT_OK


def cmd_export(args, cfg) -> int:
    header, model, _ = load_checkpoint(args.checkpoint)
    pooled = None
    if args.pooled:
        ds = load_data(cfg["data"])
        _, model = _load_model_for(args.checkpoint, ds)
        pooled = propagate(build_graph(ds), model)
    export_embeddings(args.output, model, seed=header["seed"], epoch=header["epoch"], pooled=pooled)
    print(args.output)
    return EXIT_OK


# ------------------------------------------------------------------- parser

def _add_config_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    for key, (typ, _, help_) in KEYS.items():
        flag = "--" + key.replace("_", "-")
        names = [flag] if flag == "--" + key else [flag, "--" + key]
        p.add_argument(*names, dest=key, default=None, help=help_)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nse", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)
    p.add_argument("--run-dir", help="exact run directory (default: <out>/<timestamp>-<hash>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--per-user-csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("case-study", help="sampler geometry for one training pair")
    _add_config_flags(p)
    p.add_argument("--checkpoint", help="use a trained checkpoint instead of training first")
    p.add_argument("--samplers", default="rns,mixgcf,dins")
    p.add_argument("--N", type=int, default=10_000, help="draws per sampler")
    p.add_argument("--user", type=int)
    p.add_argument("--item", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_case_study)

    p = sub.add_parser("sweep", help="cartesian grid of training runs")
    _add_config_flags(p)
    p.add_argument("--grid", action="append", help="key=v1,v2,... (repeatable)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-embeddings", help="write embeddings as CSV")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--pooled", action="store_true", help="export pooled vectors (needs --data)")
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cli = {k: getattr(args, k) for k in KEYS}
    try:
        cfg = resolve(cli, args.config)
        return args.func(args, cfg)
    except (ConfigError, DatasetError, ParseError, FileNotFoundError, EvaluationError) as exc:
        print(f"nse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, SamplerError) as exc:
        print(f"nse: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
