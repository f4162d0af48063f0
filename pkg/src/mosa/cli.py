"""Command-line front end.

Subcommands: train, eval, merge, params, ablate, gen-data.  Every subcommand
is deterministic given its flags; stdout CSV uses stable headers.  Exit codes:
0 ok, 2 config error, 3 data/IO error, 4 numeric error, 5 internal invariant
violation.  The ``MOSA_SEED`` environment variable supplies a default seed
when ``--seed`` is absent.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import (RunConfig, adapter_config, apply_overrides, backbone_config,
                     load_run, parse_config, read_config, save_run,
                     serialize_config, setup_run, train_plan)
from .dataio import Dataset, gen_synthetic, load_dataset, save_dataset
from .errors import ConfigError, DataError, MosaError, NumericError
from .inference import (EVAL_CSV_HEADER, MODES, count_trainable_from_config,
                        evaluate, merge_experts)
from .training import metrics_to_csv, train


def _notice(msg: str) -> None:
    print(f"notice: {msg}", file=sys.stderr)


def _resolve_seed(cli_seed) -> int | None:
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get("MOSA_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"MOSA_SEED must be an integer, got {env!r}") from None


def _load_config(args) -> RunConfig:
    rc, notices = read_config(args.config)
    for n in notices:
        _notice(n)
    rc = apply_overrides(rc, getattr(args, "override", None) or [])
    seed = _resolve_seed(getattr(args, "seed", None))
    if seed is not None:
        rc = dataclasses.replace(rc, seed=seed)
    return rc


def _check_classes(rc: RunConfig, ds: Dataset, path) -> None:
    if ds.num_classes != rc.num_classes:
        raise ConfigError(f"dataset {path} has {ds.num_classes} classes, "
                          f"config says {rc.num_classes}")


def _run_training(rc: RunConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved-config.txt").write_text(serialize_config(rc), encoding="utf-8")
    if not rc.train_data:
        raise ConfigError("train_data is not set")
    if not rc.val_data:
        raise ConfigError("val_data is not set")
    train_ds = load_dataset(rc.train_data)
    _check_classes(rc, train_ds, rc.train_data)
    val_ds = load_dataset(rc.val_data)
    _check_classes(rc, val_ds, rc.val_data)
    acfg = adapter_config(rc)
    if (acfg is not None and acfg.kind == "adapter" and acfg.num_experts == 1
            and rc.alpha == 0.0 and rc.beta == 0.0):
        _notice("configuration degenerates to standard adapter tuning")
    model, adapters = setup_run(rc)
    result = train(model, adapters, train_ds, val_ds, train_plan(rc))
    (out_dir / "metrics.csv").write_text(metrics_to_csv(result.metrics), encoding="utf-8")
    save_run(out_dir / "final.mosa-ckpt", rc, model, adapters)
    return model, adapters, val_ds


def cmd_train(args) -> int:
    _run_training(_load_config(args), Path(args.out))
    return 0


def cmd_eval(args) -> int:
    rc, model, adapters = load_run(args.ckpt)
    data = load_dataset(args.data)
    _check_classes(rc, data, args.data)
    seed = _resolve_seed(args.seed)
    report = evaluate(model, adapters, data, args.mode, batch_size=args.batch_size,
                      seed=0 if seed is None else seed, fixed_index=args.fixed_index)
    print(EVAL_CSV_HEADER)
    print(report.csv_row())
    return 0


def cmd_merge(args) -> int:
    rc, model, adapters = load_run(args.ckpt)
    if adapters is None:
        raise ConfigError("checkpoint has no adapters to merge")
    save_run(args.out, rc, model, merge_experts(adapters))
    return 0


def cmd_params(args) -> int:
    rc, notices = read_config(args.config)
    for n in notices:
        _notice(n)
    rc = apply_overrides(rc, args.override or [])
    print(count_trainable_from_config(backbone_config(rc), adapter_config(rc),
                                      rc.method, rc.retain_fraction))
    return 0


def _ablate_cell(payload: tuple[str, list[str], str]) -> tuple[float, int]:
    config_text, overrides, cell_dir = payload
    rc, _ = parse_config(config_text)
    rc = apply_overrides(rc, overrides)
    model, adapters, val_ds = _run_training(rc, Path(cell_dir))
    report = evaluate(model, adapters, val_ds, "merge",
                      batch_size=rc.batch_size, seed=rc.seed)
    return report.top1, report.trainable_params_excl_classifier


def cmd_ablate(args) -> int:
    rc = _load_config(args)
    sweeps: list[tuple[str, list[str]]] = []
    for spec in args.sweep:
        if "=" not in spec:
            raise ConfigError(f"sweep must be key=v1,v2,..., got {spec!r}")
        key, values = spec.split("=", 1)
        key = key.strip()
        if key not in dataclasses.asdict(rc):
            raise ConfigError(f"swept key {key!r} is not a config key")
        sweeps.append((key, [v.strip() for v in values.split(",") if v.strip()]))
    if not sweeps:
        raise ConfigError("ablate needs at least one --sweep")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = [k for k, _ in sweeps]
    cells = list(itertools.product(*[vals for _, vals in sweeps]))
    config_text = serialize_config(rc)
    payloads = []
    for i, cell in enumerate(cells):
        overrides = [f"{k}={v}" for k, v in zip(keys, cell)]
        payloads.append((config_text, overrides, str(out_dir / f"cell_{i:03d}")))
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_ablate_cell, payloads))
    else:
        results = [_ablate_cell(p) for p in payloads]
    lines = [",".join(keys) + ",top1,params"]
    for cell, (top1, params) in zip(cells, results):
        lines.append(",".join(cell) + f",{top1!r},{params}")
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_gen_data(args) -> int:
    seed = _resolve_seed(args.seed)
    train_ds, val_ds = gen_synthetic(classes=args.classes,
                                     train_per_class=args.train_per_class,
                                     val_per_class=args.val_per_class,
                                     channels=args.channels, height=args.height,
                                     width=args.width, difficulty=args.difficulty,
                                     seed=0 if seed is None else seed)
    save_dataset(args.out_train, train_ds)
    save_dataset(args.out_val, val_ds)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mosa",
        description="Train, merge, and evaluate mixtures of sparse adapters.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--override", nargs="+", action="extend", default=[],
                   metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=MODES, default="merge")
    p.add_argument("--fixed-index", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int, default=256)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("merge", help="merge expert weights into a dense checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("params", help="print trainable parameters excluding the head")
    p.add_argument("--config", required=True)
    p.add_argument("--override", nargs="+", action="extend", default=[],
                   metavar="KEY=VALUE")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("ablate", help="cartesian sweep: one train+eval per cell")
    p.add_argument("--config", required=True)
    p.add_argument("--sweep", action="append", required=True,
                   metavar="KEY=V1,V2,...")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--override", nargs="+", action="extend", default=[],
                   metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-data", help="generate synthetic train/val dataset files")
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-val", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--train-per-class", type=int, default=200)
    p.add_argument("--val-per-class", type=int, default=50)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--difficulty", type=float, default=1.0)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except MosaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 5
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
