"""Operator entry point.

    nepa <pretrain|finetune|probe|analyze|gradcheck|ablate> --config <path>
         [--resume <ckpt>] [--seed N] [--table {a,c,e}]

Exit codes: 0 success, 1 runtime or numeric failure, 2 config error. The
environment variable NEPA_THREADS caps data-worker threads. All outputs land
under the config's out_dir; each command echoes the resolved config there.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

import numpy as np

from .analysis import attention_map, export_csv, export_pgm, pgm_name, similarity_map
from .config import RunConfig
from .errors import ConfigError
from .tensor import Tensor


def _load_run_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required")
    rc = RunConfig.load(args.config)
    if args.seed is not None:
        rc = rc.with_seed(args.seed)
    return rc


def cmd_pretrain(args) -> int:
    from .pretrain import run_pretrain

    rc = _load_run_config(args)
    result = run_pretrain(rc, resume=args.resume)
    rows = result["rows"]
    if rows:
        print(f"pretrain: {len(rows)} steps, final loss {rows[-1][1]:.6f}")
    print(f"checkpoint: {result['checkpoint']}")
    print(f"loss csv:   {result['loss_csv']}")
    return 0


def cmd_finetune(args) -> int:
    from . import transfer as tr
    from .figures import save_metric_trace
    from .optim import AdamWState, TrainState, save_train_state
    from .pretrain import load_pretrained

    rc = _load_run_config(args)
    ckpt = rc.raw["finetune"]["checkpoint"]
    if not ckpt:
        raise ConfigError("finetune.checkpoint is required")
    params, bcfg, _ = load_pretrained(ckpt, use_ema=rc.raw["finetune"]["use_ema"])
    train_ds, test_ds = rc.datasets()
    out = rc.out_dir
    out.mkdir(parents=True, exist_ok=True)
    rc.echo()
    ft = rc.finetune_config()
    tuned, head, trace = tr.finetune(params, bcfg, train_ds, test_ds, ft,
                                     rc.augment_config(), seed=rc.seed)
    all_params = dict(tuned.named())
    all_params.update(head)
    state = TrainState(params=all_params, adam=AdamWState(all_params, rc.adamw_config()),
                       ema=None, step=0, meta={"config": rc.raw, "kind": "finetune"})
    save_train_state(out / "ckpt_finetuned.nepa", state)
    export_csv(trace, out / "finetune_trace.csv",
               header=("epoch", "split", "metric", "value"))
    save_metric_trace(trace, out / "finetune_trace.png")
    accs = [v for _, s, m, v in trace if s == "eval" and m == "accuracy"]
    if accs:
        print(f"finetune: final eval accuracy {accs[-1]:.4f}")
    return 0


def cmd_probe(args) -> int:
    from . import transfer as tr
    from .pretrain import load_pretrained

    rc = _load_run_config(args)
    pr = rc.raw["probe"]
    if not pr["checkpoint"]:
        raise ConfigError("probe.checkpoint is required")
    params, bcfg, _ = load_pretrained(pr["checkpoint"], use_ema=pr["use_ema"])
    train_ds, test_ds = rc.datasets()
    out = rc.out_dir
    out.mkdir(parents=True, exist_ok=True)
    rc.echo()
    poolings = ("last", "avg") if pr["pooling"] == "both" else (pr["pooling"],)
    rows = []
    for pooling in poolings:
        acc = tr.linear_probe(params, bcfg, train_ds, test_ds, pooling=pooling,
                              seed=rc.seed, steps=pr["steps"], lr=pr["lr"])
        rows.append((pooling, acc))
        print(f"probe {pooling} accuracy {acc:.4f}")
    export_csv(rows, out / "probe.csv", header=("pooling", "accuracy"))
    return 0


def cmd_analyze(args) -> int:
    from .figures import save_heatmap
    from .pretrain import load_pretrained

    rc = _load_run_config(args)
    an = rc.raw["analyze"]
    if not an["checkpoint"]:
        raise ConfigError("analyze.checkpoint is required")
    params, bcfg, _ = load_pretrained(an["checkpoint"], use_ema=an["use_ema"])
    _, test_ds = rc.datasets()
    out = rc.out_dir / "maps"
    out.mkdir(parents=True, exist_ok=True)
    rc.echo()
    sample = test_ds.sample(an["image_index"])
    images = Tensor(sample.pixels[None].astype(np.float32))
    layers = range(bcfg.depth) if an["layers"] == "all" else an["layers"]
    heads = range(bcfg.heads) if an["heads"] == "all" else an["heads"]
    index_rows = []
    for q in an["queries"]:
        for layer in layers:
            for head in heads:
                amap = attention_map(images, params, bcfg, layer, head, q)
                name = pgm_name(amap)
                export_pgm(amap, out / name)
                save_heatmap(amap, out / (name[:-4] + ".png"))
                index_rows.append(("attention", layer, head, q, name))
        smap = similarity_map(images, params, bcfg, q)
        name = pgm_name(smap)
        export_pgm(smap, out / name)
        save_heatmap(smap, out / (name[:-4] + ".png"))
        index_rows.append(("similarity", "", "", q, name))
    export_csv(index_rows, rc.out_dir / "maps_index.csv",
               header=("kind", "layer", "head", "query", "file"))
    print(f"analyze: wrote {len(index_rows)} maps to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_report, run_all

    rc = _load_run_config(args) if args.config else None
    results = run_all()
    lines, ok = format_report(results)
    print("\n".join(lines))
    print(f"gradcheck: {'all passed' if ok else 'FAILURES PRESENT'} "
          f"({len(results)} checks)")
    if rc is not None:
        out = rc.out_dir
        out.mkdir(parents=True, exist_ok=True)
        export_csv(results, out / "gradcheck.csv", header=("check", "max_rel_error"))
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    from .ablate import run_table
    from .figures import save_ablation_bars

    rc = _load_run_config(args)
    if not args.table:
        raise ConfigError("--table {a,c,e} is required for ablate")
    rows, header = run_table(rc, args.table)
    out = rc.out_dir
    out.mkdir(parents=True, exist_ok=True)
    rc.echo()
    csv_path = out / f"ablate_{args.table}.csv"
    export_csv(rows, csv_path, header=header)
    result_col = header.index("result") if "result" in header else 1
    labels = [" ".join(str(v) for v in row[:result_col]) for row in rows]
    save_ablation_bars(labels, [row[result_col] for row in rows],
                       out / f"ablate_{args.table}.png", title=f"table {args.table}")
    for row in rows:
        print(",".join(str(v) for v in row))
    print(f"ablate table {args.table}: wrote {csv_path}")
    return 0


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nepa",
        description="Causal next-embedding pretraining, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None,
                       help="JSON run configuration")
        p.add_argument("--resume", type=Path, default=None,
                       help="checkpoint to resume from (pretrain)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        if name == "ablate":
            p.add_argument("--table", choices=("a", "c", "e"), default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports and exits
        traceback.print_exc()
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
