"""Command-line entry point: ``grnet synth|train|eval|gradcheck|ablate|inspect``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ablation
from .config import RunConfig
from .data import (
    CHECKPOINT_MAGIC,
    FEATURE_MAGIC,
    Dataset,
    atomic_write,
    load_checkpoint,
    read_feature_file,
    read_manifest,
    save_checkpoint,
)
from .errors import ConfigError, GRNetError
from .evaluation import (
    GlobalCosineScorer,
    GreedyLocalScorer,
    GRNetScorer,
    Protocol,
    evaluate_protocol,
    ranking_dump,
    score_all,
)
from .synthetic import SynthSpec, generate_synthetic, synthesize
from .training import gradcheck_toy, train, write_log

log = logging.getLogger("grnet")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _add_run_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (overrides --config)")
    g.add_argument("--config", help="JSON RunConfig file")
    g.add_argument("--scales", help="pyramid scales, e.g. 1x1,2x2,3x3")
    g.add_argument("--dim", type=int, help="projection dimension D")
    g.add_argument("--hidden", type=int, help="reasoning channels C'")
    g.add_argument("--iterations", type=int, help="reasoning layers T")
    g.add_argument("--edge-mode", choices=("recompute", "frozen"))
    g.add_argument("--mask", choices=("full", "intra", "inter", "none"))
    g.add_argument("--keep-global", action="store_true", default=None,
                   help="always link the global node with every local node")
    g.add_argument("--lr", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--lr-step-epochs", type=int)
    g.add_argument("--batch-identities", type=int, dest="identities_per_batch")
    g.add_argument("--neg-ratio", type=float)
    g.add_argument("--full-cross", action="store_true", default=None)
    g.add_argument("--epochs", type=int)
    g.add_argument("--steps-per-epoch", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--precision", choices=("f64", "f32"))
    g.add_argument("--val-every", type=int)
    g.add_argument("--k", type=_ints, dest="ks", help="report ks, e.g. 1,20,50")


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    for name in ("scales", "dim", "hidden", "iterations", "edge_mode", "lr", "momentum",
                 "weight_decay", "lr_step_epochs", "identities_per_batch", "neg_ratio",
                 "full_cross", "epochs", "steps_per_epoch", "seed", "precision", "val_every",
                 "ks"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    if args.mask is not None or args.keep_global is not None:
        mask = dict(cfg.mask)
        if args.mask is not None:
            mask["mode"] = args.mask
        if args.keep_global is not None:
            mask["keep_global"] = args.keep_global
        changes["mask"] = mask
    return cfg.replace(**changes)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = SynthSpec(**{k: v for k, v in vars(args).items()
                        if k in SynthSpec.__dataclass_fields__ and v is not None})
    manifest = generate_synthetic(spec, args.out, args.dtype)
    print(f"wrote {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    ds = Dataset.load(args.manifest, cfg.dtype)
    result = train(ds, cfg, max_steps=args.steps,
                   on_line=(print if args.verbose else None))
    save_checkpoint(args.out, result.model, cfg.to_dict())
    log_path = args.log or str(Path(args.out).with_suffix(".log"))
    write_log(log_path, result.log_lines)
    print(f"wrote {args.out} and {log_path}; final loss {result.losses[-1]:.4f}"
          if result.losses else f"wrote {args.out} (no steps run)")
    return 0


def _scorer(args):
    if args.checkpoint:
        model, header = load_checkpoint(args.checkpoint)
        return GRNetScorer(model), {"checkpoint": str(args.checkpoint),
                                    "run_config": header.get("run_config", {})}
    if args.baseline == "global-cosine":
        return GlobalCosineScorer(), {}
    if args.baseline == "greedy-local":
        return GreedyLocalScorer(_ints(args.grid.replace("x", ","))), {"grid": args.grid}
    raise ConfigError("eval needs --checkpoint or --baseline")


def cmd_eval(args) -> int:
    scorer, meta = _scorer(args)
    dtype = scorer.model.dtype if isinstance(scorer, GRNetScorer) else np.float64
    ds = Dataset.load(args.manifest, dtype, validate=False)
    sm, attrs = score_all(ds, scorer, args.split, args.category)
    header = {"scorer": scorer.name, "split": args.split, "category": args.category,
              "ks": list(args.k), "tie_break": "ascending gallery id", **meta}
    lines = ["# config " + json.dumps(header, sort_keys=True)]
    for name in args.protocol.split(","):
        lines += evaluate_protocol(sm, attrs, name.strip(), args.k).lines()
    text = "".join(line + "\n" for line in lines)
    if args.report:
        atomic_write(args.report, text.encode("utf-8"))
    sys.stdout.write(text)
    if args.rankings:
        atomic_write(args.rankings, "".join(r + "\n" for r in ranking_dump(sm)).encode("utf-8"))
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck_toy(args.scales, args.channels, args.dim, args.hidden, args.iterations,
                           args.precision, args.seed, args.edge_mode, args.mask)
    if args.verbose:
        for name, err in report.errors.items():
            print(f"  {name}: max_rel_err={err:.3e} coords={report.coords[name]}")
    status = "PASS" if report.passed(args.tol) else "FAIL"
    print(f"{status} max_rel_err={report.max_error:.3e} tol={args.tol:g}")
    return 0 if status == "PASS" else 1


def cmd_ablate(args) -> int:
    base = _run_config(args)
    names = [n.strip() for n in args.variants.split(",")]
    for n in names:
        ablation.variant_config(base, n)
    if args.manifest:
        ds = Dataset.load(args.manifest, base.dtype)
        datasets = lambda seed: ds  # noqa: E731
    else:
        datasets = lambda seed: synthesize(SynthSpec(seed=seed))  # noqa: E731
    results = ablation.run_variants(datasets, base, names, _ints(args.seeds), args.steps,
                                    Protocol(args.protocol))
    lines = ["# config " + json.dumps({"base": base.to_dict(), "variants": names,
                                       "seeds": list(_ints(args.seeds)), "steps": args.steps,
                                       "protocol": args.protocol}, sort_keys=True)]
    lines += ablation.format_table(results, base.ks)
    text = "".join(line + "\n" for line in lines)
    if args.report:
        atomic_write(args.report, text.encode("utf-8"))
    sys.stdout.write(text)
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    head = path.read_bytes()[:4] if path.is_file() else b""
    if head == CHECKPOINT_MAGIC:
        model, header = load_checkpoint(path)
        print(f"checkpoint {path}")
        print(f"  precision {header['precision']}  channels {model.channels}  "
              f"scales {model.pyramid}  nodes {model.pyramid.num_nodes}")
        print(f"  reasoning {json.dumps(model.reasoning.to_dict(), sort_keys=True)}")
        for p in model.parameters():
            print(f"  {p.name:<16} {'x'.join(map(str, p.shape)):>10}  "
                  f"mean={p.data.mean():+.4f} std={p.data.std():.4f}")
    elif head == FEATURE_MAGIC:
        fm = read_feature_file(path)
        print(f"feature map {path}: {fm.dtype} C={fm.shape[0]} H={fm.shape[1]} W={fm.shape[2]} "
              f"min={fm.min():.4f} max={fm.max():.4f}")
    else:
        records = read_manifest(path)
        print(f"manifest {path}: {len(records)} records")
        for split in ("train", "val", "test"):
            sub = [r for r in records if r.split == split]
            if not sub:
                continue
            queries = [r for r in sub if r.role == "query"]
            counts = {p.value: sum(p.selects(_attrs(r)) for r in queries) for p in Protocol}
            print(f"  {split}: {len(queries)} queries, {len(sub) - len(queries)} gallery, "
                  f"{len({r.identity for r in sub})} identities, protocols {counts}")
    return 0


def _attrs(record):
    from .evaluation import QueryAttributes
    return QueryAttributes.of(record)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="grnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    add = lambda name, **kw: sub.add_parser(name, parents=[common], **kw)  # noqa: E731

    p = add("synth", help="generate a planted-patch dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    for name, f in SynthSpec.__dataclass_fields__.items():
        p.add_argument("--" + name.replace("_", "-"), type=type(f.default), dest=name)
    p.set_defaults(func=cmd_synth)

    p = add("train", help="train a model and write a checkpoint + log")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="metrics log path (default: <out>.log)")
    p.add_argument("--steps", type=int, help="stop after this many steps")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = add("eval", help="protocol-filtered top-k retrieval report")
    p.add_argument("--manifest", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--baseline", choices=("global-cosine", "greedy-local"))
    p.add_argument("--grid", default="3x3", help="greedy-local window grid")
    p.add_argument("--protocol", default="E,HV,HO,HC")
    p.add_argument("--k", type=_ints, default=(1, 20, 50))
    p.add_argument("--split", default="test")
    p.add_argument("--category")
    p.add_argument("--report")
    p.add_argument("--rankings", help="write per-query ranked gallery ids here")
    p.set_defaults(func=cmd_eval)

    p = add("gradcheck", help="finite-difference check of every parameter")
    p.add_argument("--scales", default="1x1,2x2")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--dim", type=int, default=6)
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--iterations", type=int, default=2)
    p.add_argument("--edge-mode", choices=("recompute", "frozen"), default="recompute")
    p.add_argument("--mask", choices=("full", "intra", "inter", "none"), default="full")
    p.add_argument("--precision", choices=("f64", "f32"), default="f64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = add("ablate", help="train and compare model variants over seeds")
    p.add_argument("--manifest", help="dataset (default: fresh synthetic data per seed)")
    p.add_argument("--variants", default="global-only,coarse-scales,fine-scales,full")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int)
    p.add_argument("--protocol", default="E")
    p.add_argument("--report")
    _add_run_options(p)
    p.set_defaults(func=cmd_ablate)

    p = add("inspect", help="summarize a checkpoint, feature file or manifest")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GRNetError as exc:
        print(f"error code={exc.code} message={json.dumps(str(exc))}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error code=E_IO message={json.dumps(str(exc))}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
