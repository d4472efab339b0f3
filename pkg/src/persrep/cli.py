"""Command-line entry point: ``persrep <verb> ...``.

Exit status is 0 on success, 2 for configuration errors and 3 when a stage
fails. Every ``--gen-*`` / ``--train-*`` flag overrides the matching field of
the config file; unset flags leave the file's value alone.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from persrep import __version__, errors

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("persrep")

# errors caused by what the user asked for rather than by a stage going wrong
CONFIG_ERRORS = (errors.ConfigError, errors.NonPositiveTemperature, errors.EncoderUnavailable,
                 errors.UnknownTargetMap, errors.IncompatibleRuns, errors.UnknownInstance)


def _value(text: str):
    """Flag values are JSON when they parse as JSON, plain strings otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_dataclass_flags(parser, cls, prefix: str, title: str):
    group = parser.add_argument_group(title)
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else None
        flag = f"--{prefix}-{f.name.replace('_', '-')}"
        group.add_argument(flag, dest=f"{prefix}__{f.name}", type=_value, default=None,
                           metavar="V", help=f"default: {default!r}")


def _overrides(args, prefix: str) -> dict:
    return {k.split("__", 1)[1]: v for k, v in vars(args).items()
            if k.startswith(prefix + "__") and v is not None}


def _apply(obj, changes: dict):
    if not changes:
        return obj
    try:
        return replace(obj, **changes)
    except TypeError as exc:
        raise errors.ConfigError(str(exc)) from None


def _gen_config(args):
    from persrep.generation import GeneratorConfig
    gen = _apply(GeneratorConfig(), _overrides(args, "gen"))
    if getattr(args, "seed", None) is not None:
        gen = replace(gen, seed=args.seed)
    return gen


def _train_config(args):
    from persrep.training import TrainConfig
    tr = _apply(TrainConfig(), _overrides(args, "train"))
    if getattr(args, "seed", None) is not None:
        tr = replace(tr, seed=args.seed)
    return tr


def _pipeline_config(args):
    from persrep.pipeline import PipelineConfig, toy_profile
    if args.config:
        cfg = PipelineConfig.load(args.config)
    else:
        cfg = toy_profile()
    gen = _apply(cfg.generator, _overrides(args, "gen"))
    tr = _apply(cfg.train, _overrides(args, "train"))
    if args.seed is not None:
        gen, tr = replace(gen, seed=args.seed), replace(tr, seed=args.seed)
    changes = {"generator": gen, "train": tr}
    for name in ("dataset_root", "output_dir", "filter_threshold", "n_real", "workers"):
        v = getattr(args, name)
        if v is not None:
            changes[name] = v
    if args.encoder is not None:
        changes["encoder_name"] = args.encoder
    if args.instances:
        changes["instances"] = tuple(args.instances)
    if args.tasks:
        changes["eval_tasks"] = tuple(args.tasks)
    if args.sweep is not None:
        changes["sweep"] = _value(args.sweep)
    return replace(cfg, **changes)


def _dataset(root: str):
    from persrep.pipeline import load_dataset
    return load_dataset(root)


# -- verbs ------------------------------------------------------------------

def cmd_ingest(args):
    from persrep.dataset import ingest_dataset
    ds = ingest_dataset(args.root, min_test=args.min_test, workers=args.workers)
    summary = {"instances": len(ds), "digest": ds.digest(),
               "train_images": len(ds.records("train")), "test_images": len(ds.records("test")),
               "masked_test_images": sum(r.mask is not None for r in ds.records("test"))}
    print(json.dumps(summary, indent=2, sort_keys=True))


def cmd_toy_data(args):
    from persrep.dataset import write_dataset
    from persrep.toy import make_toy_dataset
    ds = make_toy_dataset(args.instances, args.n_test, args.seed)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} instances to {args.out} (digest {ds.digest()[:12]})")


def cmd_generate(args):
    from persrep.dataset import save_pool
    from persrep.generation import synthesize_pool
    ds = _dataset(args.dataset)
    pool = synthesize_pool(ds, args.instance, _gen_config(args), workers=args.workers)
    save_pool(pool, args.out)
    print(f"{len(pool.positives)} positives, {len(pool.negatives)} negatives -> {args.out}")


def cmd_filter(args):
    from persrep.analysis import encoder_metric
    from persrep.dataset import load_pool, save_pool
    from persrep.encoder import load_encoder
    from persrep.generation import filter_pool
    ds = _dataset(args.dataset)
    pool = load_pool(args.pool)
    kept = filter_pool(pool, list(ds[args.instance].train), encoder_metric(load_encoder(args.encoder)),
                       threshold=args.threshold)
    save_pool(kept, args.out)
    print(f"kept {len(kept.positives)}/{len(pool.positives)} positives -> {args.out}")


def cmd_train(args):
    from persrep.dataset import load_pool
    from persrep.encoder import load_encoder
    from persrep.training import train_personalized
    ds = _dataset(args.dataset)
    res = train_personalized(load_encoder(args.encoder), list(ds[args.instance].train),
                             load_pool(args.pool), _train_config(args))
    res.encoder.save_adapter(args.out)
    print(f"{res.steps} steps, loss {res.trace[0]:.4f} -> {res.trace[-1]:.4f}; adapter -> {args.out}")


def cmd_eval(args):
    from persrep.encoder import load_adapter, load_encoder
    from persrep.evaluation import TASKS, evaluate
    ds = _dataset(args.dataset)
    base = load_encoder(args.encoder)
    encoders = {}
    for iid in ds.ids:
        path = Path(args.adapters) / f"{iid}.prla" if args.adapters else None
        encoders[iid] = load_adapter(base, path) if path is not None and path.exists() else base
    rep = evaluate(ds, encoders, args.tasks or TASKS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write(out / "report.json", out / "report.csv")
    print(json.dumps(rep.aggregate, indent=2, sort_keys=True))


def cmd_analyze(args):
    from persrep.analysis import analyze_pool, encoder_metric
    from persrep.dataset import load_pool
    from persrep.encoder import load_encoder
    ds = _dataset(args.dataset)
    res = analyze_pool(load_pool(args.pool), list(ds[args.instance].train),
                       encoder_metric(load_encoder(args.encoder)))
    res.write(args.out)
    print(f"fidelity {res.fidelity_mean:.4f}, diversity {res.diversity:.4f} -> {args.out}")


def _summarize(result) -> int:
    agg_b = result.base.aggregate if result.base else {}
    agg_p = result.personalized.aggregate if result.personalized else {}
    for m in sorted(agg_p):
        print(f"{m:10s} base {agg_b.get(m, float('nan')):.4f}  personalized {agg_p[m]:.4f}")
    for iid, msg in sorted(result.failures.items()):
        print(f"FAILED {iid}: {msg}", file=sys.stderr)
    return EXIT_STAGE if result.failures else EXIT_OK


def cmd_run(args):
    from persrep.pipeline import run
    cfg = _pipeline_config(args)
    result = run(cfg, fail_fast=args.fail_fast)
    print(f"run directory: {result.run_dir}")
    return _summarize(result)


def cmd_sweep(args):
    from persrep.pipeline import sweep
    cfg = _pipeline_config(args)
    status = EXIT_OK
    for result in sweep(cfg, fail_fast=args.fail_fast):
        print(f"== {result.run_dir}")
        status = max(status, _summarize(result))
    return status


def cmd_report(args):
    from persrep.report import report
    res = report(args.runs, args.out, figures=not args.no_figures)
    for name, path in sorted(res.files.items()):
        print(f"{name}: {path}")


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from persrep.generation import GeneratorConfig
    from persrep.training import TrainConfig

    p = argparse.ArgumentParser(prog="persrep", description="Personalized representations from synthetic data.")
    p.add_argument("--version", action="version", version=f"persrep {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("ingest", help="validate a dataset directory and print a summary")
    s.add_argument("root")
    s.add_argument("--min-test", type=int, default=3)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("toy-data", help="write the bundled procedural dataset to disk")
    s.add_argument("out")
    s.add_argument("--instances", type=int, default=8)
    s.add_argument("--n-test", type=int, default=6)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_toy_data)

    def dataset_args(s, instance=True):
        s.add_argument("--dataset", default="builtin:toy", help="dataset root or 'builtin:toy'")
        if instance:
            s.add_argument("--instance", required=True)
        s.add_argument("--encoder", default="toy")

    s = sub.add_parser("generate", help="synthesize a positive/negative pool for one instance")
    dataset_args(s)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, default=1)
    _add_dataclass_flags(s, GeneratorConfig, "gen", "generator")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("filter", help="drop positives dissimilar to the real references")
    dataset_args(s)
    s.add_argument("--pool", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.6)
    s.set_defaults(fn=cmd_filter)

    s = sub.add_parser("train", help="contrastive LoRA fine-tuning for one instance")
    dataset_args(s)
    s.add_argument("--pool", required=True)
    s.add_argument("--out", required=True, help="adapter checkpoint path")
    s.add_argument("--seed", type=int)
    _add_dataclass_flags(s, TrainConfig, "train", "training")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate base or adapted encoders on a dataset")
    dataset_args(s, instance=False)
    s.add_argument("--adapters", help="directory of <instance_id>.prla checkpoints")
    s.add_argument("--tasks", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("analyze", help="diversity and fidelity of a pool")
    dataset_args(s)
    s.add_argument("--pool", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_analyze)

    for verb, fn, text in (("run", cmd_run, "run the full pipeline"),
                           ("sweep", cmd_sweep, "run one child pipeline per sweep grid point")):
        s = sub.add_parser(verb, help=text)
        s.add_argument("--config", help="pipeline JSON (default: bundled toy profile)")
        s.add_argument("--output-dir")
        s.add_argument("--dataset-root")
        s.add_argument("--encoder")
        s.add_argument("--filter-threshold", type=float)
        s.add_argument("--n-real", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--instances", nargs="+")
        s.add_argument("--tasks", nargs="+")
        s.add_argument("--sweep", help='JSON grid, e.g. \'{"cfg_scale": [4.0, 5.0, 7.5]}\'')
        s.add_argument("--seed", type=int, help="sets both generator and training seeds")
        s.add_argument("--fail-fast", action="store_true")
        _add_dataclass_flags(s, GeneratorConfig, "gen", "generator")
        _add_dataclass_flags(s, TrainConfig, "train", "training")
        s.set_defaults(fn=fn)

    s = sub.add_parser("report", help="tables and figures over finished runs")
    s.add_argument("runs", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args) or EXIT_OK
    except CONFIG_ERRORS as exc:
        print(f"config error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except errors.PersRepError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
