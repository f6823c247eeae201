"""Command-line entry point.

Every subcommand writes ``<out>/metrics.jsonl`` and finishes by printing one
JSON line on stdout summarising what it did.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, data, flops, loop, nn, scoring
from .config import ConfigError, ExperimentConfig
from .metrics import MetricsSink
from .pipeline import PipelineError, Topology, run_async

log = logging.getLogger("actsel")


def _summary(command, **fields):
    print(json.dumps({"command": command, **fields}, sort_keys=True, default=_jsonable))


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return str(v)


def _out_dir(args, cfg=None) -> Path:
    out = args.out or (cfg.out if cfg is not None else None) or f"runs/{args.command}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        from .config import load_file
        raw = load_file(args.config)
    return ExperimentConfig.from_dict(raw, args.seed)


def _with_loop(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    try:
        cfg.loop = cfg.loop.with_(**kw)
    except ValueError as err:
        raise ConfigError("loop", str(err)) from None
    return cfg


def _run_meta(cfg, **extra):
    return {"seed": cfg.seed, "policy": cfg.loop.policy, "task": cfg.loop.task,
            "reference_source": cfg.loop.reference_source, "steps": cfg.loop.steps,
            "super_batch": cfg.loop.super_batch, "sub_batch": cfg.loop.sub_batch, **extra}


def _tail_noise(result, steps):
    trace = result.noise_trace
    if trace is None or len(trace) == 0:
        return None
    return float(np.mean(trace[steps // 10:]))


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg = _config(args)
    spec = dict(cfg.data)
    for key, flag in (("n", args.n), ("d", args.d), ("noise_rate", args.noise), ("k", args.k)):
        if flag is not None:
            spec[key] = flag
    if args.kind:
        spec["kind"] = args.kind
    spec.setdefault("seed", cfg.seed)
    if spec["kind"] == "paired":
        spec.pop("k", None)
        if "noise_rate" in spec:
            spec["mismatch_rate"] = spec.pop("noise_rate")
    ds = data.generate(spec)
    out = _out_dir(args, cfg)
    files = {}
    if isinstance(ds, data.PairedDataset):
        if args.format not in ("npz",):
            raise ConfigError("format", "paired datasets are written as npz")
    if args.format == "csv":
        files["csv"] = data.save_csv(ds, out / "data.csv")
    elif args.format == "idx":
        files["images"] = out / "images.idx"
        files["labels"] = out / "labels.idx"
        data.write_idx(ds.features, files["images"])
        data.write_idx(ds.labels.astype(np.uint8), files["labels"])
    else:
        files["npz"] = out / "data.npz"
        arrays = ({"view_a": ds.view_a, "view_b": ds.view_b, "mismatch_mask": ds.mismatch_mask}
                  if isinstance(ds, data.PairedDataset) else
                  {"features": ds.features, "labels": ds.labels, "noise_mask": ds.noise_mask})
        np.savez(files["npz"], **arrays)
    files["noise_mask"] = out / "noise_mask.npy"
    np.save(files["noise_mask"], np.asarray(ds.noise_mask))
    manifest = data.write_manifest(out / "manifest.json", ds, files)
    with MetricsSink(out / "metrics.jsonl", {"command": "gen-data", **manifest}) as sink:
        sink.write_row("count", len(ds))
        sink.write_row("noise_fraction", manifest["noise_fraction"])
    _summary("gen-data", out=str(out), count=len(ds), noise_fraction=manifest["noise_fraction"],
             manifest=str(out / "manifest.json"))
    return 0


def _pretrain(cfg, dataset, heldout):
    return loop.pretrain_reference(cfg.loop, dataset, heldout)


def cmd_pretrain_ref(args):
    cfg = _config(args)
    train, holdout, ref_data = cfg.datasets()
    source = ref_data if ref_data is not None else train
    ref = _pretrain(cfg, source, holdout)
    out = _out_dir(args, cfg)
    steps = cfg.loop.reference_steps or cfg.loop.steps
    batch = cfg.loop.reference_batch or cfg.loop.sub_batch
    per_step = flops.pretraining_flops(cfg.loop.proxy.inference_flops(), 1, batch)
    ckpt = checkpoint.save(out / "reference.ckpt", ref.params,
                           {"flops": ref.flops, "steps": steps, "batch": batch, "seed": cfg.seed,
                            "data": "reference_data" if ref_data is not None else "train"})
    task = loop.make_task(cfg.loop)
    with MetricsSink(out / "metrics.jsonl", {"command": "pretrain-ref", "seed": cfg.seed}) as sink:
        for step, value in ref.curve:
            sink.write_row(task.metric, value, step, cum_flops_ref=per_step * step)
    final = ref.curve[-1][1] if ref.curve else None
    _summary("pretrain-ref", checkpoint=str(ckpt), steps=steps, flops=ref.flops,
             final_metric=final, out=str(out))
    return 0


def _load_reference(path, cfg) -> loop.Pretrained:
    params, meta = checkpoint.load(path)
    try:
        checkpoint.check_compatible(params, cfg.loop.proxy)
    except nn.ConfigurationError as err:
        raise ConfigError("reference", str(err)) from None
    return loop.Pretrained(params, int(meta.get("flops", 0)))


def _finish_run(command, cfg, args, result, out, extra=None):
    meta = _run_meta(cfg, command=command, **(extra or {}))
    with MetricsSink(out / "metrics.jsonl", meta) as sink:
        sink.write_all(result.records)
    ckpt = checkpoint.save(out / "learner.ckpt", result.learner, {"seed": cfg.seed, "command": command})
    last = result.records[-1]
    _summary(command, out=str(out), steps=cfg.loop.steps, metric=last.metric,
             final_value=last.value, selected_noise=_tail_noise(result, cfg.loop.steps),
             cum_flops_learner=last.cum_flops_learner, cum_flops_actor=last.cum_flops_actor,
             cum_flops_ref=last.cum_flops_ref, checkpoint=str(ckpt), **(extra or {}))
    return 0


def cmd_baseline(args):
    cfg = _config(args)
    if args.steps is not None:
        _with_loop(cfg, steps=args.steps)
    train, holdout, _ = cfg.datasets()
    result = loop.run_uniform(cfg.loop, train, holdout)
    return _finish_run("baseline", cfg, args, result, _out_dir(args, cfg))


def cmd_train(args):
    cfg = _config(args)
    kw = {}
    if args.policy:
        try:
            kw["policy"] = scoring.Policy.parse(args.policy).value
        except ValueError as err:
            raise ConfigError("policy", str(err)) from None
    if args.reference_source:
        kw["reference_source"] = args.reference_source
    if args.steps is not None:
        kw["steps"] = args.steps
    if kw:
        _with_loop(cfg, **kw)
    c = cfg.loop
    if c.reference_source == loop.ReferenceSource.ONLINE.value and args.reference:
        raise ConfigError("reference", "an online reference is trained in the loop; drop --reference")
    if (c.reference_source == loop.ReferenceSource.ONLINE.value
            and "super_batch" not in cfg.raw.get("loop", {})):
        cfg.loop = loop.online_config(c)
        c = cfg.loop
    train, holdout, ref_data = cfg.datasets()
    needs_ref = "reference" in scoring.Policy(c.policy).reads
    reference = None
    extra = {}
    if needs_ref and c.reference_source != loop.ReferenceSource.ONLINE.value:
        if args.reference:
            reference = _load_reference(args.reference, cfg)
            extra["reference"] = str(args.reference)
        elif c.reference_source == loop.ReferenceSource.HELDOUT.value and ref_data is None:
            # reference on one half, learner on the other: disjoint by construction
            ref_part, train = data.split_holdout(train, 0.5, cfg.seed + 1)
            reference = _pretrain(cfg, ref_part, None)
            extra["reference"] = "pretrained on a disjoint half of the training split"
        else:
            reference = _pretrain(cfg, ref_data if ref_data is not None else train, None)
            extra["reference"] = "pretrained inline"

    out = _out_dir(args, cfg)
    use_async = args.use_async or args.workers is not None
    if use_async:
        topology = cfg.topology
        if args.workers is not None:
            topology = Topology(**{**topology.__dict__, "n_workers": args.workers,
                                   "synchronous": False})
        sink = MetricsSink(out / "metrics.jsonl", _run_meta(cfg, command="train", mode="async"))
        try:
            result = run_async(c, train, holdout, reference, topology, sink=sink)
        except PipelineError as err:
            sink.close()
            _summary("train", out=str(out), error=str(err),
                     records=len(err.partial.records) if err.partial else 0)
            return 1
        sink.close()
        extra.update({k: result.meta[k] for k in ("spi", "at_most_once", "workers")})
        ckpt = checkpoint.save(out / "learner.ckpt", result.learner, {"seed": cfg.seed})
        last = result.records[-1]
        _summary("train", out=str(out), steps=c.steps, metric=last.metric, final_value=last.value,
                 selected_noise=_tail_noise(result, c.steps),
                 cum_flops_learner=last.cum_flops_learner, cum_flops_actor=last.cum_flops_actor,
                 cum_flops_ref=last.cum_flops_ref, checkpoint=str(ckpt), **extra)
        return 0
    if c.reference_source == loop.ReferenceSource.ONLINE.value:
        result = loop.run_algorithm2(c, train, holdout)
    else:
        result = loop.run_algorithm1(c, train, holdout, reference)
    return _finish_run("train", cfg, args, result, out, extra)


def cmd_flops_report(args):
    catalog = flops.CostCatalog()
    for item in args.catalog or []:
        name, _, value = item.partition("=")
        try:
            catalog.add(name, float(value))
        except ValueError as err:
            raise ConfigError("catalog", f"{item!r}: {err}") from None
    for name in (args.learner, args.actor):
        if name not in catalog:
            raise ConfigError("learner" if name == args.learner else "actor",
                              f"unknown model {name!r}; known: {', '.join(catalog.entries)}")
    if not 0 < args.spi <= 1:
        raise ConfigError("spi", f"must be in (0, 1], got {args.spi}")
    if args.beta < 0:
        raise ConfigError("beta", f"must be >= 0, got {args.beta}")
    report = flops.cost_report(args.learner, args.actor, args.spi, args.beta, catalog)
    print(report.to_json() if args.format == "json" else report.to_text())
    out = _out_dir(args)
    with MetricsSink(out / "metrics.jsonl", {"command": "flops-report", **report.to_dict()}) as sink:
        for row in report.rows:
            sink.write_row("cost_per_update", row.cost_per_update, method=row.method,
                           compute_speedup=row.compute_speedup, break_even_beta=row.break_even_beta,
                           positive=row.positive)
    ca = report.row("classact")
    _summary("flops-report", learner=args.learner, actor=args.actor, spi=args.spi, beta=args.beta,
             classact_cost=ca.cost_per_update, classact_speedup=ca.compute_speedup,
             classact_break_even=ca.break_even_beta, out=str(out))
    return 0


def parse_lambdas(text: str) -> list:
    """``"1e-1:1e-4"`` gives every decade between the ends; ``"a,b,c"`` is taken literally."""
    try:
        if ":" in text:
            hi, lo = (float(p) for p in text.split(":"))
            if hi <= 0 or lo <= 0:
                raise ValueError
            a, b = np.log10(hi), np.log10(lo)
            n = int(round(abs(a - b))) + 1
            return [float(10 ** e) for e in np.linspace(a, b, n)]
        return [float(p) for p in text.split(",")]
    except ValueError:
        raise ConfigError("lambda-sweep", f"expected 'hi:lo' or a comma list, got {text!r}") from None


def cmd_diagnose_taylor(args):
    lambdas = parse_lambdas(args.lambda_sweep)
    if len(lambdas) < 2 or min(lambdas) <= 0:
        raise ConfigError("lambda-sweep", "need at least two positive values")
    seed = args.seed or 0
    rng = np.random.default_rng([seed, 77])
    spec = nn.ModelSpec((args.dim, args.hidden), "tanh", "classifier", args.classes)
    params = nn.init_model(spec, rng)
    ds = data.gen_classification(args.examples, args.dim, args.classes, 0.2, seed, separation=3.0)
    x, y = ds.features, ds.labels
    fit = scoring.taylor_slope_sweep(params, x, y, lambdas)
    out = _out_dir(args)
    with MetricsSink(out / "metrics.jsonl", {"command": "diagnose-taylor", "seed": seed}) as sink:
        for i, (lam, gap) in enumerate(zip(fit.lambdas, fit.mean_abs_gap)):
            print(f"lambda={lam:.3e} mean_abs_gap={gap:.6e}")
            sink.write_row("mean_abs_taylor_gap", float(gap), i, **{"lambda": float(lam)})
        sink.write_row("loglog_slope", fit.slope, len(fit.lambdas))
    _summary("diagnose-taylor", slope=fit.slope, lambdas=[float(v) for v in fit.lambdas],
             mean_abs_gap=[float(v) for v in fit.mean_abs_gap], out=str(out))
    return 0


def cmd_eval(args):
    cfg = _config(args)
    params, meta = checkpoint.load(args.checkpoint)
    _, holdout, _ = cfg.datasets()
    value = loop.evaluate_heldout(params, holdout, cfg.loop.task)
    metric = loop.make_task(cfg.loop).metric
    out = _out_dir(args, cfg)
    with MetricsSink(out / "metrics.jsonl", {"command": "eval", "checkpoint": str(args.checkpoint)}) as sink:
        sink.write_row(metric, value)
    _summary("eval", checkpoint=str(args.checkpoint), metric=metric, value=value,
             digest=nn.spec_digest(params), out=str(out))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML experiment config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="actsel", description="Learnability-based data selection.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("pretrain-ref", parents=[common], help="train a fixed reference model")
    s.set_defaults(fn=cmd_pretrain_ref)

    s = sub.add_parser("train", parents=[common], help="prioritized training run")
    s.add_argument("--policy")
    s.add_argument("--reference", help="reference checkpoint (pretrained source)")
    s.add_argument("--reference-source", choices=[r.value for r in loop.ReferenceSource])
    s.add_argument("--steps", type=int)
    s.add_argument("--async", dest="use_async", action="store_true", help="run the actor/learner pipeline")
    s.add_argument("--workers", type=int, help="scorer workers (implies --async)")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("baseline", parents=[common], help="uniform-sampling baseline")
    s.add_argument("--steps", type=int)
    s.set_defaults(fn=cmd_baseline)

    s = sub.add_parser("flops-report", parents=[common], help="per-update cost table")
    s.add_argument("--learner", default="L")
    s.add_argument("--actor", default="Ti")
    s.add_argument("--spi", type=float, default=0.5)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--format", choices=["text", "json"], default="text")
    s.add_argument("--catalog", action="append", metavar="NAME=GFLOPS", help="add a catalog entry")
    s.set_defaults(fn=cmd_flops_report)

    s = sub.add_parser("diagnose-taylor", parents=[common], help="Taylor-gap scaling sweep")
    s.add_argument("--lambda-sweep", default="1e-1:1e-4")
    s.add_argument("--dim", type=int, default=8)
    s.add_argument("--hidden", type=int, default=16)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--examples", type=int, default=64)
    s.set_defaults(fn=cmd_diagnose_taylor)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    s.add_argument("--kind", choices=["classification", "paired"])
    s.add_argument("--n", type=int)
    s.add_argument("--d", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--noise", type=float, help="label-noise or pair-mismatch rate")
    s.add_argument("--format", choices=["csv", "idx", "npz"], default="csv")
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the holdout split")
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"actsel {args.command}: config error: {err}", file=sys.stderr)
        return 2
    except (checkpoint.CheckpointError, data.DataFormatError, nn.ConfigurationError) as err:
        print(f"actsel {args.command}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
