"""Command-line entry point: ``fewshot-rlvr <command> ...``.

Exit codes: 0 success, 1 unexpected error, 2 usage error (including refusing
to overwrite existing output without ``--force``), 3 missing input,
4 integrity failure (checkpoint hash or malformed data file), 5 numeric
failure (non-finite loss).

Relative ``--out`` paths are resolved under ``$FEWSHOT_RLVR_OUT`` when that
variable is set.  Config precedence is flags > ``--config`` file > defaults;
the merged config is echoed into the command's manifest.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_INTEGRITY, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5
OUT_ENV = "FEWSHOT_RLVR_OUT"
MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


def _out_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get(OUT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _need(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input not found: {p}")
    return p


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        if path.is_dir() and not any(path.iterdir()):
            return
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _write_manifest(target: Path, args, config: dict, inputs: dict, artifacts: list, extra: dict | None = None) -> Path:
    from .checkpoint import file_sha256

    path = target / MANIFEST if target.is_dir() else target.with_name(target.name + ".manifest.json")
    data = json.loads(path.read_text()) if path.exists() else {}
    data.update(extra or {})
    data.update(
        {
            "command": args.command,
            "argv": sys.argv[1:] if args.argv is None else args.argv,
            "config": config,
            "seeds": {k: v for k, v in config.items() if "seed" in k},
            "inputs": {k: {"path": str(v), "sha256": file_sha256(v)} for k, v in inputs.items() if Path(v).is_file()},
            "artifacts": sorted(str(a) for a in artifacts),
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        }
    )
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_pool(args) -> int:
    from .taskgen import pool_hash, render_pool, save_samples

    out = _out_path(args.out)
    _guard(out, args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    pool = render_pool(args.size, args.seed, prefix=args.prefix)
    save_samples(pool, out)
    _write_manifest(
        out, args, {"size": args.size, "seed": args.seed, "prefix": args.prefix}, {}, [out], {"pool_hash": pool_hash(pool)}
    )
    print(f"wrote {len(pool)} samples to {out}")
    return EXIT_OK


def cmd_sample_fewshot(args) -> int:
    from .taskgen import PRESETS, FewShotSpec, duplicate_to_batch, load_samples, pool_hash, sample_fewshot, save_dataset

    pool_path = _need(args.pool)
    if args.preset:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset}; choose from {', '.join(PRESETS)}")
        counts = PRESETS[args.preset]
    else:
        counts = (args.vqa or 0, args.cls or 0, args.vg or 0)
    if sum(counts) < 1:
        raise UsageError("need at least one example (--vqa/--cls/--vg or --preset)")
    out = _out_path(args.out)
    _guard(out, args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    pool = load_samples(pool_path)
    ds = duplicate_to_batch(sample_fewshot(pool, FewShotSpec(*counts, seed=args.seed), pool_hash(pool)), args.batch)
    save_dataset(ds, out)
    cfg = {"preset": args.preset, "n_vqa": counts[0], "n_cls": counts[1], "n_vg": counts[2], "seed": args.seed, "batch": args.batch}
    _write_manifest(out, args, cfg, {"pool": pool_path}, [out])
    print(f"wrote {len(ds)} rows ({sum(counts)} distinct) to {out}")
    return EXIT_OK


def _policy_config(args):
    from .policy import PolicyConfig

    kw = {}
    for name in ("embed_dim", "num_layers", "num_heads"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    return PolicyConfig(**kw)


def cmd_pretrain_base(args) -> int:
    from .checkpoint import save_checkpoint
    from .policy import PolicyConfig, ToyVLM
    from .pretrain import PretrainConfig, pretrain_base
    from .trainer import base_checkpoint

    out = _out_path(args.out)
    _guard(out, args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    pcfg = PretrainConfig(steps=args.steps, seed=args.seed)
    model = ToyVLM(PolicyConfig(**{**_policy_config(args).to_dict(), "seed": args.seed}))
    pretrain_base(model, pcfg, log=None if args.quiet else print)
    save_checkpoint(out, base_checkpoint(model, {"kind": "base", "pretrain": vars(pcfg)}))
    _write_manifest(out, args, {"pretrain": vars(pcfg), "policy": model.config.to_dict()}, {}, [out])
    print(f"wrote base policy to {out}")
    return EXIT_OK


def _train_config(args, dataset=None):
    """Flags > ``--config`` file > defaults; the batch size follows the dataset unless the file sets it."""
    from .trainer import TrainConfig

    base = {}
    if args.config:
        base = json.loads(_need(args.config).read_text())
    cfg = TrainConfig.from_dict(base)
    over = {}
    if dataset is not None and "batch_size" not in base:
        over["batch_size"] = len(dataset)
    for flag, key in (
        ("steps", "total_steps"),
        ("lr", "lr"),
        ("beta", "beta"),
        ("seed", "seed"),
        ("checkpoint_every", "checkpoint_every"),
        ("grad_accum", "grad_accum"),
        ("max_new_tokens", "max_new_tokens"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    if getattr(args, "no_wall_time", False):
        over["log_wall_time"] = False
    return cfg.replace(**over)


def _load_base(args):
    if not getattr(args, "base", None):
        return None
    from .trainer import policy_from_checkpoint

    return policy_from_checkpoint(_need(args.base))


def cmd_train(args) -> int:
    from .taskgen import load_dataset
    from .trainer import resume, train

    ds_path = _need(args.dataset)
    ds = load_dataset(ds_path)
    cfg = _train_config(args, ds)
    out = _out_path(args.out)
    if not args.resume:
        _guard(out, args.force)
    log = None if args.quiet else print
    if args.resume:
        result = resume(_need(args.resume), cfg, ds, out, log=log)
    else:
        result = train(cfg, ds, out, _load_base(args), log=log)
    inputs = {"dataset": ds_path}
    if args.base:
        inputs["base"] = Path(args.base)
    if args.resume:
        inputs["resume"] = Path(args.resume)
    _write_manifest(out, args, cfg.to_dict(), inputs, [*result.checkpoints, out / "metrics.csv"])
    print(f"trained {cfg.total_steps} steps; checkpoints in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import sweep
    from .taskgen import load_samples

    ckpt_dir = _need(args.ckpt_dir)
    eval_path = _need(args.eval_set)
    samples = load_samples(eval_path)
    res = sweep(ckpt_dir, samples, seed=args.seed, eval_temperature=args.temperature, max_new_tokens=args.max_new_tokens)
    table = res.table()
    out = _out_path(args.out) if args.out else ckpt_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.txt").write_text(table.to_text())
    (out / "sweep.csv").write_text(table.to_csv())
    best = {m: (None if r is None else r.checkpoint_step) for m, r in res.best.items()}
    (out / "best.json").write_text(json.dumps(best, indent=2, sort_keys=True) + "\n")
    arts = [out / "sweep.txt", out / "sweep.csv", out / "best.json"]
    for r in res.reports:
        p = out / f"predictions_{r.checkpoint_step:06d}.jsonl"
        r.save_predictions(p)
        arts.append(p)
    cfg = {"seed": args.seed, "temperature": args.temperature, "max_new_tokens": args.max_new_tokens}
    _write_manifest(out, args, cfg, {"eval_set": eval_path}, arts, {"best_step_per_metric": best})
    print(table.to_text(), end="")
    print("best step per metric: " + ", ".join(f"{m}={s}" for m, s in best.items()))
    return EXIT_OK


def cmd_ablate_beta(args) -> int:
    from .evaluation import compare, evaluate
    from .plotting import metrics_svg, series_table_csv
    from .taskgen import load_dataset, load_samples
    from .trainer import train

    ds_path = _need(args.dataset)
    ds = load_dataset(ds_path)
    eval_set = load_samples(_need(args.eval_set)) if args.eval_set else None
    cfg0 = _train_config(args, ds)
    out = _out_path(args.out)
    _guard(out, args.force)
    out.mkdir(parents=True, exist_ok=True)
    base = _load_base(args)
    series, reports, labels, summary = {}, [], [], []
    window = args.window
    for beta in args.betas:
        for seed in args.seeds:
            name = f"beta{beta:g}_seed{seed}"
            cfg = cfg0.replace(beta=beta, seed=seed)
            res = train(cfg, ds, out / name, base, log=None if args.quiet else print)
            tail = res.metrics[-window:]

            def mean(f, tail=tail):
                return sum(getattr(r, f) for r in tail) / len(tail) if tail else float("nan")

            summary.append(
                {
                    "beta": beta,
                    "seed": seed,
                    "final_mean_kl": mean("mean_kl"),
                    "final_mean_total_reward": mean("mean_total_reward"),
                    "final_mean_completion_length": mean("mean_completion_length"),
                }
            )
            series[name] = res.metrics
            if eval_set is not None:
                rep = evaluate(res.policy, eval_set, seed=args.eval_seed, step=cfg.total_steps)
                rep.label = name
                reports.append(rep)
                labels.append(name)
    with open(out / "beta_summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    lines = [f"{'beta':>8} {'seed':>5} {'kl(last %d)' % window:>14} {'reward':>8} {'length':>8}"]
    for s in summary:
        lines.append(
            f"{s['beta']:>8g} {s['seed']:>5} {s['final_mean_kl']:>14.3e} "
            f"{s['final_mean_total_reward']:>8.4f} {s['final_mean_completion_length']:>8.2f}"
        )
    (out / "beta_summary.txt").write_text("\n".join(lines) + "\n")
    arts = [out / "beta_summary.csv", out / "beta_summary.txt", out / "curves.svg", out / "curves.csv"]
    (out / "curves.svg").write_text(metrics_svg(series, title="beta ablation"))
    (out / "curves.csv").write_text(series_table_csv(series, ("mean_total_reward", "mean_completion_length", "mean_kl")))
    if len(reports) >= 2:
        table = compare(reports, labels)
        (out / "eval_compare.txt").write_text(table.to_text())
        (out / "eval_compare.csv").write_text(table.to_csv())
        arts += [out / "eval_compare.txt", out / "eval_compare.csv"]
    cfg = dict(cfg0.to_dict(), betas=args.betas, seeds=args.seeds, window=window)
    inputs = {"dataset": ds_path}
    if args.base:
        inputs["base"] = Path(args.base)
    _write_manifest(out, args, cfg, inputs, arts)
    print("\n".join(lines))
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import DEFAULT_COLUMNS, metrics_svg, series_table_csv
    from .trainer import read_metrics

    series = {}
    for p in args.metrics:
        path = _need(p)
        name = path.parent.name or path.stem
        while name in series:
            name += "'"
        series[name] = read_metrics(path)
    cols = tuple(args.columns.split(",")) if args.columns else DEFAULT_COLUMNS
    out = _out_path(args.out)
    _guard(out, args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(metrics_svg(series, cols, title=args.title))
    table = out.with_suffix(".csv")
    table.write_text(series_table_csv(series, cols))
    _write_manifest(out, args, {"columns": list(cols), "title": args.title}, {f"metrics{i}": Path(p) for i, p in enumerate(args.metrics)}, [out, table])
    print(f"wrote {out} and {table}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_train_flags(p) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--base", help="starting policy checkpoint (e.g. from pretrain-base)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=_positive)
    p.add_argument("--grad-accum", type=_positive)
    p.add_argument("--max-new-tokens", type=_positive)
    p.add_argument("--no-wall-time", action="store_true", help="log wall_ms as 0 for byte-identical metrics")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot-rlvr", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=_positive, help="cap on numeric worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-pool", help="render a synthetic sample pool")
    p.add_argument("--size", type=_positive, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="s")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_pool)

    p = sub.add_parser("sample-fewshot", help="draw a few-shot dataset and duplicate it to the batch size")
    p.add_argument("--pool", required=True)
    p.add_argument("--preset")
    p.add_argument("--vqa", type=int)
    p.add_argument("--cls", type=int)
    p.add_argument("--vg", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=_positive, default=128)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sample_fewshot)

    p = sub.add_parser("pretrain-base", help="supervised warm start of the base policy")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embed-dim", type=_positive)
    p.add_argument("--num-layers", type=_positive)
    p.add_argument("--num-heads", type=_positive)
    p.add_argument("--force", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pretrain_base)

    p = sub.add_parser("train", help="GRPO training run")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beta", type=float)
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--force", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate every checkpoint in a directory")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--eval-set", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-new-tokens", type=_positive, default=32)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-beta", help="paired-seed runs for several KL weights")
    p.add_argument("--dataset", required=True)
    p.add_argument("--betas", type=_floats, default=[0.001, 0.04])
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    p.add_argument("--window", type=_positive, default=100, help="final steps averaged in the summary")
    p.add_argument("--eval-set")
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate_beta)

    p = sub.add_parser("plot", help="SVG curves plus data table from metrics files")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--columns")
    p.add_argument("--title", default="")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .checkpoint import IntegrityError
    from .taskgen import DatasetFormatError
    from .trainer import TrainingHalted

    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (IntegrityError, DatasetFormatError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except TrainingHalted as exc:
        print(f"numeric failure: {exc} (state saved to {exc.checkpoint})", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # anything else is a bug or an environment problem
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
