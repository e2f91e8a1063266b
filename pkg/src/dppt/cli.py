"""Command line entry point: ``dppt <subcommand> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from dppt import accounting
from dppt.errors import ConfigError, FormatError, PlannerError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("dppt")


class _Parser(argparse.ArgumentParser):
    # argparse already exits 2 on usage errors; keep the message on stderr
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _load(args):
    from dppt.config import load_config, with_seed

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    if args.out is not None:
        cfg = cfg.replace(out_dir=str(args.out))
    return cfg


def cmd_train(args):
    from dppt.pipeline import run_pipeline

    cfg = _load(args)
    res = run_pipeline(cfg)
    print((res.out_dir / "summary.txt").read_text(), end="")
    return EXIT_DIVERGED if res.diverged else EXIT_OK


def cmd_noise_sweep(args):
    from dppt.pipeline import NOISE_GRID, noise_tolerance_sweep

    cfg = _load(args)
    table = noise_tolerance_sweep(cfg, args.noise or NOISE_GRID)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["noise_multiplier", "status", "eval_loss", "probe_accuracy", "probe_loss"])
    for r in table["rows"]:
        w.writerow([r["noise_multiplier"], r["status"], r["eval_loss"], r["probe_accuracy"], r["probe_loss"]])
    print("# inversions: " + " ".join(f"{k}={v}" for k, v in table.items() if k.endswith("_inversions")))
    return EXIT_OK


def cmd_freeze_sweep(args):
    from dppt.freeze import SWEEP_GRID
    from dppt.pipeline import freeze_sweep

    cfg = _load(args)
    rows = freeze_sweep(cfg, tuple(args.p) if args.p else SWEEP_GRID)
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return EXIT_OK


def cmd_account(args):
    res = accounting.account(args.q, args.z, args.steps, args.delta)
    print(f"epsilon={res.epsilon!r} delta={res.delta!r} order={res.optimal_order:g}")
    return EXIT_OK


def cmd_plan(args):
    k = accounting.plan_scale(args.z0, args.target_eps, args.mode, args.n0, args.b0, args.steps)
    plan = accounting.ScalePlan(args.mode, k, args.z0, args.n0, args.b0, args.steps)
    res = plan.account()
    print(f"k={k} batch={plan.batch:g} n={plan.n:g} z={plan.z:g} delta={res.delta:.3g} epsilon={res.epsilon:.4f}")
    return EXIT_OK


def cmd_sweep(args):
    from dppt import plotting

    modes = accounting.SCALE_MODES if args.curves == "all" else (args.curves,)
    z0s = args.z0 or ([1e-1, 5e-2, 1e-2] if args.curves == "batch" else [1e-4, 5e-4, 1e-3, 5e-3, 1e-2])
    rows = []
    for mode in modes:
        grid = accounting.default_k_grid(mode, args.k_max, args.points)
        rows += accounting.sweep_curves(z0s, (mode,), grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"curves_{args.curves}.csv"
    accounting.write_curves_csv(csv_path, rows)
    plotting.plot_curves(rows, out / f"curves_{args.curves}.png")
    sys.stdout.write(csv_path.read_text())
    return EXIT_OK


def cmd_freeze_analyze(args):
    from dppt import plotting
    from dppt.checkpoint import load_checkpoint
    from dppt.freeze import plan_freeze, write_freeze_report

    tree, acc = load_checkpoint(args.checkpoint)
    if acc is None:
        raise ConfigError(f"{args.checkpoint} has no squared-gradient sidecar")
    plan = plan_freeze(acc, tree, args.p, not args.freeze_rest)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    write_freeze_report(out / "freeze_report.csv", plan)
    plotting.plot_layer_scores(plan, out / "freeze_scores.png")
    sys.stdout.write((out / "freeze_report.csv").read_text())
    return EXIT_OK


def cmd_report(args):
    from dppt import plotting
    from dppt.pipeline import read_metrics

    run = Path(args.run_dir)
    metrics = run / "metrics.csv"
    if not metrics.is_file():
        raise ConfigError(f"no metrics.csv in {run}")
    rows = read_metrics(metrics)
    plotting.plot_training(rows, run / "training.png")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["stage", "steps", "first_loss", "last_loss", "last_eval", "mean_clip_fraction"])
    for stage in dict.fromkeys(r["stage"] for r in rows):
        sub = [r for r in rows if r["stage"] == stage]
        evals = [r["eval_metric"] for r in sub if r["eval_metric"]]
        clips = [float(r["clip_fraction"]) for r in sub if r["clip_fraction"]]
        w.writerow([stage, len(sub), sub[0]["loss"], sub[-1]["loss"], evals[-1] if evals else "",
                    repr(sum(clips) / len(clips)) if clips else ""])
    summary = run / "summary.json"
    if summary.is_file():
        s = json.loads(summary.read_text())
        for key in ("status", "probe_random", "probe_warmstart", "probe_accuracy", "eval_loss"):
            print(f"# {key}={s.get(key)}")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="dppt", description="DP self-supervised pre-training toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_args(sp):
        sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument("--seed", type=int, help="override run and noise seed")
        sp.add_argument("--out", help="output directory (DPPT_OUT still wins)")

    t = sub.add_parser("train", help="warm-start, freeze, DP pre-train and probe")
    run_args(t)
    t.set_defaults(func=cmd_train)

    ns = sub.add_parser("noise-sweep", help="one run per noise multiplier")
    run_args(ns)
    ns.add_argument("--noise", type=float, nargs="+")
    ns.set_defaults(func=cmd_noise_sweep)

    fs = sub.add_parser("freeze-sweep", help="freeze fraction x direction grid")
    run_args(fs)
    fs.add_argument("--p", type=float, nargs="+")
    fs.set_defaults(func=cmd_freeze_sweep)

    a = sub.add_parser("account", help="epsilon of a subsampled Gaussian run")
    a.add_argument("--q", type=float, required=True)
    a.add_argument("--z", type=float, required=True)
    a.add_argument("--steps", type=int, required=True)
    a.add_argument("--delta", type=float, required=True)
    a.set_defaults(func=cmd_account)

    pl = sub.add_parser("plan", help="smallest scale factor reaching a target epsilon")
    pl.add_argument("--z0", type=float, required=True)
    pl.add_argument("--target-eps", type=float, default=10.0)
    pl.add_argument("--mode", choices=accounting.SCALE_MODES, default="equal")
    pl.add_argument("--n0", type=float, default=accounting.BASE_DATASET_SIZE)
    pl.add_argument("--b0", type=int, default=accounting.BASE_BATCH)
    pl.add_argument("--steps", type=int, default=accounting.BASE_STEPS)
    pl.set_defaults(func=cmd_plan)

    sw = sub.add_parser("sweep", help="epsilon vs scale factor curves (CSV + PNG)")
    sw.add_argument("--curves", choices=accounting.SCALE_MODES + ("all",), required=True)
    sw.add_argument("--z0", type=float, nargs="+")
    sw.add_argument("--k-max", type=int, default=10_000)
    sw.add_argument("--points", type=int, default=33)
    sw.add_argument("--out", default=".")
    sw.set_defaults(func=cmd_sweep)

    fa = sub.add_parser("freeze-analyze", help="layer scores and selection from a warm-start checkpoint")
    fa.add_argument("--checkpoint", required=True)
    fa.add_argument("--p", type=float, default=0.01)
    fa.add_argument("--freeze-rest", action="store_true", help="freeze the complement of the selection")
    fa.add_argument("--out")
    fa.set_defaults(func=cmd_freeze_analyze)

    r = sub.add_parser("report", help="summarise a run directory (CSV + PNG)")
    r.add_argument("--run-dir", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, PlannerError, FileNotFoundError) as exc:
        print(f"dppt: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
