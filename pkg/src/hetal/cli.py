"""Command line entry point: ``hetal run``, ``hetal theory`` and ``hetal export-pool``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from hetal.errors import HetalError
from hetal.runner import (
    ExperimentConfig,
    build_dataset,
    config_overrides,
    emit_results,
    read_config_file,
    run_seed,
    summarize,
    with_strategy,
)

# flags that map straight onto ExperimentConfig fields
RUN_FLAGS = ("dataset", "noise", "rounds", "k", "init_labeled", "seeds", "out")


def _parse_set(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise HetalError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key] = value
    return out


def build_config(args: argparse.Namespace) -> tuple[ExperimentConfig, list[str]]:
    """Config file first, then --set pairs, then explicit flags."""
    raw = read_config_file(args.config) if args.config else {}
    raw.update(_parse_set(args.set or []))
    for name in RUN_FLAGS:
        value = getattr(args, name)
        if value is not None:
            raw[name] = str(value)
    if args.finetune:
        raw["finetune"] = "true"
    strategies = [s.strip() for s in (args.strategy or raw.pop("strategy", "rand")).split(",") if s.strip()]
    raw.pop("strategy", None)
    typed = config_overrides(raw)
    if typed.get("dataset") == "four_moons":
        typed.setdefault("noise", "none")
    base = ExperimentConfig(strategy=strategies[0], **typed)
    return base, strategies


def cmd_run(args: argparse.Namespace) -> int:
    base, strategies = build_config(args)
    records, scatters, configs = [], [], []
    for strategy in strategies:
        cfg = with_strategy(base, strategy)
        configs.append(cfg)
        for seed in cfg.seeds:
            seed_records, scatter = run_seed(cfg, seed)
            records.extend(seed_records)
            last = seed_records[-1]
            print(f"{cfg.label:<12} seed={seed:<4} final_acc={last.test_acc:.4f} "
                  f"cum_clean_frac={last.cum_clean_frac:.4f}", flush=True)
            if scatter is not None and seed == cfg.seeds[0]:
                scatters.append(scatter)
    summary = summarize(records)
    for label, s in summary.items():
        print(f"{label:<12} mean_final_acc={s['final_acc_mean']:.4f} +- {s['final_acc_std']:.4f}  "
              f"mean_clean_frac={s['cum_clean_frac_mean']:.4f}")
    if base.out:
        for path in emit_results(records, base.out, configs=configs, scatters=scatters):
            print(f"wrote {path}")
    return 0


def cmd_theory(args: argparse.Namespace) -> int:
    from hetal import theory
    from hetal.nn import ModelConfig, init_state, train

    spec = theory.TopQSpec(args.n, args.s, args.q)
    mcfg = ModelConfig((args.dim, args.classes), seed=args.seed)
    theta = theory.ThetaSpec(mcfg, norm_caps=(args.cap,))
    sampler = theory.linear_teacher_sampler(args.dim, args.classes, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    n_corrupt = int(round(args.corrupt_frac * args.n))
    corrupt_idx = np.sort(rng.choice(args.n, size=n_corrupt, replace=False))
    corruption = (theory.CorruptionSpec.uniform_relabel(corrupt_idx, args.classes) if n_corrupt
                  else theory.CorruptionSpec.identity())

    q = theory.estimate_Q(theta, sampler, corruption, spec, trials=args.trials, restarts=args.restarts,
                          steps=args.steps, seed=args.seed)
    print(f"Q estimate {q.estimate:.6f} +- {q.std_error:.6f} ({len(q.values)} trials, {q.n_diverged} diverged)")

    # one model trained on a corrupted draw, then projected into Theta
    x, y = sampler(args.n, rng)
    gx, gy = corruption.apply(x, y, rng)
    state, _, _ = train(init_state(mcfg), None, mcfg, gx, gy, epochs=args.epochs, batch_size=args.s,
                        lr=1e-2, rng=rng)
    state = theta.project(state)
    report = theory.generalization_gap_report(state, mcfg, sampler(2000, rng), (gx, gy), spec,
                                              q_factor=q.estimate, delta=args.delta)
    print(report.to_table(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gap_report.txt").write_text(report.to_table())
        q.write_csv(out / "q_trials.csv")
        print(f"wrote {out / 'gap_report.txt'} and {out / 'q_trials.csv'}")
    return 0


def cmd_export_pool(args: argparse.Namespace) -> int:
    from hetal.data import save_pool

    base, _ = build_config(args)
    pool, _ = build_dataset(base, base.seeds[0])
    save_pool(pool, args.path)
    print(f"wrote {pool.n} examples to {args.path}")
    return 0


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--dataset", choices=("four_moons", "mini_images"))
    p.add_argument("--noise", choices=("none", "noisy_blank", "noisy_diverse", "noisy_class"))
    p.add_argument("--strategy", help="one strategy or a comma list, e.g. conf,coreset,lhd")
    p.add_argument("--rounds", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--init-labeled", dest="init_labeled", type=int)
    p.add_argument("--finetune", action="store_true")
    p.add_argument("--seeds", help="comma separated, e.g. 0,1,2")
    p.add_argument("--out")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetal", description="Active learning under heteroskedastic noise")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run acquisition rounds and write results")
    _add_run_flags(run)
    run.set_defaults(func=cmd_run)

    th = sub.add_parser("theory", help="top-q bound terms on a small corrupted linear problem")
    th.add_argument("--n", type=int, default=40)
    th.add_argument("--s", type=int, default=8)
    th.add_argument("--q", type=int, default=2)
    th.add_argument("--dim", type=int, default=60)
    th.add_argument("--classes", type=int, default=3)
    th.add_argument("--cap", type=float, default=3.0)
    th.add_argument("--corrupt-frac", dest="corrupt_frac", type=float, default=0.5)
    th.add_argument("--trials", type=int, default=20)
    th.add_argument("--restarts", type=int, default=5)
    th.add_argument("--steps", type=int, default=500)
    th.add_argument("--epochs", type=int, default=200)
    th.add_argument("--delta", type=float, default=0.05)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--out")
    th.set_defaults(func=cmd_theory)

    ex = sub.add_parser("export-pool", help="write the first seed's pool in the text format")
    _add_run_flags(ex)
    ex.add_argument("path")
    ex.set_defaults(func=cmd_export_pool)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except HetalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
