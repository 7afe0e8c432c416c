"""Experiment runner: trains, evaluates, and aggregates result files.

Commands)

  run           train/evaluate every (variant, payload, seed) cell
  train-expert  train a reference model and save its checkpoint
  gradcheck     finite-difference validation of the backprop code
  aggregate     rebuild the comparison table from an existing results.csv

Exit codes: 0 success, 1 failed check, 2 invalid configuration,
3 missing expert checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import evalkit, marl, qnet
from .config import (
    ConfigError,
    ExperimentConfig,
    cell_digest,
    config_to_dict,
    load_config,
    parse_config,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_MISSING_EXPERT = 3


class MissingExpertError(RuntimeError):
    pass


def _episodes_for(config: ExperimentConfig, variant: str, override: int | None) -> int:
    if override is not None:
        return override
    if variant == "ddqn_tql":
        return config.tql_learner_episodes
    return config.schedule.episodes


def _load_expert(path) -> list:
    if path is None:
        raise MissingExpertError("transfer variant requires --expert or config expert_checkpoint")
    p = Path(path)
    if not p.exists():
        raise MissingExpertError(f"expert checkpoint not found: {p}")
    nets, _ = qnet.load_checkpoint(p)
    return nets


def run_cell(config: ExperimentConfig, variant: str, payload_mult: int, seed: int,
             episodes_override: int | None = None, expert_path=None):
    """Train (unless random) and evaluate one experiment cell."""
    episodes = _episodes_for(config, variant, episodes_override)
    cfg = config.network_for(payload_mult)
    sched = config.schedule_for(variant, episodes)
    trace = config.scenario.build(seed)
    digest = cell_digest(config, payload_mult, episodes)
    offset = marl.snapshots_consumed(episodes, sched.largescale_refresh_episodes)

    log_rows = []
    if variant == "random":
        metrics = marl.evaluate(
            None, trace, cfg, config.eval_episodes, seed,
            random_policy=True, start_snapshot=offset, prop=config.propagation,
            variant=variant, config_digest=digest,
        )
    else:
        expert_nets = None
        if variant == "ddqn_tql":
            expert_nets = _load_expert(expert_path or config.expert_checkpoint)
        bundles, log_rows = marl.train(
            trace, cfg, sched, variant, seed, expert_nets=expert_nets, prop=config.propagation
        )
        metrics = marl.evaluate(
            bundles, trace, cfg, config.eval_episodes, seed,
            start_snapshot=offset,
            eps_fp=marl.epsilon_at(max(episodes - 1, 0), sched),
            iter_frac=1.0,
            prop=config.propagation, variant=variant, config_digest=digest,
        )
    return metrics, log_rows


def _run_cell_packed(args):
    config_dict, variant, mult, seed, episodes_override, expert_path = args
    config = parse_config(config_dict)
    return (variant, mult, seed), run_cell(config, variant, mult, seed, episodes_override, expert_path)


def run_experiment(
    config: ExperimentConfig,
    *,
    seeds=None,
    variants=None,
    payload_mults=None,
    out_dir=None,
    expert_path=None,
    episodes_override: int | None = None,
    jobs: int = 1,
) -> Path:
    """Run every selected cell and write result, histogram, and comparison CSVs."""
    seeds = tuple(seeds) if seeds else config.seeds
    variants = tuple(variants) if variants else config.variants
    payload_mults = tuple(payload_mults) if payload_mults else config.payload_multipliers
    out = Path(out_dir or os.environ.get("V2XSHARE_OUTDIR", config.output_dir))
    out.mkdir(parents=True, exist_ok=True)

    if "ddqn_tql" in variants:
        _load_expert(expert_path or config.expert_checkpoint)  # fail fast

    cells = [(v, m, s) for m in payload_mults for v in variants for s in seeds]
    results: dict[tuple, evalkit.RunMetrics] = {}
    logs: dict[tuple, list] = {}
    if jobs > 1:
        packed = [
            (config_to_dict(config), v, m, s, episodes_override, str(expert_path) if expert_path else None)
            for v, m, s in cells
        ]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for key, (metrics, rows) in pool.map(_run_cell_packed, packed):
                results[key] = metrics
                logs[key] = rows
    else:
        for v, m, s in cells:
            metrics, rows = run_cell(config, v, m, s, episodes_override, expert_path)
            results[(v, m, s)] = metrics
            logs[(v, m, s)] = rows

    for (v, m, s), rows in logs.items():
        if rows:
            marl.write_train_log(out / f"trainlog_{v}_p{m}_s{s}.csv", rows)

    ordered = [results[key] for key in cells]
    evalkit.write_results_csv(out / "results.csv", ordered, config.histogram_bin_ms)

    for m in payload_mults:
        hists = {
            v: evalkit.pooled_histogram([results[(v, m, s)] for s in seeds], config.histogram_bin_ms)
            for v in variants
        }
        evalkit.write_histogram_csv(out / f"histogram_p{m}.csv", hists)

    groups = {
        f"{v}/p{m}": [results[(v, m, s)] for s in seeds]
        for m in payload_mults for v in variants
    }
    evalkit.write_comparison_csv(out / "comparison.csv", evalkit.compare_runs(groups))

    (out / "config.json").write_text(
        json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return out


def train_expert(config: ExperimentConfig, out_path, episodes: int | None = None,
                 seed: int | None = None, payload_mult: int | None = None) -> Path:
    """Train the reference model (double-estimator variant) and checkpoint it."""
    seed = config.expert_seed if seed is None else seed
    episodes = config.schedule.episodes if episodes is None else episodes
    if episodes < 100:
        log.warning("expert trained for only %d episodes; checkpoint will be weak", episodes)
    mult = payload_mult if payload_mult is not None else max(config.payload_multipliers)
    cfg = config.network_for(mult)
    sched = config.schedule_for("ddqn", episodes)
    trace = config.scenario.build(seed)
    bundles, _ = marl.train(trace, cfg, sched, marl.Variant.DDQN, seed, prop=config.propagation)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    qnet.save_checkpoint(
        out_path,
        [b.online for b in bundles],
        extra={"variant": "ddqn", "episodes": episodes, "seed": seed,
               "payload_mult": mult, "digest": cell_digest(config, mult, episodes)},
    )
    return out_path


def run_gradcheck(tolerance: float = 1e-4, n_nets: int = 10, n_batches: int = 10,
                  inject=None, seed: int = 0) -> list[qnet.GradCheckReport]:
    """Finite-difference suite over several random small networks."""
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(n_nets):
        sizes = (int(rng.integers(4, 9)), int(rng.integers(8, 17)),
                 int(rng.integers(6, 13)), int(rng.integers(3, 7)))
        net = qnet.init_network(sizes, rng)
        for _ in range(n_batches):
            x = rng.standard_normal((int(rng.integers(2, 9)), sizes[0]))
            reports.append(qnet.grad_check(net, x, tolerance, inject=inject if i == 0 else None))
    return reports


def _aggregate_from_results(out_dir: Path) -> None:
    path = out_dir / "results.csv"
    if not path.exists():
        raise FileNotFoundError(f"no results.csv in {out_dir}")
    groups: dict[str, list[list[str]]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            label = f"{row['variant']}/b{row['payload_bytes']}"
            groups.setdefault(label, []).append(row)
    rows = []
    for label, entries in groups.items():
        caps = [float(e["v2i_sum_mbps"]) for e in entries]
        rates = [float(e["v2v_delivery_rate"]) for e in entries]
        sd = lambda xs: float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0
        rows.append(evalkit.ComparisonRow(
            label=label, n_runs=len(entries),
            v2i_mean_mbps=float(np.mean(caps)), v2i_sd_mbps=sd(caps),
            delivery_mean=float(np.mean(rates)), delivery_sd=sd(rates),
        ))
    evalkit.write_comparison_csv(out_dir / "comparison.csv", rows)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="v2xshare", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the configured experiment grid")
    run_p.add_argument("--config", type=Path, help="experiment config JSON")
    run_p.add_argument("--seed", type=int, action="append", help="override seeds (repeatable)")
    run_p.add_argument("--variant", action="append", help="override variants (repeatable)")
    run_p.add_argument("--payload-mult", type=int, action="append",
                       help="override payload multipliers (repeatable)")
    run_p.add_argument("--episodes", type=int, help="override training episode count")
    run_p.add_argument("--out", type=Path, help="output directory")
    run_p.add_argument("--expert", type=Path, help="expert checkpoint for the transfer variant")
    run_p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    exp_p = sub.add_parser("train-expert", help="train and checkpoint the expert model")
    exp_p.add_argument("--config", type=Path)
    exp_p.add_argument("--out", type=Path, required=True, help="checkpoint file to write")
    exp_p.add_argument("--episodes", type=int)
    exp_p.add_argument("--seed", type=int)
    exp_p.add_argument("--payload-mult", type=int)

    gc_p = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    gc_p.add_argument("--tolerance", type=float, default=1e-4)
    gc_p.add_argument("--inject", help="layer:kind:index fault injection, e.g. 0:W:3")

    agg_p = sub.add_parser("aggregate", help="recompute comparison.csv from results.csv")
    agg_p.add_argument("--out", type=Path, required=True, help="directory holding results.csv")
    return parser


def _load(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return ExperimentConfig()


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = _load(args)
            out = run_experiment(
                config,
                seeds=args.seed,
                variants=args.variant,
                payload_mults=args.payload_mult,
                out_dir=args.out,
                expert_path=args.expert,
                episodes_override=args.episodes,
                jobs=args.jobs,
            )
            print(f"results written to {out}")
            return EXIT_OK
        if args.command == "train-expert":
            config = _load(args)
            path = train_expert(config, args.out, args.episodes, args.seed, args.payload_mult)
            print(f"expert checkpoint written to {path}")
            return EXIT_OK
        if args.command == "gradcheck":
            inject = None
            if args.inject:
                layer, kind, idx = args.inject.split(":")
                inject = (int(layer), kind, int(idx))
            reports = run_gradcheck(tolerance=args.tolerance, inject=inject)
            worst = max(reports, key=lambda r: r.max_rel_error)
            print(worst)
            return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL
        if args.command == "aggregate":
            _aggregate_from_results(args.out)
            print(f"comparison table written to {args.out / 'comparison.csv'}")
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error at {exc.field_path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingExpertError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_EXPERT
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
