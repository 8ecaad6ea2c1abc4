"""Command-line driver: full federated runs, the rank sweep, offline
clustering re-evaluation.

Subcommands:
  run           execute a federated experiment from a config file
  toy-sim       run the shared-vs-per-task rank sweep
  cluster-eval  recompute clustering quality from a finished run's artifacts

Exit codes: 0 success, 2 configuration/input error, 3 runtime or numeric
failure.  Every run writes into a fresh timestamped directory unless
--out-dir pins one, so no artifact is ever partially overwritten.
"""

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .client import ClientState, group_shards, init_client
from .config import (ExperimentConfig, experiment_to_dict, load_experiment,
                     load_sweep, serialize, sweep_to_dict)
from .data import dirichlet_partition, export_shards_csv, generate_task
from .errors import (ConfigError, InfeasibleError, NumericError,
                     PartitionError, ProtocolError)
from .metrics import (RoundRecord, cluster_accuracy, project_2d, purity,
                      write_projection_csv)
from .model import (BaseModel, batch_loss, flatten, init_adapter,
                    init_base_model, load_adapter, save_adapter, unflatten)
from .numeric import Rng
from .report import (save_cluster_trend_figure, save_projection_figure,
                     save_rank_curve_figure, save_round_trends_figure)
from .server import RoundResult, kmeans, run_round
from .toy_sim import (aggregate_sweep, default_sweep_config, run_sweep,
                      write_aggregate_csv, write_points_csv)

DEFAULT_TOY_SEED = 5


# --- output directory management ---

def resolve_out_dir(explicit: str | None, base: str | None,
                    prefix: str) -> Path:
    """Explicit path wins; otherwise a fresh timestamped subdirectory of
    `base` (default ./runs) that is guaranteed not to exist yet."""
    if explicit is not None:
        out = Path(explicit)
        out.mkdir(parents=True, exist_ok=True)
        return out
    root = Path(base) if base else Path("runs")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    out = root / f"{prefix}-{stamp}"
    suffix = 1
    while out.exists():
        suffix += 1
        out = root / f"{prefix}-{stamp}-{suffix}"
    out.mkdir(parents=True)
    return out


def _say(quiet: bool, message: str) -> None:
    if not quiet:
        print(message)


# --- federated experiment driver ---

def build_experiment(config: ExperimentConfig):
    """Data pools, partition, base model, initial client states.

    Returns (model, states, eval_pools); eval_pools maps task_id to a
    held-out (X, Y) drawn from the task's own distribution, same size as
    the training pool, on an independent stream.
    """
    seed = config.seed
    task_samples = {
        t.task_id: generate_task(t, Rng.for_stream(seed, "data", t.task_id))
        for t in config.tasks}
    eval_pools = {
        t.task_id: generate_task(t, Rng.for_stream(seed, "eval", t.task_id))
        for t in config.tasks}
    shards = dirichlet_partition(task_samples, config.client_count,
                                 config.alpha, config.threshold,
                                 Rng.for_stream(seed, "partition"))
    model = init_base_model(config.model_dims, config.activation,
                            Rng.for_stream(seed, "base"),
                            weight_std=config.weight_std,
                            bias_std=config.bias_std)
    adapted = (list(config.adapted_layers)
               if config.adapted_layers is not None else None)
    global_adapter = init_adapter(model, config.rank,
                                  Rng.for_stream(seed, "adapter"),
                                  adapted_layers=adapted)
    states = {
        cid: init_client(cid, tasks, global_adapter)
        for cid, tasks in group_shards(shards).items()}
    if not states:
        raise PartitionError("partition left every client empty")
    return model, states, shards, eval_pools


def per_task_losses(model: BaseModel, states: dict[int, ClientState],
                    eval_pools) -> dict[int, float]:
    """Mean held-out loss over every client currently holding the task."""
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for cid in sorted(states):
        state = states[cid]
        for tid in state.task_ids:
            X, Y = eval_pools[tid]
            loss = batch_loss(model, state.adapters[tid], X, Y)
            sums[tid] = sums.get(tid, 0.0) + loss
            counts[tid] = counts.get(tid, 0) + 1
    return {tid: sums[tid] / counts[tid] for tid in sorted(sums)}


def _record_round(result: RoundResult, losses: dict[int, float],
                  cumulative: int) -> RoundRecord:
    assignment = result.clustering.assignment
    truth_tasks = {h: t for h, (_, t) in result.truth.items()}
    record = RoundRecord(
        round_index=result.round_index,
        per_task_eval_loss=losses,
        cluster_accuracy=cluster_accuracy(assignment, truth_tasks,
                                          result.clustering.k),
        purity=purity(assignment, truth_tasks),
        inertia=result.clustering.inertia,
        bytes_up=result.bytes_up,
        bytes_down=result.bytes_down,
        cumulative_bytes=cumulative + result.bytes_up + result.bytes_down)
    values = [record.cluster_accuracy, record.purity, record.inertia,
              *losses.values()]
    if not all(np.isfinite(v) for v in values):
        raise NumericError(
            f"round {result.round_index}: non-finite metric, training "
            "diverged")
    return record


def _write_round_artifacts(out: Path, result: RoundResult) -> None:
    r = result.round_index
    adapters_dir = out / "adapters" / f"round_{r:04d}"
    adapters_dir.mkdir(parents=True)
    rows = []
    vectors = []
    for entry in result.uploads.entries:
        task_id = result.truth[entry.handle][1]
        cluster = result.clustering.assignment[entry.handle]
        rows.append((entry.client_id, entry.handle, task_id, cluster))
        vectors.append(entry.vector)
        with open(adapters_dir / f"{entry.handle}.bin", "wb") as f:
            save_adapter(f, unflatten(entry.shape, entry.vector))
    if len(vectors) >= 2:
        coords = project_2d(np.stack(vectors))
    else:
        coords = np.zeros((len(vectors), 2))  # a lone point has no axes
    proj_dir = out / "projections"
    proj_dir.mkdir(exist_ok=True)
    with open(proj_dir / f"round_{r:04d}.csv", "w") as f:
        write_projection_csv(f, r, rows, coords)


def run_experiment(config: ExperimentConfig, out: Path, threads: int = 1,
                   quiet: bool = True) -> list[RoundRecord]:
    """Execute the full round loop, streaming artifacts to `out`.

    Round records are flushed as they are produced so a mid-run numeric
    failure still leaves every completed round on disk.
    """
    model, states, shards, eval_pools = build_experiment(config)
    with open(out / "shards.csv", "w") as f:
        export_shards_csv(f, shards)
    records: list[RoundRecord] = []
    cumulative = 0
    final: RoundResult | None = None
    with open(out / "rounds.jsonl", "w") as log:
        for r in range(1, config.rounds + 1):
            result = run_round(
                model, states, r, config.seed,
                n_clusters=config.task_count,
                fraction=config.participation,
                tau=config.local_steps, eta=config.eta,
                batch_size=config.batch_size,
                weighted=config.weighted_aggregation,
                threads=threads,
                bytes_per_param=config.bytes_per_param)
            states = result.states
            losses = per_task_losses(model, states, eval_pools)
            record = _record_round(result, losses, cumulative)
            cumulative = record.cumulative_bytes
            log.write(record.to_json() + "\n")
            log.flush()
            records.append(record)
            _write_round_artifacts(out, result)
            final = result
            mean_loss = sum(losses.values()) / len(losses)
            _say(quiet, f"round {r:>4}/{config.rounds}  "
                        f"acc={record.cluster_accuracy:.3f}  "
                        f"purity={record.purity:.3f}  "
                        f"loss={mean_loss:.5f}")
    _write_final_artifacts(out, final, records)
    return records


def _cluster_task_majorities(result: RoundResult) -> dict[int, int]:
    """cluster id -> most common true task among its uploads (ties to the
    lower task id).  Evaluation-side bookkeeping only."""
    votes: dict[int, dict[int, int]] = {}
    for handle, cluster in sorted(result.clustering.assignment.items()):
        task_id = result.truth[handle][1]
        tally = votes.setdefault(cluster, {})
        tally[task_id] = tally.get(task_id, 0) + 1
    return {c: min(tally, key=lambda t: (-tally[t], t))
            for c, tally in votes.items()}


def _write_final_artifacts(out: Path, final: RoundResult | None,
                           records: list[RoundRecord]) -> None:
    final_dir = out / "final"
    final_dir.mkdir(exist_ok=True)
    majorities = {}
    if final is not None:
        for cluster, adapter in sorted(final.cluster_adapters.items()):
            with open(final_dir / f"cluster_{cluster}.bin", "wb") as f:
                save_adapter(f, adapter)
        majorities = _cluster_task_majorities(final)
    last = records[-1]
    summary = {
        "rounds_completed": len(records),
        "final_per_task_eval_loss": {str(k): v for k, v in
                                     sorted(last.per_task_eval_loss.items())},
        "final_cluster_accuracy": last.cluster_accuracy,
        "final_purity": last.purity,
        "final_inertia": last.inertia,
        "cumulative_bytes": last.cumulative_bytes,
        "cluster_majority_task": {str(c): t for c, t in
                                  sorted(majorities.items())},
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _render_run_figures(out: Path, records: list[RoundRecord]) -> None:
    save_round_trends_figure(records, out / "trends.png")
    last = records[-1].round_index
    proj = out / "projections" / f"round_{last:04d}.csv"
    rows, coords = _read_projection(proj)
    save_projection_figure(last, rows, coords, out / "projection_final.png")


def _read_projection(path: Path):
    rows = []
    xy = []
    lines = path.read_text().strip().split("\n")
    for line in lines[1:]:
        rnd, cid, handle, tid, cluster, x, y = line.split(",")
        rows.append((int(cid), handle, int(tid), int(cluster)))
        xy.append((float(x), float(y)))
    return rows, np.array(xy)


# --- subcommand bodies ---

def cmd_run(args) -> int:
    if args.threads < 1:
        raise ConfigError("threads: must be >= 1")
    config = load_experiment(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    out = resolve_out_dir(args.out_dir, config.out_dir, "run")
    (out / "config.json").write_text(serialize(experiment_to_dict(config)))
    _say(args.quiet, f"writing to {out}")
    records = run_experiment(config, out, threads=args.threads,
                             quiet=args.quiet)
    _render_run_figures(out, records)
    last = records[-1]
    _say(args.quiet,
         f"done: accuracy={last.cluster_accuracy:.3f} "
         f"purity={last.purity:.3f} "
         f"cumulative_bytes={last.cumulative_bytes}")
    return 0


def cmd_toy_sim(args) -> int:
    if args.threads < 1:
        raise ConfigError("threads: must be >= 1")
    config = load_sweep(args.config) if args.config else \
        default_sweep_config()
    seed = args.seed if args.seed is not None else DEFAULT_TOY_SEED
    out = resolve_out_dir(args.out_dir, None, "toy")
    (out / "sweep_config.json").write_text(serialize(sweep_to_dict(config)))
    _say(args.quiet, f"writing to {out}")
    points = run_sweep(config, seed, threads=args.threads)
    rows = aggregate_sweep(config, points)
    with open(out / "toy_points.csv", "w") as f:
        write_points_csv(f, points)
    with open(out / "toy_aggregate.csv", "w") as f:
        write_aggregate_csv(f, rows)
    save_rank_curve_figure(rows, out / "rank_curves.png")
    if not args.quiet:
        for row in rows:
            note = f"  [{row.note}]" if row.note else ""
            print(f"rank {row.rank:>3} {row.mode:<9} "
                  f"mse {row.mean_mse:.5f} +/- {row.std_mse:.5f}{note}")
    return 0


def cmd_cluster_eval(args) -> int:
    run_dir = Path(args.run_dir)
    config_path = run_dir / "config.json"
    rounds_path = run_dir / "rounds.jsonl"
    if not config_path.exists() or not rounds_path.exists():
        raise ConfigError(f"{run_dir}: not a finished run directory "
                          "(config.json / rounds.jsonl missing)")
    config = load_experiment(config_path)
    lines = rounds_path.read_text().strip().split("\n")
    records = [RoundRecord.from_json(line) for line in lines if line]
    if not records:
        raise ConfigError(f"{rounds_path}: no round records")
    out = Path(args.out_dir) if args.out_dir else run_dir / "cluster_eval"
    out.mkdir(parents=True, exist_ok=True)
    trend = []
    all_match = True
    for record in records:
        r = record.round_index
        proj = run_dir / "projections" / f"round_{r:04d}.csv"
        adapters_dir = run_dir / "adapters" / f"round_{r:04d}"
        if not proj.exists() or not adapters_dir.is_dir():
            raise ConfigError(f"round {r}: saved artifacts missing")
        rows, _ = _read_projection(proj)
        vectors = []
        for _, handle, _, _ in rows:
            with open(adapters_dir / f"{handle}.bin", "rb") as f:
                vectors.append(flatten(load_adapter(f)))
        X = np.stack(vectors)
        labels, _, inertia, _ = kmeans(
            X, config.task_count, Rng.for_stream(config.seed, "kmeans", r))
        assignment = {handle: int(labels[i])
                      for i, (_, handle, _, _) in enumerate(rows)}
        truth = {handle: tid for _, handle, tid, _ in rows}
        accuracy = cluster_accuracy(assignment, truth, config.task_count)
        pure = purity(assignment, truth)
        matches = (accuracy == record.cluster_accuracy
                   and pure == record.purity
                   and inertia == record.inertia)
        all_match = all_match and matches
        trend.append({"round": r, "accuracy": accuracy, "purity": pure,
                      "inertia": inertia, "matches_online": matches})
    with open(out / "trend.csv", "w") as f:
        f.write("round,accuracy,purity,inertia,matches_online\n")
        for row in trend:
            f.write(f"{row['round']},{repr(row['accuracy'])},"
                    f"{repr(row['purity'])},{repr(row['inertia'])},"
                    f"{str(row['matches_online']).lower()}\n")
    save_cluster_trend_figure(trend, out / "trend.png")
    _say(args.quiet,
         f"{len(trend)} rounds re-evaluated; online match: {all_match}")
    return 0


# --- argument parsing ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fltac",
        description="Federated task-specific adapter simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config: bool):
        if needs_config:
            p.add_argument("--config", required=True,
                           help="experiment config JSON")
        else:
            p.add_argument("--config", default=None,
                           help="sweep config JSON (built-in default if "
                                "omitted)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out-dir", default=None,
                       help="exact output directory (default: fresh "
                            "timestamped subdir under ./runs)")
        p.add_argument("--quiet", action="store_true",
                       help="suppress progress output")
        p.add_argument("--threads", type=int, default=1,
                       help="client-simulation parallelism (results are "
                            "identical for any value)")

    run_p = sub.add_parser("run", help="execute a federated experiment")
    common(run_p, needs_config=True)
    run_p.set_defaults(func=cmd_run)

    toy_p = sub.add_parser("toy-sim", help="shared vs per-task rank sweep")
    common(toy_p, needs_config=False)
    toy_p.set_defaults(func=cmd_toy_sim)

    ce_p = sub.add_parser("cluster-eval",
                          help="recompute clustering quality offline")
    ce_p.add_argument("run_dir", help="output directory of a finished run")
    ce_p.add_argument("--out-dir", default=None,
                      help="where to write the trend (default: "
                           "<run_dir>/cluster_eval)")
    ce_p.add_argument("--quiet", action="store_true")
    ce_p.set_defaults(func=cmd_cluster_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, PartitionError, ProtocolError,
            InfeasibleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
