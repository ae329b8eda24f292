"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 transport error.
"""

from __future__ import annotations

import argparse
import json
import socket
import subprocess
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from . import io as fio
from .cluster import ClusterWorker, parse_address
from .distsim import Distribution, Policy, simulate, sweep_row
from .engine import analyze, compute_metrics, run_reference
from .errors import ConfigError, DataError, PyramidError
from .synth import synth_pyramid
from .tuner import DEFAULT_BETAS, isolated_table, tune_empirical, tune_metric_based_detailed


def _schedule(args, cfg):
    return fio.read_schedule(args.schedule) if getattr(args, "schedule", None) else cfg.default_schedule()


def _betas(cfg):
    return tuple(cfg.tuning.get("betas", DEFAULT_BETAS))


def _grid(cfg):
    import numpy as np

    n = int(cfg.tuning.get("grid_size", 1001))
    return np.linspace(0.0, 1.0, n).round(6)


def _images(args, cfg):
    return [(fio.image_name(d), *fio.load_image(d, cfg)) for d in args.images]


def cmd_generate(args, cfg) -> int:
    syn = cfg.synthesis
    if args.seed is not None:
        syn = replace(syn, seed=args.seed)
    elif not cfg.synthesis_seeded:
        raise ConfigError("generate needs a seed: --seed or synthesis.seed in the config")
    out = Path(args.out)
    targets = [(out, syn)] if args.count == 1 else [
        (out / f"img{i:02d}", replace(syn, seed=syn.seed + i)) for i in range(args.count)
    ]
    for d, s in targets:
        gt, src = synth_pyramid(s)
        fio.write_image(d, gt, None if args.no_predictions else src)
    return 0


def cmd_analyze(args, cfg) -> int:
    gt, src = fio.load_image(args.image or cfg.resolve(cfg.image), cfg)
    sched = _schedule(args, cfg)
    pyr, ref, metrics = analyze(gt, src, sched, cfg.cost_model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fio.write_trace(out / "pyramidal_trace.jsonl", pyr)
    fio.write_trace(out / "reference_trace.jsonl", ref)
    fio.write_metrics(out / "metrics.json", metrics)
    print(json.dumps(metrics.to_dict(), sort_keys=True))
    return 0


def cmd_tune_metric(args, cfg) -> int:
    train = [(gt, src) for _, gt, src in _images(args, cfg)]
    objective = args.objective if args.objective is not None else float(cfg.tuning.get("objective", 0.9))
    pt = cfg.default_schedule().positive_threshold_l0
    res = tune_metric_based_detailed(train, objective, _betas(cfg), _grid(cfg), pt)
    fio.write_schedule(args.out, res.schedule)
    if args.table:
        rows = isolated_table(train, _betas(cfg), _grid(cfg), pt)
        with open(args.table, "w") as fh:
            fh.write("level,beta,threshold,retention,tile_reduction\n")
            for r in rows:
                fh.write(f"{r.level},{r.beta},{r.threshold!r},{fio._fmt(r.retention)},{fio._fmt(r.tile_reduction)}\n")
    chosen = {n: {"beta": r.beta, "threshold": r.threshold, "isolated_retention": r.retention}
              for n, r in sorted(res.chosen.items(), reverse=True)}
    print(json.dumps({"per_level_objective": res.per_level_objective, "levels": chosen}, sort_keys=True))
    return 0


def cmd_tune_empirical(args, cfg) -> int:
    train = [(gt, src) for _, gt, src in _images(args, cfg)]
    rows = tune_empirical(train, _betas(cfg), _grid(cfg), cfg.default_schedule().positive_threshold_l0)
    fio.write_beta_sweep(args.out, rows, cfg.num_levels - 1)
    return 0


def _csv_list(text, kind):
    return [kind(x) for x in text.split(",") if x]


def cmd_simulate(args, cfg) -> int:
    sched = _schedule(args, cfg)
    base = cfg.simulation
    workers = _csv_list(args.workers, int) if args.workers else [int(base.get("workers", 1))]
    dists = _csv_list(args.distribution, Distribution) if args.distribution else [Distribution(base.get("distribution", "round_robin"))]
    pols = _csv_list(args.policy, Policy) if args.policy else [Policy(base.get("policy", "none"))]
    seed = args.seed if args.seed is not None else base.get("seed")
    rows, last = [], None
    for name, gt, src in _images(args, cfg):
        for w in workers:
            for d in dists:
                for p in pols:
                    sim_cfg = cfg.sim_config(workers=w, distribution=d.value, policy=p.value, seed=seed)
                    _, rep = simulate(gt, src, sched, sim_cfg)
                    rows.append(sweep_row(name, sim_cfg, rep))
                    last = (rep, sim_cfg)
    fio.write_sim_sweep(args.out, rows)
    if args.report and last:
        fio.write_sim_report(args.report, *last)
    return 0


def _cluster_outputs(out, gt, src, sched, cfg, tree):
    ref = run_reference(gt, src, sched.positive_threshold_l0)
    metrics = compute_metrics(tree, ref, gt, cfg.cost_model)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    fio.write_trace(out / "pyramidal_trace.jsonl", tree)
    fio.write_metrics(out / "metrics.json", metrics)
    return metrics


def cmd_cluster_worker(args, cfg) -> int:
    gt, src = fio.load_image(args.image or cfg.resolve(cfg.image), cfg)
    sched = _schedule(args, cfg)
    peers = [parse_address(p) for p in args.peers.split(",")]
    if args.listen:
        peers[args.id] = parse_address(args.listen)
    seed = args.seed if args.seed is not None else cfg.simulation.get("seed", 0)
    worker = ClusterWorker(args.id, peers, gt, src, sched, seed=seed, timeout=args.timeout)
    tree = worker.run()
    if args.id == 0 and args.out:
        metrics = _cluster_outputs(args.out, gt, src, sched, cfg, tree)
        print(json.dumps(metrics.to_dict(), sort_keys=True))
    if args.stats:
        fio._dump_json(args.stats, asdict(worker.stats))
    return 0


def _free_ports(n):
    socks = []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def cmd_cluster_local(args, cfg) -> int:
    """Launch every worker as its own process on loopback."""
    peers = ",".join(f"127.0.0.1:{p}" for p in _free_ports(args.workers))
    base = [sys.executable, "-m", "tilepyramid", "cluster", "worker", "--config", args.config,
            "--peers", peers, "--timeout", str(args.timeout)]
    if args.image:
        base += ["--image", args.image]
    if args.schedule:
        base += ["--schedule", args.schedule]
    if args.seed is not None:
        base += ["--seed", str(args.seed)]
    procs = []
    for i in range(args.workers):
        cmd = base + ["--id", str(i)] + (["--out", args.out] if i == 0 else [])
        procs.append(subprocess.Popen(cmd))
    deadline = time.monotonic() + args.timeout + 10
    codes = []
    for p in procs:
        try:
            codes.append(p.wait(max(0.1, deadline - time.monotonic())))
        except subprocess.TimeoutExpired:
            p.kill()
            codes.append(4)
    return max(codes)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tilepyramid", description="Coarse-to-fine tile analysis of image pyramids.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p, image=False, images=False, schedule=False):
        p.add_argument("--config", required=True)
        if image:
            p.add_argument("--image", help="slide directory (default: 'image' in config)")
        if images:
            p.add_argument("--images", nargs="+", required=True, help="slide directories")
        if schedule:
            p.add_argument("--schedule", help="schedule JSON (default: config 'schedule')")
        return p

    p = with_config(sub.add_parser("generate", help="write a synthetic slide"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--no-predictions", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = with_config(sub.add_parser("analyze", help="pyramidal vs reference run"), image=True, schedule=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = with_config(sub.add_parser("tune-metric", help="thresholds for an objective retention"), images=True)
    p.add_argument("--out", required=True, help="schedule JSON")
    p.add_argument("--objective", type=float)
    p.add_argument("--table", help="per-level isolated retention CSV")
    p.set_defaults(func=cmd_tune_metric)

    p = with_config(sub.add_parser("tune-empirical", help="beta sweep CSV"), images=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune_empirical)

    p = with_config(sub.add_parser("simulate", help="distributed execution simulator"), images=True, schedule=True)
    p.add_argument("--out", required=True, help="sweep CSV")
    p.add_argument("--workers", help="comma-separated worker counts")
    p.add_argument("--distribution", help="comma-separated: round_robin,random,block")
    p.add_argument("--policy", help="comma-separated: none,level_sync,work_stealing")
    p.add_argument("--seed", type=int)
    p.add_argument("--report", help="SimReport JSON of the last configuration")
    p.set_defaults(func=cmd_simulate)

    cl = sub.add_parser("cluster", help="TCP cluster runtime").add_subparsers(dest="mode", required=True)
    p = with_config(cl.add_parser("worker", help="run one worker"), image=True, schedule=True)
    p.add_argument("--id", type=int, required=True)
    p.add_argument("--peers", required=True, help="host:port of every worker, ordered by id")
    p.add_argument("--listen", help="override this worker's bind address")
    p.add_argument("--out", help="worker 0: output directory for the gathered tree")
    p.add_argument("--stats", help="write this worker's message counters as JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--timeout", type=float, default=120.0)
    p.set_defaults(func=cmd_cluster_worker)

    p = with_config(cl.add_parser("local", help="run a whole cluster on loopback"), image=True, schedule=True)
    p.add_argument("--workers", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--timeout", type=float, default=120.0)
    p.set_defaults(func=cmd_cluster_local)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = fio.load_config(args.config)
        if hasattr(args, "image") and args.image is None and cfg.image is None:
            raise ConfigError("no --image given and none in config")
        return args.func(args, cfg)
    except PyramidError as e:
        print(f"tilepyramid {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"tilepyramid {args.command}: config error: {e}", file=sys.stderr)
        return ConfigError.exit_code
    except OSError as e:
        print(f"tilepyramid {args.command}: I/O error: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
