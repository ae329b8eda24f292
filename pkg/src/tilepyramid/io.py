"""File formats: PGM masks, prediction CSV, traces, metrics, schedules, sweeps, config."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .distsim import SWEEP_COLUMNS, Distribution, Policy, SimConfig, SimReport
from .engine import CostModel, Decision, ExecutionTree, RunMetrics, ThresholdSchedule
from .errors import ConfigError, DataError
from .predictions import NoisyOracle, PredictionEntry, PredictionSource, PredictionTable, TableBacked
from .pyramid import GroundTruthPyramid, PyramidGeometry, TileId, tile_order
from .synth import SynthConfig
from .tuner import BetaSweepRow

LABELS_FILE = "labels.pgm"
FOREGROUND_FILE = "foreground.pgm"
PREDICTIONS_FILE = "predictions.csv"


# -- PGM (P5, 8-bit)
def write_pgm(path, mask: np.ndarray) -> None:
    data = (np.asarray(mask) != 0).astype(np.uint8) * 255
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Boolean grid; any nonzero byte is true."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace before the raster
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5)")
    cols, rows, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise DataError(f"{path}: 16-bit PGM not supported")
    body = raw[pos : pos + rows * cols]
    if len(body) != rows * cols:
        raise DataError(f"{path}: expected {rows * cols} raster bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(rows, cols) != 0


# -- prediction table CSV
def write_predictions(path, table: PredictionTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "col", "row", "probability", "label"])
        for t in sorted(table, key=tile_order):
            e = table[t]
            w.writerow([t.level, t.col, t.row, repr(e.probability), int(e.label)])


def read_predictions(path) -> PredictionTable:
    table = PredictionTable()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["level", "col", "row", "probability", "label"]:
            raise DataError(f"{path}: unexpected header {reader.fieldnames}")
        for i, rec in enumerate(reader, start=2):
            try:
                t = TileId(int(rec["level"]), int(rec["col"]), int(rec["row"]))
                p = float(rec["probability"])
                label = rec["label"].strip()
                if label not in ("0", "1"):
                    raise ValueError(f"label {label!r}")
            except (TypeError, ValueError) as e:
                raise DataError(f"{path}:{i}: {e}") from None
            if not 0.0 <= p <= 1.0:
                raise DataError(f"{path}:{i}: probability {p} outside [0,1]")
            table[t] = PredictionEntry(p, label == "1")
    return table


# -- execution traces
def write_trace(path, tree: ExecutionTree) -> None:
    with open(path, "w") as fh:
        for t, p, d in tree.nodes():
            fh.write(json.dumps({"level": t.level, "col": t.col, "row": t.row, "p": p, "decision": d.code}) + "\n")


def read_trace(path, geometry: PyramidGeometry) -> ExecutionTree:
    tree = ExecutionTree(geometry)
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                tree.add(TileId(rec["level"], rec["col"], rec["row"]), float(rec["p"]),
                         Decision.from_code(rec["decision"]))
    return tree


def _dump_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_metrics(path, metrics: RunMetrics) -> None:
    _dump_json(path, metrics.to_dict())


def read_metrics(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


# -- schedules
def schedule_to_json(sched: ThresholdSchedule) -> dict:
    return {
        "levels": [{"level": n, "threshold": t} for n, t in sorted(sched.thresholds.items(), reverse=True)],
        "positive_threshold_l0": sched.positive_threshold_l0,
    }


def schedule_from_json(obj: dict) -> ThresholdSchedule:
    try:
        thresholds = {int(e["level"]): float(e["threshold"]) for e in obj["levels"]}
        return ThresholdSchedule(thresholds, float(obj.get("positive_threshold_l0", 0.5)))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad schedule: {e!r}") from None


def write_schedule(path, sched: ThresholdSchedule) -> None:
    _dump_json(path, schedule_to_json(sched))


def read_schedule(path) -> ThresholdSchedule:
    with open(path) as fh:
        return schedule_from_json(json.load(fh))


# -- sweeps
def _fmt(x):
    return "" if x is None else repr(float(x))


def write_beta_sweep(path, rows: list[BetaSweepRow], top: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["beta", *(f"threshold_l{n}" for n in range(1, top + 1)), "retention", "tile_reduction"])
        for r in rows:
            w.writerow([r.beta, *(repr(r.thresholds[n]) for n in range(1, top + 1)),
                        _fmt(r.retention), _fmt(r.tile_reduction)])


def read_beta_sweep(path) -> list[BetaSweepRow]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            thresholds = {int(k[len("threshold_l"):]): float(v) for k, v in rec.items() if k.startswith("threshold_l")}
            beta = float(rec["beta"])
            out.append(BetaSweepRow(
                int(beta) if beta.is_integer() else beta,
                thresholds,
                float(rec["retention"]) if rec["retention"] else None,
                float(rec["tile_reduction"]) if rec["tile_reduction"] else None,
            ))
    return out


def write_sim_sweep(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_sim_sweep(path) -> list[dict]:
    ints = {"workers", "max_load", "total", "steals_ok", "steals_failed"}
    with open(path, newline="") as fh:
        return [{k: int(v) if k in ints else v for k, v in rec.items()} for rec in csv.DictReader(fh)]


def write_sim_report(path, report: SimReport, cfg: SimConfig | None = None) -> None:
    d = report.to_dict()
    d["steals_failed"] = report.steals_failed
    if cfg is not None:
        d["config"] = {"workers": cfg.num_workers, "distribution": cfg.distribution.value,
                       "policy": cfg.policy.value, "seed": cfg.seed}
    _dump_json(path, d)


# -- slide directories
def write_image(directory, gt: GroundTruthPyramid, src: PredictionSource | None = None) -> None:
    """labels.pgm (level 0), foreground.pgm (top level) and optionally predictions.csv."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_pgm(d / LABELS_FILE, gt.level0_labels)
    write_pgm(d / FOREGROUND_FILE, gt.foreground)
    if src is not None:
        write_predictions(d / PREDICTIONS_FILE, PredictionTable.from_source(gt, src))


# -- config
@dataclass
class Config:
    """One JSON document drives every subcommand; every section is optional."""

    num_levels: int = 3
    scale_factor: int = 2
    tile_px: int = 224
    synthesis: SynthConfig = field(default_factory=SynthConfig)
    oracle_sensitivity: tuple | None = None
    oracle_spread: tuple | None = None
    oracle_seed: int | None = None
    schedule: ThresholdSchedule | None = None
    cost_model: CostModel = field(default_factory=CostModel)
    simulation: dict = field(default_factory=dict)
    tuning: dict = field(default_factory=dict)
    image: str | None = None
    synthesis_seeded: bool = False
    base_dir: Path = Path(".")

    def geometry_for(self, rows: int, cols: int) -> PyramidGeometry:
        return PyramidGeometry(self.num_levels, self.scale_factor, cols, rows, self.tile_px)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def default_schedule(self) -> ThresholdSchedule:
        return self.schedule or ThresholdSchedule.uniform(self.num_levels - 1, 0.5)

    def sim_config(self, **overrides) -> SimConfig:
        s = {"workers": 1, "distribution": "round_robin", "policy": "none", "seed": None, **self.simulation, **overrides}
        costs = s.get("unit_costs")
        return SimConfig(int(s["workers"]), Distribution(s["distribution"]), Policy(s["policy"]),
                         seed=s["seed"], unit_costs={int(k): v for k, v in costs.items()} if costs else None)


def load_config(path) -> Config:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    return config_from_dict(doc, base_dir=Path(path).resolve().parent)


def config_from_dict(doc: dict, base_dir: Path = Path(".")) -> Config:
    try:
        geo = doc.get("geometry", {})
        cfg = Config(
            num_levels=int(geo.get("num_levels", 3)),
            scale_factor=int(geo.get("scale_factor", 2)),
            tile_px=int(geo.get("tile_px", 224)),
            base_dir=base_dir,
        )
        syn = dict(doc.get("synthesis", {}))
        known = {f.name for f in fields(SynthConfig)}
        unknown = set(syn) - known
        if unknown:
            raise ConfigError(f"unknown synthesis keys {sorted(unknown)}")
        oracle = doc.get("oracle", {})
        if "sensitivity" in oracle:
            cfg.oracle_sensitivity = tuple(float(x) for x in oracle["sensitivity"])
            syn["sensitivity"] = cfg.oracle_sensitivity
        if "spread" in oracle:
            cfg.oracle_spread = tuple(float(x) for x in oracle["spread"])
            syn["spread"] = cfg.oracle_spread
        if "seed" in oracle:
            cfg.oracle_seed = int(oracle["seed"])
        syn.setdefault("num_levels", cfg.num_levels)
        syn.setdefault("scale_factor", cfg.scale_factor)
        for k in ("sensitivity", "spread"):
            if k in syn:
                syn[k] = tuple(syn[k])
        cfg.synthesis_seeded = "seed" in syn
        cfg.synthesis = SynthConfig(**syn)
        if "schedule" in doc:
            cfg.schedule = schedule_from_json(doc["schedule"])
        if "cost_model" in doc:
            cfg.cost_model = CostModel(**doc["cost_model"])
        cfg.simulation = dict(doc.get("simulation", {}))
        cfg.tuning = dict(doc.get("tuning", {}))
        cfg.image = doc.get("image")
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"bad config: {e}") from None
    return cfg


def load_image(directory, cfg: Config) -> tuple[GroundTruthPyramid, PredictionSource]:
    """Slide directory -> ground truth and a prediction source.

    Uses predictions.csv when present, otherwise the configured noisy oracle.
    """
    d = Path(directory)
    for name in (LABELS_FILE, FOREGROUND_FILE):
        if not (d / name).is_file():
            raise DataError(f"{d}: missing {name}")
    labels = read_pgm(d / LABELS_FILE)
    geometry = cfg.geometry_for(*labels.shape)
    gt = GroundTruthPyramid(geometry, labels, read_pgm(d / FOREGROUND_FILE))
    if (d / PREDICTIONS_FILE).is_file():
        table = read_predictions(d / PREDICTIONS_FILE)
        return gt, TableBacked(geometry, table)
    syn = cfg.synthesis
    seed = cfg.oracle_seed if cfg.oracle_seed is not None else syn.seed
    return gt, NoisyOracle(gt, syn.sensitivity, syn.spread, seed)


def image_name(directory) -> str:
    return os.path.basename(os.path.normpath(str(directory)))
