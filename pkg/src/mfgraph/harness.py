"""Experiment orchestration: CV search, training runs, evaluation, drift."""

from __future__ import annotations

import csv
import dataclasses
import glob
import hashlib
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import dgcnn
from .errors import CompatibilityError, DataError, SchemaError, StratificationError
from .graph import read_graph_cache, select_k
from .metrics import drift_table, evaluate_scores, write_drift_csv, write_report_csv, write_score_dump
from .training import STREAM_FOLDS, TrainSettings, evaluate_graphs, fit, malicious_scores, stream_rng

logger = logging.getLogger(__name__)

GRID_AXES = ("conv_depth", "mlp_layers", "mlp_neurons", "conv_channels", "pooling_rate")
DEFAULT_CELL = {"conv_depth": 3, "mlp_layers": 3, "mlp_neurons": 1024, "conv_channels": 48, "pooling_rate": 0.75}
DEFAULT_GRID = {
    "conv_depth": [3],
    "mlp_layers": [1, 2, 3, 4, 5],
    "mlp_neurons": [256, 512, 1024, 2048],
    "conv_channels": [16, 32, 48, 64],
    "pooling_rate": [0.5, 0.6, 0.75, 0.9],
}


@dataclass
class ExperimentConfig:
    train_paths: list = field(default_factory=list)
    test_paths: list = field(default_factory=list)
    skeleton: str = "default"
    model: dgcnn.DgcnnConfig = field(default_factory=dgcnn.DgcnnConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    folds: int = 5
    grid: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_GRID.items()})
    grid_mode: str = "axis"  # "axis": vary one axis around the centre cell; "product": full grid
    jobs: int = 1

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError(f"cv needs at least 2 folds, got {self.folds}")
        if self.grid_mode not in ("axis", "product"):
            raise ValueError(f"unknown grid mode {self.grid_mode!r}")
        unknown = set(self.grid) - set(GRID_AXES)
        if unknown:
            raise ValueError(f"unknown grid axes: {sorted(unknown)}")

    @property
    def seed(self):
        return self.train.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=int(seed)))

    def to_dict(self):
        return {
            "train_paths": [str(p) for p in self.train_paths],
            "test_paths": [str(p) for p in self.test_paths],
            "skeleton": self.skeleton,
            "model": self.model.to_dict(),
            "train": dataclasses.asdict(self.train),
            "folds": self.folds,
            "grid": self.grid,
            "grid_mode": self.grid_mode,
        }


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a TOML experiment file; missing keys fall back to defaults.

    Layout: top-level ``seed``/``skeleton``; ``[data]`` with ``train``/``test``
    path lists; ``[model]`` (DgcnnConfig fields); ``[train]`` (epochs,
    batch_size, lr, ...); ``[cv]`` with ``folds``, ``mode``, ``jobs`` and a
    ``[cv.grid]`` table.
    """
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise SchemaError(f"{path}: {exc}") from None
    base = Path(path).parent if path is not None else Path(".")
    data = raw.get("data", {})
    cv = raw.get("cv", {})
    try:
        model = dgcnn.DgcnnConfig.from_dict(raw.get("model", {}))
        settings = TrainSettings(**raw.get("train", {}))
        if "seed" in raw:
            settings.seed = int(raw["seed"])
        grid = {k: list(v) for k, v in cv.get("grid", DEFAULT_GRID).items()}
        cfg = ExperimentConfig(
            train_paths=[str(base / p) for p in data.get("train", [])],
            test_paths=[str(base / p) for p in data.get("test", [])],
            skeleton=str(raw.get("skeleton", "default")),
            model=model,
            train=settings,
            folds=int(cv.get("folds", 5)),
            grid=grid,
            grid_mode=str(cv.get("mode", "axis")),
            jobs=int(cv.get("jobs", 1)),
        )
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad experiment config: {exc}") from None
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "seed":
            cfg = cfg.with_seed(value)
        elif key == "epochs":
            cfg.train.epochs = int(value)
        else:
            setattr(cfg, key, value)
    return cfg


# --------------------------------------------------------------------------
# inputs
# --------------------------------------------------------------------------

def expand_paths(specs, suffix=".jsonl") -> list:
    """Files, directories (every ``*suffix`` inside) and glob patterns, in order."""
    out = []
    for spec in specs:
        spec = str(spec)
        if os.path.isdir(spec):
            out.extend(sorted(str(p) for p in Path(spec).glob(f"*{suffix}")))
        elif any(ch in spec for ch in "*?["):
            out.extend(sorted(glob.glob(spec)))
        else:
            out.append(spec)
    return out


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_graphs(paths) -> tuple:
    """(graphs, {path: sha256}) for a list of graph-cache files."""
    graphs, digests = [], {}
    for p in expand_paths(paths):
        digests[p] = file_digest(p)
        graphs.extend(read_graph_cache(p))
    return graphs, digests


def _memory_digest(graphs) -> str:
    h = hashlib.sha256()
    for g in graphs:
        h.update(np.ascontiguousarray(g.x, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(g.edges, dtype="<i8").tobytes())
        h.update(bytes([g.label]))
    return h.hexdigest()


# --------------------------------------------------------------------------
# cross-validation search
# --------------------------------------------------------------------------

def grid_cells(grid: dict, mode: str = "axis") -> list:
    """Grid cells as dicts over GRID_AXES.

    ``product`` takes the Cartesian product. ``axis`` starts from the
    default centre cell (or each axis's first value when the centre is not
    on that axis) and varies one axis at a time.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("search grid is empty")
    axes = {a: list(grid.get(a, [DEFAULT_CELL[a]])) for a in GRID_AXES}
    if mode == "product":
        return [dict(zip(GRID_AXES, combo)) for combo in itertools.product(*axes.values())]
    centre = {a: DEFAULT_CELL[a] if DEFAULT_CELL[a] in v else v[0] for a, v in axes.items()}
    cells = [centre]
    for a, values in axes.items():
        for v in values:
            cell = dict(centre, **{a: v})
            if cell not in cells:
                cells.append(cell)
    return cells


def cell_config(cell: dict, base: dgcnn.DgcnnConfig) -> dgcnn.DgcnnConfig:
    """``mlp_layers`` counts affine layers, output included."""
    return dataclasses.replace(
        base,
        conv_channels=(int(cell["conv_channels"]),) * int(cell["conv_depth"]),
        mlp_hidden=(int(cell["mlp_neurons"]),) * (int(cell["mlp_layers"]) - 1),
        pooling_rate=float(cell["pooling_rate"]),
        k=None,
    )


def stratified_folds(labels, folds: int, seed: int) -> list:
    """Validation index arrays; sizes differ by at most one, as do class counts."""
    labels = np.asarray(labels)
    if folds < 2:
        raise ValueError("need at least 2 folds")
    rng = stream_rng(seed, STREAM_FOLDS)
    for c in (0, 1):
        if np.sum(labels == c) < folds:
            raise StratificationError(f"class {c} has {np.sum(labels == c)} samples, fewer than {folds} folds")
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in (0, 1)])
    return [np.sort(order[f::folds]) for f in range(folds)]


def _fold_job(args):
    graphs, train_idx, val_idx, cfg, settings = args
    train = [graphs[i] for i in train_idx]
    val = [graphs[i] for i in val_idx]
    _, history = fit(train, cfg, settings, val_graphs=val)
    return max(history.val_f1)


@dataclass
class CvResult:
    best: dict
    rows: list  # (cell, [fold f1], mean f1)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            n_folds = len(self.rows[0][1]) if self.rows else 0
            w.writerow([*GRID_AXES, *(f"fold{i + 1}_f1" for i in range(n_folds)), "mean_f1"])
            for cell, scores, mean in self.rows:
                w.writerow([cell[a] for a in GRID_AXES] + [repr(float(s)) for s in scores] + [repr(float(mean))])


def run_cv_search(config: ExperimentConfig, graphs=None, out_dir=None) -> CvResult:
    """Mean over folds of the best-epoch validation F1, per grid cell."""
    if graphs is None:
        graphs, _ = load_graphs(config.train_paths)
    graphs = list(graphs)
    if not graphs:
        raise DataError("cv search needs a non-empty training set")
    folds = stratified_folds([g.label for g in graphs], config.folds, config.seed)
    all_idx = np.arange(len(graphs))
    cells = grid_cells(config.grid, config.grid_mode)
    jobs = []
    for cell in cells:
        cfg = cell_config(cell, config.model)
        for val_idx in folds:
            jobs.append((graphs, np.setdiff1d(all_idx, val_idx), val_idx, cfg, config.train))
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            scores = list(pool.map(_fold_job, jobs))
    else:
        scores = [_fold_job(j) for j in jobs]
    rows = []
    for i, cell in enumerate(cells):
        fold_scores = scores[i * len(folds):(i + 1) * len(folds)]
        rows.append((cell, fold_scores, float(np.mean(fold_scores))))
        logger.info("cell %s mean f1 %.5f", cell, rows[-1][2])
    best = max(rows, key=lambda r: r[2])[0]  # first cell wins ties
    result = CvResult(best, rows)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        result.write_csv(Path(out_dir) / "cv_search.csv")
    return result


# --------------------------------------------------------------------------
# training and evaluation
# --------------------------------------------------------------------------

@dataclass
class RunManifest:
    config: dict
    digests: dict
    k: int
    wall_clock: float
    train_loss: list
    val_f1: list
    checkpoint: str

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def train_model(config: ExperimentConfig, out_dir, graphs=None, val_graphs=None):
    """Fit on the training set and write ``model.ckpt`` + ``manifest.json``.

    Returns (checkpoint path, RunManifest).
    """
    out_dir = Path(out_dir)
    if graphs is None:
        graphs, digests = load_graphs(config.train_paths)
    else:
        graphs = list(graphs)
        digests = {"<memory>": _memory_digest(graphs)}
    if not graphs:
        raise DataError("training set is empty")
    out_dir.mkdir(parents=True, exist_ok=True)
    k = config.model.k if config.model.k is not None else select_k(graphs, config.model.pooling_rate)
    start = time.perf_counter()
    params, history = fit(graphs, config.model, config.train, val_graphs=val_graphs, k=k)
    elapsed = time.perf_counter() - start
    ckpt = out_dir / "model.ckpt"
    dgcnn.save_checkpoint(ckpt, config.model, params, {"seed": config.seed, "epochs": config.train.epochs})
    manifest = RunManifest(
        config=config.to_dict(),
        digests=digests,
        k=int(k),
        wall_clock=elapsed,
        train_loss=[float(v) for v in history.train_loss],
        val_f1=[float(v) for v in history.val_f1],
        checkpoint=str(ckpt),
    )
    manifest.write(out_dir / "manifest.json")
    return ckpt, manifest


def _check_compatible(graphs, cfg: dgcnn.DgcnnConfig, source):
    for g in graphs:
        if g.x.shape[1] != cfg.input_width:
            raise CompatibilityError(
                f"{source}: checkpoint expects {cfg.input_width}-wide node attributes, graph {g.sha256 or '?'} has {g.x.shape[1]}")


def evaluate_model(checkpoint, graphs, dataset="test", out_dir=None):
    """MetricsReport for ``graphs``; writes ``<dataset>_report.csv`` and ``<dataset>_scores.jsonl``."""
    cfg, params, _ = dgcnn.load_checkpoint(checkpoint)
    graphs = list(graphs)
    if not graphs:
        raise DataError(f"dataset {dataset!r} is empty")
    _check_compatible(graphs, cfg, checkpoint)
    scores = malicious_scores(graphs, params, cfg)
    truths = [g.label for g in graphs]
    report = evaluate_scores(scores, truths, dataset)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_report_csv([report], out_dir / f"{dataset}_report.csv")
        write_score_dump(scores, truths, out_dir / f"{dataset}_scores.jsonl")
    return report


def run_drift(checkpoint, buckets, out_dir=None, holdout=None):
    """Per-month reports and DegRate with the checkpoint's frozen k.

    ``buckets`` maps "YYYY-MM" to graph lists. ``holdout`` optionally adds
    the training month's held-out split as an extra (first) bucket, giving
    the twelve-row layout; without it the table covers only later months.
    """
    buckets = dict(buckets)
    if holdout is not None:
        key, graphs = holdout
        buckets[key] = graphs
    if len(buckets) < 2:
        raise DataError(f"drift evaluation needs at least 2 monthly buckets, got {len(buckets)}")
    cfg, params, _ = dgcnn.load_checkpoint(checkpoint)
    reports = {}
    for month in sorted(buckets):
        graphs = list(buckets[month])
        _check_compatible(graphs, cfg, checkpoint)
        reports[month] = evaluate_graphs(graphs, params, cfg, month)
    table = drift_table(reports)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_drift_csv(table, out_dir / "drift.csv")
        write_report_csv(list(table.months.values()), out_dir / "drift_reports.csv")
    return table
