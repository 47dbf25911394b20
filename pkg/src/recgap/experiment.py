"""Offline-vs-online model selection sweep and Model Selection Recall (MSR).

For each dataset the offline recall of every model is computed over the whole
(val, beta, k) grid, next to each model's online iCTR. For a fixed
(val, beta), a (dataset, k) cell *matches* when the model with the best
recall is also the model with the best iCTR; MSR is the fraction of matching
cells. With 5 datasets and 14 cutoffs that is 70 cells per (val, beta), which
is the unit the reported percentages (9/70, 24/70) are consistent with.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import fmt
from .data import InteractionLog, compute_popularity
from .errors import MissingCell, ModelFailure
from .models import ModelSpec, RecModel
from .offline import ColdStart, Val, build_trials, rank_trials, recall_grid
from .online import DEFAULT_WINDOW, RecommendationEvent, ictr_by_model
from .simulator import WorldConfig, generate_history, ground_truth, run_live_phase

_log = logging.getLogger(__name__)

DEFAULT_K_VALUES = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 15, 20, 25, 50)
DEFAULT_BETA_VALUES = tuple(round(0.05 * j, 2) for j in range(21))
RESULTS_HEADER = ("dataset", "val", "beta", "k", "model", "recall", "ictr")
MSR_NOTE = ("MSR cells are (dataset, k) pairs for a fixed (val, beta); with 5 datasets and "
            "14 cutoffs that is 70 cells, so MSR moves in steps of 1/70.")


@dataclass
class ExperimentGrid:
    datasets: list[str]
    k_values: tuple[int, ...] = DEFAULT_K_VALUES
    beta_values: tuple[float, ...] = DEFAULT_BETA_VALUES
    val_values: tuple[Val, ...] = (Val.LOO, Val.LLOO)
    cold_start: ColdStart = ColdStart.INCLUDE
    d: int = DEFAULT_WINDOW

    def __post_init__(self):
        self.k_values = tuple(int(k) for k in self.k_values)
        self.beta_values = tuple(float(b) for b in self.beta_values)
        self.val_values = tuple(Val(v) for v in self.val_values)
        if min(self.k_values) < 1 or min(self.beta_values) < 0:
            raise ValueError("k >= 1 and beta >= 0 required")
        if len(set(self.datasets)) != len(self.datasets):
            raise ValueError("dataset tags must be unique")


@dataclass
class DatasetInput:
    """Everything one dataset contributes: models, an offline log, live logs."""

    tag: str
    models: list[RecModel]
    model_tags: list[str]
    eval_log: InteractionLog
    recs: list[RecommendationEvent]
    clicks: InteractionLog | None


@dataclass
class SimulatedDataset:
    """Recipe for a DatasetInput produced by the simulator."""

    tag: str
    world: WorldConfig
    models: list[ModelSpec]
    k: int = 10
    retrain_every: int = 6 * 3600
    holdout_fraction: float = 0.2

    def prepare(self) -> DatasetInput:
        truth = ground_truth(self.world)
        history = generate_history(self.world, truth)
        catalog = truth.item_ids
        if self.holdout_fraction > 0:
            held = np.array([_holdout(u, self.world.seed) < self.holdout_fraction
                             for u in history.user_ids])
            eval_log = history.select(held[history.user_codes])
            train_log = history.select(~held[history.user_codes])
        else:
            eval_log = train_log = history
        offline = [spec.fit(train_log, catalog) for spec in self.models]
        initial = offline if self.holdout_fraction == 0 else None
        live = run_live_phase(history, self.models, self.world, self.retrain_every, self.k,
                              truth=truth, initial=initial)
        return DatasetInput(self.tag, offline, [m.tag for m in self.models], eval_log,
                            live.events, live.clicks)


DEFAULT_MODELS = (
    ModelSpec("popularity"),
    ModelSpec("mf-knn", {"f": 4, "lambda": 1.0, "alpha": 5.0, "iters": 6, "m": 50}, "knn-f4"),
    ModelSpec("mf-knn", {"f": 8, "lambda": 1.0, "alpha": 5.0, "iters": 6, "m": 50}, "knn-f8"),
    ModelSpec("mf-knn", {"f": 12, "lambda": 1.0, "alpha": 5.0, "iters": 6, "m": 50}, "knn-f12"),
    ModelSpec("mf-knn", {"f": 16, "lambda": 0.1, "alpha": 20.0, "iters": 6, "m": 50}, "knn-f16"),
)

# desk-scale stand-in for one live dataset: 10k users, 500 items, 30 days of
# logged history, 6 days of A/B traffic with retraining every 2 days
DESK_WORLD = WorldConfig(n_users=10_000, n_items=500, latent_dim=8, zipf_exponent=1.0,
                         click_threshold=0.6, session_rate=0.3, history_days=30.0,
                         horizon=6 * 86_400)


def simulated_worlds(seed: int, n_datasets: int = 5, world: WorldConfig = DESK_WORLD,
                     models: Sequence[ModelSpec] = DEFAULT_MODELS, k: int = 10,
                     retrain_every: int = 2 * 86_400,
                     holdout_fraction: float = 0.2) -> list[SimulatedDataset]:
    """``n_datasets`` independent worlds; world ``d`` of run ``seed`` uses seed ``1000 * seed + d``."""
    out = []
    for d in range(n_datasets):
        cfg = dataclasses.replace(world, seed=1000 * seed + d)
        out.append(SimulatedDataset(f"sim{d}", cfg, list(models), k, retrain_every, holdout_fraction))
    return out


def _holdout(user: str, seed: int) -> float:
    h = hashlib.blake2b(f"holdout\x1f{seed}\x1f{user}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") / 2.0 ** 64


@dataclass
class DatasetResult:
    tag: str
    model_tags: list[str]
    recall: np.ndarray  # (n_val, n_beta, n_k, L)
    ictr: np.ndarray  # (L,)
    n_events: np.ndarray
    seconds: float = 0.0


@dataclass
class GridResults:
    grid: ExperimentGrid
    datasets: dict[str, DatasetResult]

    def offline_vector(self, dataset: str, val, beta: float, k: int) -> np.ndarray:
        g = self.grid
        try:
            res = self.datasets[dataset]
            return res.recall[g.val_values.index(Val(val)), g.beta_values.index(float(beta)),
                              g.k_values.index(int(k))]
        except (KeyError, ValueError):
            raise MissingCell((dataset, str(val), beta, k)) from None

    def online_vector(self, dataset: str) -> np.ndarray:
        try:
            return self.datasets[dataset].ictr
        except KeyError:
            raise MissingCell(dataset) from None

    def rows(self):
        g = self.grid
        for tag in g.datasets:
            res = self.datasets[tag]
            for v, val in enumerate(g.val_values):
                for b, beta in enumerate(g.beta_values):
                    for j, k in enumerate(g.k_values):
                        for m, model in enumerate(res.model_tags):
                            yield (tag, val.value, beta, k, model,
                                   res.recall[v, b, j, m], res.ictr[m])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for tag, val, beta, k, model, rec, ct in self.rows():
            w.writerow([tag, val, fmt(beta), k, model, fmt(rec), fmt(ct)])
        return buf.getvalue()


def evaluate_dataset(data: DatasetInput, grid: ExperimentGrid) -> DatasetResult:
    """Offline recall over the full grid and online iCTR for one dataset."""
    start = time.perf_counter()
    L = len(data.models)
    pop = compute_popularity(data.eval_log)
    recall = np.empty((len(grid.val_values), len(grid.beta_values), len(grid.k_values), L))
    for v, val in enumerate(grid.val_values):
        trials = build_trials(data.eval_log, val)
        for m, model in enumerate(data.models):
            try:
                ranks = rank_trials(trials, model)
            except ModelFailure as exc:
                raise ModelFailure(f"{data.tag}/{val.value}: {exc}", data.model_tags[m]) from exc
            recall[v, :, :, m] = recall_grid(trials, ranks, pop, grid.k_values,
                                             grid.beta_values, grid.cold_start)
    ictr = np.zeros(L)
    n_events = np.zeros(L, dtype=np.int64)
    if data.recs and data.clicks is not None:
        by_model = ictr_by_model(data.recs, data.clicks, grid.d)
        for m, tag in enumerate(data.model_tags):
            if tag in by_model:
                ictr[m] = by_model[tag].value
                n_events[m] = by_model[tag].n_events
    elif data.recs:
        counts = {t: 0 for t in data.model_tags}
        for r in data.recs:
            counts[r.model] = counts.get(r.model, 0) + 1
        n_events = np.array([counts[t] for t in data.model_tags])
    return DatasetResult(data.tag, list(data.model_tags), recall, ictr, n_events,
                         time.perf_counter() - start)


def _run_one(item, grid: ExperimentGrid) -> DatasetResult:
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        t0 = time.perf_counter()
        data = item.prepare() if isinstance(item, SimulatedDataset) else item
        res = evaluate_dataset(data, grid)
        res.seconds = time.perf_counter() - t0
    _log.info("dataset %s done in %.1fs", res.tag, res.seconds)
    return res


def run_grid(grid: ExperimentGrid, worlds: Sequence[DatasetInput | SimulatedDataset],
             threads: int = 1) -> GridResults:
    """Compute every recall variant and every iCTR, keyed by dataset tag.

    BLAS is pinned to one thread inside each dataset job, so results do not
    depend on ``threads``.
    """
    tags = [w.tag for w in worlds]
    if tags != list(grid.datasets):
        raise ValueError(f"worlds {tags} do not match grid datasets {grid.datasets}")
    if threads > 1 and len(worlds) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(worlds))) as pool:
            out = list(pool.map(_run_one, worlds, [grid] * len(worlds)))
    else:
        out = [_run_one(w, grid) for w in worlds]
    return GridResults(grid, {r.tag: r for r in out})


# ---------------------------------------------------------------------------
# MSR


@dataclass
class MsrEntry:
    val: Val
    beta: float
    msr: float
    n_cells: int
    n_matches: int
    cells: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"val": self.val.value, "beta": self.beta, "msr": self.msr,
                "n_cells": self.n_cells, "n_matches": self.n_matches, "cells": self.cells}


def _argmax(vec: np.ndarray) -> tuple[int, bool]:
    best = int(np.argmax(vec))
    return best, bool(np.sum(vec == vec[best]) > 1)


def compute_msr(results: GridResults, val, beta: float) -> MsrEntry:
    """Share of (dataset, k) cells whose offline-best model is the online-best one.

    Ties resolve to the lowest model index on both sides and are flagged.
    """
    val = Val(val)
    cells = []
    for tag in results.grid.datasets:
        online = results.online_vector(tag)
        s_best, s_tie = _argmax(online)
        for k in results.grid.k_values:
            e_best, e_tie = _argmax(results.offline_vector(tag, val, beta, k))
            cells.append({"dataset": tag, "k": k, "offline_best": e_best, "online_best": s_best,
                          "offline_tie": e_tie, "online_tie": s_tie, "match": e_best == s_best})
    n_match = sum(c["match"] for c in cells)
    return MsrEntry(val, float(beta), n_match / len(cells), len(cells), n_match, cells)


@dataclass
class MsrReport:
    entries: dict[tuple[Val, float], MsrEntry]
    results: GridResults | None = None
    note: str = MSR_NOTE

    def msr(self, val, beta: float) -> float:
        return self.entries[(Val(val), float(beta))].msr

    def to_dict(self) -> dict:
        d = {"note": self.note,
             "entries": [e.to_dict() for _, e in sorted(self.entries.items(),
                                                         key=lambda kv: (kv[0][0].value, kv[0][1]))]}
        if self.results is not None:
            g = self.results.grid
            d["grid"] = {"datasets": list(g.datasets), "k_values": list(g.k_values),
                         "beta_values": list(g.beta_values),
                         "val_values": [v.value for v in g.val_values], "d": g.d,
                         "cold_start": g.cold_start.value}
            d["datasets"] = {
                tag: {"models": r.model_tags, "online": [float(x) for x in r.ictr],
                      "n_events": [int(x) for x in r.n_events]}
                for tag, r in self.results.datasets.items()}
        best = best_config(self)
        d["best"] = {"val": best[0].value, "beta": best[1], "msr": self.msr(*best)}
        return d

    def plot_data_csv(self) -> str:
        vals = sorted({v for v, _ in self.entries}, key=lambda v: v.value)
        betas = sorted({b for _, b in self.entries})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["beta"] + [f"msr_{v.value}" for v in vals])
        for b in betas:
            w.writerow([fmt(b)] + [fmt(self.entries[(v, b)].msr) if (v, b) in self.entries else ""
                                   for v in vals])
        return buf.getvalue()


def build_report(results: GridResults) -> MsrReport:
    g = results.grid
    entries = {(v, b): compute_msr(results, v, b) for v in g.val_values for b in g.beta_values}
    return MsrReport(entries, results)


def best_config(report: MsrReport) -> tuple[Val, float]:
    """(val, beta) with the highest MSR; ties go to smaller beta, then LOO before LLOO."""
    if not report.entries:
        raise ValueError("empty report")
    order = {Val.LOO: 0, Val.LLOO: 1}
    return min(report.entries, key=lambda vb: (-report.entries[vb].msr, vb[1], order[vb[0]]))


def read_results_csv(source) -> GridResults:
    """Rebuild GridResults from a results CSV written by ``GridResults.to_csv``."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8", newline="") as fh:
            return read_results_csv(fh)
    rows = list(csv.reader(source))
    if not rows or tuple(rows[0]) != RESULTS_HEADER:
        raise ValueError("not a results CSV")
    datasets, vals, betas, ks, models = [], [], [], [], {}
    for r in rows[1:]:
        tag, val, beta, k, model = r[0], Val(r[1]), float(r[2]), int(r[3]), r[4]
        for seq, x in ((datasets, tag), (vals, val), (betas, beta), (ks, k)):
            if x not in seq:
                seq.append(x)
        models.setdefault(tag, [])
        if model not in models[tag]:
            models[tag].append(model)
    grid = ExperimentGrid(datasets, tuple(ks), tuple(betas), tuple(vals))
    out = {}
    for tag in datasets:
        L = len(models[tag])
        out[tag] = DatasetResult(tag, models[tag], np.full((len(vals), len(betas), len(ks), L), np.nan),
                                 np.zeros(L), np.zeros(L, dtype=np.int64))
    for r in rows[1:]:
        res = out[r[0]]
        m = res.model_tags.index(r[4])
        res.recall[vals.index(Val(r[1])), betas.index(float(r[2])), ks.index(int(r[3])), m] = float(r[5])
        res.ictr[m] = float(r[6])
    for res in out.values():
        if np.isnan(res.recall).any():
            raise MissingCell(res.tag)
    return GridResults(grid, out)
