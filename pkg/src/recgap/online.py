"""Implicit click-through rate over a recommendation log."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import InteractionLog
from .errors import EmptyRecommendationLog, MalformedRow

DEFAULT_WINDOW = 600
RECS_HEADER = ("timestamp", "user_id", "item_ids")


@dataclass(frozen=True)
class RecommendationEvent:
    timestamp: int
    user: str
    items: tuple[str, ...]
    model: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if not self.items:
            raise ValueError("a recommendation needs at least one item")
        if len(set(self.items)) != len(self.items):
            raise ValueError("recommended items must be distinct")


@dataclass(frozen=True)
class CtrResult:
    value: float
    d: int
    n_events: int
    n_hits: int

    def to_dict(self) -> dict:
        return {"value": self.value, "d": self.d, "n_events": self.n_events, "n_hits": self.n_hits}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def event_hits(recs: Sequence[RecommendationEvent], log: InteractionLog, d: int) -> np.ndarray:
    """Per-event flag: did the user interact with a recommended item within [t, t + d]?"""
    if d < 0:
        raise ValueError("window d must be >= 0")
    n = len(recs)
    if n == 0:
        return np.zeros(0, dtype=bool)
    ulook, ilook = log.user_lookup, log.item_lookup
    n_items = log.n_items

    # explode events into (event, user-item pair, window start)
    ev, pair, start = [], [], []
    for e, r in enumerate(recs):
        u = ulook.get(r.user)
        if u is None:
            continue
        for it in r.items:
            i = ilook.get(it)
            if i is not None:
                ev.append(e)
                pair.append(u * n_items + i)
                start.append(r.timestamp)
    hits = np.zeros(n, dtype=bool)
    if not ev:
        return hits
    ev = np.asarray(ev, dtype=np.int64)
    pair = np.asarray(pair, dtype=np.int64)
    start = np.asarray(start, dtype=np.int64)

    lp = log.user_codes * n_items + log.item_codes
    order = np.lexsort((log.timestamps, lp))
    lp, lt = lp[order], log.timestamps[order]
    lo = np.searchsorted(lp, pair, side="left")
    hi = np.searchsorted(lp, pair, side="right")
    # within each pair block timestamps are sorted; find first t_j >= t by bisection
    a, b = lo.copy(), hi.copy()
    while True:
        active = a < b
        if not active.any():
            break
        mid = (a + b) // 2
        go_right = active & (lt[np.minimum(mid, len(lt) - 1)] < start)
        a = np.where(go_right, mid + 1, a)
        b = np.where(active & ~go_right, mid, b)
    found = (a < hi) & (lt[np.minimum(a, len(lt) - 1)] <= start + d)
    np.logical_or.at(hits, ev[found], True)
    return hits


def ictr(recs: Sequence[RecommendationEvent], log: InteractionLog, d: int = DEFAULT_WINDOW) -> CtrResult:
    if len(recs) == 0:
        raise EmptyRecommendationLog("no recommendation events")
    hits = event_hits(recs, log, d)
    n_hits = int(hits.sum())
    return CtrResult(n_hits / len(recs), int(d), len(recs), n_hits)


def ictr_by_model(recs: Sequence[RecommendationEvent], log: InteractionLog,
                  d: int = DEFAULT_WINDOW) -> dict[str, CtrResult]:
    """iCTR for each model tag present in ``recs`` (sorted by tag)."""
    hits = event_hits(recs, log, d)
    tags = np.array([r.model if r.model is not None else "" for r in recs], dtype=object)
    out = {}
    for tag in sorted(set(tags)):
        sel = tags == tag
        n_hits = int(hits[sel].sum())
        out[tag] = CtrResult(n_hits / int(sel.sum()), int(d), int(sel.sum()), n_hits)
    return out


def write_recs_csv(recs: Iterable[RecommendationEvent], dest, with_model: bool | None = None) -> None:
    recs = list(recs)
    if with_model is None:
        with_model = any(r.model is not None for r in recs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECS_HEADER + (("model",) if with_model else ()))
    for r in recs:
        row = [r.timestamp, r.user, "|".join(r.items)]
        if with_model:
            row.append(r.model or "")
        w.writerow(row)
    if hasattr(dest, "write"):
        dest.write(buf.getvalue())
    else:
        from .config import atomic_write_text
        atomic_write_text(dest, buf.getvalue())


def read_recs_csv(source) -> list[RecommendationEvent]:
    """Read ``timestamp,user_id,item_ids[,model]`` (items ``|``-separated)."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8", newline="") as fh:
            return read_recs_csv(fh)
    if isinstance(source, (bytes, bytearray)):
        return read_recs_csv(io.StringIO(bytes(source).decode("utf-8")))
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None or tuple(header[:3]) != RECS_HEADER or len(header) > 4:
        raise MalformedRow(1, f"expected header {','.join(RECS_HEADER)}[,model]")
    tagged = len(header) == 4
    out = []
    for line, row in enumerate(reader, 2):
        if len(row) != len(header):
            raise MalformedRow(line, "wrong number of fields")
        try:
            ts = int(row[0])
        except ValueError:
            raise MalformedRow(line, f"timestamp {row[0]!r} is not an integer") from None
        try:
            out.append(RecommendationEvent(ts, row[1], tuple(row[2].split("|")),
                                           (row[3] or None) if tagged else None))
        except ValueError as exc:
            raise MalformedRow(line, str(exc)) from None
    return out
