"""Interaction logs: ingestion, per-user indexing, relevant items and popularity."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from functools import cached_property
from typing import BinaryIO, Iterable, Iterator, Mapping

import numpy as np
import pandas as pd

from .errors import EmptyLog, MalformedRow, UnknownItem, UnknownUser

CSV_HEADER = ("user_id", "item_id", "timestamp")


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: int

    def __post_init__(self):
        if not self.user or not self.item:
            raise ValueError("user and item identifiers must be non-empty")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


class InteractionLog:
    """Immutable, indexed set of timestamped (user, item) events.

    Users and items are coded by their position in the sorted identifier
    arrays ``user_ids`` / ``item_ids``, so ascending code order is ascending
    identifier order. Events are kept in input order; ``order`` is the
    permutation grouping them by user, then timestamp, then input position.
    """

    def __init__(self, users, items, timestamps):
        users = np.asarray(users, dtype=object)
        items = np.asarray(items, dtype=object)
        ts = np.asarray(timestamps, dtype=np.int64)
        if not (len(users) == len(items) == len(ts)):
            raise ValueError("column lengths differ")
        if len(ts) == 0:
            raise EmptyLog("log has no interactions")
        if ts.min() < 0:
            raise ValueError("timestamps must be non-negative")

        user_ids, ucodes = np.unique(users.astype(str), return_inverse=True)
        item_ids, icodes = np.unique(items.astype(str), return_inverse=True)
        if user_ids[0] == "" or item_ids[0] == "":
            raise ValueError("empty identifier")
        self.user_ids: np.ndarray = user_ids
        self.item_ids: np.ndarray = item_ids
        self.user_codes = ucodes.astype(np.int64)
        self.item_codes = icodes.astype(np.int64)
        self.timestamps = ts.copy()
        for a in (self.user_ids, self.item_ids, self.user_codes, self.item_codes, self.timestamps):
            a.flags.writeable = False

        pos = np.arange(len(ts))
        self.order = np.lexsort((pos, self.timestamps, self.user_codes))
        self.user_ptr = np.zeros(len(user_ids) + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.user_codes, minlength=len(user_ids)), out=self.user_ptr[1:])
        self.counts = np.bincount(self.item_codes, minlength=len(item_ids))
        self.order.flags.writeable = False
        self.user_ptr.flags.writeable = False
        self.counts.flags.writeable = False

    @classmethod
    def from_interactions(cls, interactions: Iterable[Interaction]) -> InteractionLog:
        rows = list(interactions)
        return cls([r.user for r in rows], [r.item for r in rows], [r.timestamp for r in rows])

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> InteractionLog:
        return cls(frame["user_id"].to_numpy(), frame["item_id"].to_numpy(),
                   frame["timestamp"].to_numpy())

    def __len__(self) -> int:
        return len(self.timestamps)

    def __eq__(self, other) -> bool:
        if not isinstance(other, InteractionLog):
            return NotImplemented
        return (np.array_equal(self.user_ids, other.user_ids)
                and np.array_equal(self.item_ids, other.item_ids)
                and np.array_equal(self.user_codes, other.user_codes)
                and np.array_equal(self.item_codes, other.item_codes)
                and np.array_equal(self.timestamps, other.timestamps))

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @cached_property
    def user_lookup(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_ids)}

    @cached_property
    def item_lookup(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.item_ids)}

    def user_code(self, user: str) -> int:
        try:
            return self.user_lookup[user]
        except KeyError:
            raise UnknownUser(user) from None

    def user_events(self, code: int) -> tuple[np.ndarray, np.ndarray]:
        """Item codes and timestamps of one user, in per-user order."""
        sel = self.order[self.user_ptr[code]:self.user_ptr[code + 1]]
        return self.item_codes[sel], self.timestamps[sel]

    def iter_users(self) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
        items = self.item_codes[self.order]
        ts = self.timestamps[self.order]
        for u in range(self.n_users):
            lo, hi = self.user_ptr[u], self.user_ptr[u + 1]
            yield u, items[lo:hi], ts[lo:hi]

    def history(self, user: str) -> list[tuple[str, int]]:
        items, ts = self.user_events(self.user_code(user))
        return [(self.item_ids[i], int(t)) for i, t in zip(items, ts)]

    @cached_property
    def user_index(self) -> dict[str, list[tuple[str, int]]]:
        return {self.user_ids[u]: [(self.item_ids[i], int(t)) for i, t in zip(items, ts)]
                for u, items, ts in self.iter_users()}

    @cached_property
    def item_counts(self) -> dict[str, int]:
        return {self.item_ids[i]: int(c) for i, c in enumerate(self.counts)}

    @property
    def interactions(self) -> list[Interaction]:
        return [Interaction(self.user_ids[u], self.item_ids[i], int(t))
                for u, i, t in zip(self.user_codes, self.item_codes, self.timestamps)]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "user_id": self.user_ids[self.user_codes],
            "item_id": self.item_ids[self.item_codes],
            "timestamp": self.timestamps,
        })

    def select(self, mask: np.ndarray) -> InteractionLog:
        """New log with the events where ``mask`` is true, input order kept."""
        mask = np.asarray(mask, dtype=bool)
        return InteractionLog(self.user_ids[self.user_codes[mask]],
                              self.item_ids[self.item_codes[mask]],
                              self.timestamps[mask])

    def select_users(self, users: Iterable[str]) -> InteractionLog:
        keep = np.zeros(self.n_users, dtype=bool)
        lookup = self.user_lookup
        for u in users:
            if u in lookup:
                keep[lookup[u]] = True
        return self.select(keep[self.user_codes])

    def before(self, t: int) -> InteractionLog:
        return self.select(self.timestamps <= t)

    def to_csv(self, dest) -> None:
        write_interactions_csv(self.user_ids[self.user_codes], self.item_ids[self.item_codes],
                               self.timestamps, dest)


def concat_logs(*logs: InteractionLog | None) -> InteractionLog:
    parts = [lg for lg in logs if lg is not None and len(lg)]
    if not parts:
        raise EmptyLog("nothing to concatenate")
    return InteractionLog(
        np.concatenate([lg.user_ids[lg.user_codes] for lg in parts]),
        np.concatenate([lg.item_ids[lg.item_codes] for lg in parts]),
        np.concatenate([lg.timestamps for lg in parts]),
    )


def write_interactions_csv(users, items, timestamps, dest) -> None:
    frame = pd.DataFrame({"user_id": users, "item_id": items, "timestamp": timestamps})
    text = frame.to_csv(index=False, lineterminator="\n")
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _open_source(source) -> io.TextIOBase:
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"))
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def ingest_log(source: str | os.PathLike | bytes | BinaryIO) -> InteractionLog:
    """Parse a ``user_id,item_id,timestamp`` CSV into an indexed log.

    Any malformed row aborts ingestion with :class:`MalformedRow` carrying the
    1-based physical line number (the header is line 1).
    """
    fh = _open_source(source)
    try:
        header = fh.readline().rstrip("\r\n")
        if tuple(h.strip() for h in header.split(",")) != CSV_HEADER:
            raise MalformedRow(1, f"expected header {','.join(CSV_HEADER)!r}, got {header!r}")
        try:
            frame = pd.read_csv(fh, header=None, names=list(CSV_HEADER), dtype=str,
                                keep_default_na=False, na_filter=False,
                                skip_blank_lines=False, engine="c")
        except pd.errors.ParserError as exc:
            import re
            m = re.search(r"line (\d+)", str(exc))
            line = int(m.group(1)) + 1 if m else -1
            raise MalformedRow(line, "wrong number of fields") from None
        except pd.errors.EmptyDataError:
            frame = pd.DataFrame(columns=list(CSV_HEADER))
    finally:
        if fh is not source:
            fh.close()

    if len(frame) == 0:
        raise EmptyLog("no interactions in source")

    for col, name in (("user_id", "user"), ("item_id", "item")):
        bad = frame[col].isna() | (frame[col].str.len() == 0)
        if bad.any():
            raise MalformedRow(int(np.flatnonzero(bad.to_numpy())[0]) + 2, f"empty {name} identifier")
    ts = frame["timestamp"]
    ok = ts.notna() & ts.str.fullmatch(r"-?[0-9]+").fillna(False).astype(bool)
    if not ok.all():
        line = int(np.flatnonzero(~ok.to_numpy())[0]) + 2
        raise MalformedRow(line, f"timestamp {ts.iloc[line - 2]!r} is not an integer")
    tsv = ts.astype(np.int64).to_numpy()
    if (tsv < 0).any():
        line = int(np.flatnonzero(tsv < 0)[0]) + 2
        raise MalformedRow(line, "negative timestamp")
    return InteractionLog(frame["user_id"].to_numpy(), frame["item_id"].to_numpy(), tsv)


class RelevantItems(Mapping):
    """Per-user set of distinct interacted items (N_u).

    Also exposes ``codes[u]``, the sorted distinct item codes of user code ``u``.
    """

    def __init__(self, log: InteractionLog):
        self.log = log
        self.codes = [np.unique(items) for _, items, _ in log.iter_users()]

    def __getitem__(self, user: str) -> frozenset[str]:
        try:
            code = self.log.user_lookup[user]
        except KeyError:
            raise UnknownUser(user) from None
        return frozenset(self.log.item_ids[self.codes[code]])

    def __iter__(self):
        return iter(self.log.user_ids)

    def __len__(self) -> int:
        return self.log.n_users

    def sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.codes], dtype=np.int64)


def relevant_items(log: InteractionLog) -> RelevantItems:
    if len(log) == 0:
        raise EmptyLog("log is empty")
    return RelevantItems(log)


class PopularityTable(Mapping):
    """Relative popularity p(i) of each item seen in a log."""

    def __init__(self, item_ids, values):
        self.item_ids = np.asarray(item_ids, dtype=object).astype(str)
        self.values = np.asarray(values, dtype=np.float64)
        if np.any(self.values <= 0):
            raise ValueError("popularity must be positive")
        self._lookup = {it: i for i, it in enumerate(self.item_ids)}

    def __getitem__(self, item: str) -> float:
        try:
            return float(self.values[self._lookup[item]])
        except KeyError:
            raise UnknownItem(item) from None

    def __iter__(self):
        return iter(self.item_ids)

    def __len__(self) -> int:
        return len(self.item_ids)

    def lookup(self, items) -> np.ndarray:
        """Vector of p(i) for identifiers ``items``; raises on unknowns."""
        idx = np.empty(len(items), dtype=np.int64)
        for n, it in enumerate(items):
            try:
                idx[n] = self._lookup[it]
            except KeyError:
                raise UnknownItem(it) from None
        return self.values[idx]

    def scaled(self, c: float) -> PopularityTable:
        return PopularityTable(self.item_ids, self.values * c)


def compute_popularity(log: InteractionLog) -> PopularityTable:
    if len(log) == 0:
        raise EmptyLog("log is empty")
    keep = log.counts > 0
    return PopularityTable(log.item_ids[keep], log.counts[keep] / len(log))
