"""A deterministic live-recommender world.

The world has hidden unit-norm user and item vectors. Logged history comes
from an exposure process that favours a fixed set of items (Zipf weights over
the items ranked by true attractiveness), so interaction counts mostly
reflect exposure rather than preference. The live phase serves top-k lists
from competing models to sticky user groups and samples clicks from the
hidden preferences.

Randomness comes from one ``SeedSequence(cfg.seed)`` split into three
substreams: ground truth, history, live. Live click draws are pre-allocated
one row of ``k`` uniforms per session, in session order, so the draws a
session sees never depend on what the models served before it.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .data import InteractionLog, concat_logs
from .errors import ModelFailure
from .models import RecModel
from .online import RecommendationEvent

_log = logging.getLogger(__name__)

DAY = 86_400
SLOT_SECONDS = 20


@dataclass(frozen=True)
class WorldConfig:
    n_users: int = 2_000
    n_items: int = 200
    latent_dim: int = 8
    zipf_exponent: float = 1.0
    click_sharpness: float = 8.0
    click_threshold: float = 0.6
    position_decay: float = 0.85
    session_rate: float = 0.5
    history_days: float = 30.0
    horizon: int = 18 * DAY
    exposure_size: int = 10
    fresh_user_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_items", "latent_dim", "exposure_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.horizon < 0 or self.history_days <= 0:
            raise ValueError("history_days must be > 0 and horizon >= 0")
        if self.session_rate <= 0 or not 0 < self.position_decay <= 1:
            raise ValueError("session_rate must be > 0 and position_decay in (0, 1]")
        if not 0 <= self.fresh_user_fraction:
            raise ValueError("fresh_user_fraction must be >= 0")

    @property
    def history_end(self) -> int:
        return int(round(self.history_days * DAY))

    @property
    def n_fresh(self) -> int:
        return int(round(self.fresh_user_fraction * self.n_users))

    def to_dict(self) -> dict:
        return asdict(self)


def _ids(prefix: str, n: int) -> np.ndarray:
    width = len(str(max(n - 1, 0)))
    return np.array([f"{prefix}{i:0{width}d}" for i in range(n)], dtype=object).astype(str)


def _unit_rows(rng, n, dim) -> np.ndarray:
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class GroundTruth:
    """Hidden preference model; only click sampling and the oracle model read it."""

    cfg: WorldConfig
    user_ids: np.ndarray
    item_ids: np.ndarray
    user_vectors: np.ndarray
    item_vectors: np.ndarray
    attractiveness: np.ndarray
    exposure_weights: np.ndarray

    @cached_property
    def user_lookup(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_ids)}

    def click_probability(self, users: np.ndarray, items: np.ndarray, positions) -> np.ndarray:
        aff = np.einsum("...d,...d->...", self.user_vectors[users], self.item_vectors[items])
        base = _sigmoid(self.cfg.click_sharpness * (aff - self.cfg.click_threshold))
        return base * self.cfg.position_decay ** np.asarray(positions)


def _streams(seed: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def ground_truth(cfg: WorldConfig) -> GroundTruth:
    rng = _streams(cfg.seed)[0]
    n_pop = cfg.n_users + cfg.n_fresh
    users = _unit_rows(rng, n_pop, cfg.latent_dim)
    items = _unit_rows(rng, cfg.n_items, cfg.latent_dim)
    attract = _sigmoid(cfg.click_sharpness * (users[:cfg.n_users] @ items.T - cfg.click_threshold)).mean(axis=0)
    rank = np.empty(cfg.n_items, dtype=np.int64)
    rank[np.argsort(-attract, kind="stable")] = np.arange(cfg.n_items)
    weights = (rank + 1.0) ** (-cfg.zipf_exponent)
    return GroundTruth(cfg, _ids("u", n_pop), _ids("i", cfg.n_items), users, items,
                       attract, weights / weights.sum())


def _session_schedule(rng, n_users: int, rate_per_day: float, start: int, length: int):
    """Poisson session arrivals: sorted start times and the user of each session."""
    if length <= 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    n = rng.poisson(rate_per_day * n_users * length / DAY)
    times = np.sort(rng.integers(start, start + length, size=n))
    users = rng.integers(0, n_users, size=n)
    return times.astype(np.int64), users.astype(np.int64)


def _strictly_increasing(t: np.ndarray) -> np.ndarray:
    steps = np.arange(len(t), dtype=np.int64)
    return np.maximum.accumulate(t - steps) + steps


def sample_exposures(truth: GroundTruth, rng, n_sessions: int) -> np.ndarray:
    """Item codes shown in each session slot, drawn with replacement by exposure weight."""
    cdf = np.cumsum(truth.exposure_weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random((n_sessions, truth.cfg.exposure_size)), side="right")


def generate_history(cfg: WorldConfig, truth: GroundTruth | None = None) -> InteractionLog:
    """Popularity-biased logged interactions over ``history_days``."""
    truth = truth or ground_truth(cfg)
    rng = _streams(cfg.seed)[1]
    times, users = _session_schedule(rng, cfg.n_users, cfg.session_rate, 0, cfg.history_end)
    E = cfg.exposure_size
    shown = sample_exposures(truth, rng, len(times))
    draws = rng.random((len(times), E))
    # repeated exposures inside a session keep only their first slot
    dup = np.zeros_like(shown, dtype=bool)
    srt = np.sort(shown, axis=1)
    if E > 1:
        order = np.argsort(shown, axis=1, kind="stable")
        first = np.ones_like(shown, dtype=bool)
        first[:, 1:] = srt[:, 1:] != srt[:, :-1]
        np.put_along_axis(dup, order, ~first, axis=1)
    pos = np.broadcast_to(np.arange(E), shown.shape)
    p = truth.click_probability(users[:, None], shown, pos)
    clicked = (draws < p) & ~dup
    s_idx, slot = np.nonzero(clicked)
    ts = times[s_idx] + 1 + SLOT_SECONDS * slot
    order = np.lexsort((slot, s_idx, ts))
    ts = _strictly_increasing(ts[order])
    u = users[s_idx][order]
    i = shown[s_idx, slot][order]
    return InteractionLog(truth.user_ids[u], truth.item_ids[i], ts)


def assign_model(user: str, L: int, seed: int) -> int:
    """Sticky A/B bucket of a user: a hash of (seed, user) modulo L."""
    if L < 1:
        raise ValueError("L must be >= 1")
    h = hashlib.blake2b(f"{seed}\x1f{user}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") % L


class GroundTruthModel(RecModel):
    """Serves each user's true top-k; unknown users get the exposure ranking."""

    kind = "oracle"

    def __init__(self, truth: GroundTruth, **kw):
        super().__init__(truth.item_ids, **kw)
        self.truth = truth

    def _keys(self, P, users):
        K = np.broadcast_to(self.truth.exposure_weights, P.shape).copy()
        if users is not None:
            look = self.truth.user_lookup
            for r, u in enumerate(users):
                if u in look:
                    K[r] = self.truth.item_vectors @ self.truth.user_vectors[look[u]]
        return K


@dataclass(frozen=True)
class OracleSpec:
    truth: GroundTruth = field(repr=False)
    name: str | None = "oracle"

    @property
    def tag(self) -> str:
        return self.name or "oracle"

    def fit(self, log, catalog=None) -> RecModel:
        return GroundTruthModel(self.truth)


@dataclass
class LiveRun:
    events: list[RecommendationEvent]
    clicks: InteractionLog | None
    retrain_instants: list[int]
    manifest: dict


def run_live_phase(history: InteractionLog, models: Sequence, cfg: WorldConfig,
                   retrain_every: int = 6 * 3600, k: int = 10,
                   truth: GroundTruth | None = None,
                   initial: Sequence[RecModel] | None = None) -> LiveRun:
    """Serve sticky A/B traffic for ``cfg.horizon`` simulated seconds.

    ``models`` are specs with ``tag`` and ``fit(log, catalog)``; they are
    refit on history plus live clicks (timestamps <= the retrain instant)
    every ``retrain_every`` seconds.
    """
    if retrain_every <= 0 or k < 1:
        raise ValueError("retrain_every must be > 0 and k >= 1")
    truth = truth or ground_truth(cfg)
    L = len(models)
    tags = [m.tag for m in models]
    if len(set(tags)) != L:
        raise ValueError("model tags must be unique")
    catalog = truth.item_ids
    t0 = cfg.history_end
    rng = _streams(cfg.seed)[2]
    n_pop = len(truth.user_ids)
    times, users = _session_schedule(rng, n_pop, cfg.session_rate, t0, int(cfg.horizon))
    draws = rng.random((len(times), k))
    retrains = list(range(t0 + retrain_every, t0 + int(cfg.horizon), retrain_every))
    manifest = {"world": cfg.to_dict(), "seed": cfg.seed, "models": tags, "k": k,
                "retrain_every": retrain_every, "retrain_instants": retrains,
                "n_sessions": int(len(times))}
    if len(times) == 0:
        return LiveRun([], None, retrains, manifest)

    def fit_all(log):
        out = []
        for spec in models:
            try:
                out.append(spec.fit(log, catalog))
            except Exception as exc:
                raise ModelFailure(f"training failed: {exc}", spec.tag) from exc
        return out

    current = list(initial) if initial is not None else fit_all(history)
    bucket = np.array([assign_model(u, L, cfg.seed) for u in truth.user_ids], dtype=np.int64)

    hist_item_code = np.searchsorted(catalog, history.item_ids)
    hist_user_code = np.array([truth.user_lookup[u] for u in history.user_ids], dtype=np.int64)
    base_profile: list[set[int]] = [set() for _ in range(n_pop)]
    for u, i in zip(hist_user_code[history.user_codes], hist_item_code[history.item_codes]):
        base_profile[u].add(int(i))
    live: list[list[tuple[int, int]]] = [[] for _ in range(n_pop)]
    click_u, click_i, click_t = [], [], []
    events: list[tuple[int, RecommendationEvent]] = []

    def to_model_codes(model):
        idx = model.item_index
        return np.array([idx.get(it, -1) for it in catalog], dtype=np.int64)

    maps = [to_model_codes(m) for m in current]

    def serve(batch: list[int]):
        for mi in range(L):
            sess = [s for s in batch if bucket[users[s]] == mi]
            if not sess:
                continue
            profiles = []
            for s in sess:
                u, t = users[s], times[s]
                prof = set(base_profile[u])
                prof.update(i for i, ts in live[u] if ts < t)
                codes = maps[mi][np.fromiter(prof, dtype=np.int64, count=len(prof))]
                profiles.append(np.sort(codes[codes >= 0]))
            names = list(truth.user_ids[users[sess]])
            try:
                tops = current[mi].recommend_codes(profiles, k, names)
            except Exception as exc:
                raise ModelFailure(f"serving failed: {exc}", tags[mi]) from exc
            inv = current[mi].items
            for s, top in zip(sess, tops):
                if len(top) == 0:
                    continue
                item_codes = np.searchsorted(catalog, inv[top])
                u, t = int(users[s]), int(times[s])
                events.append((s, RecommendationEvent(t, truth.user_ids[u],
                                                      tuple(catalog[item_codes]), tags[mi])))
                pos = np.arange(len(item_codes))
                p = truth.click_probability(np.full(len(pos), u), item_codes, pos)
                for j in np.flatnonzero(draws[s, :len(pos)] < p):
                    ts = t + 1 + SLOT_SECONDS * int(j)
                    live[u].append((int(item_codes[j]), ts))
                    click_u.append(u)
                    click_i.append(int(item_codes[j]))
                    click_t.append(ts)

    next_retrain = 0
    batch: list[int] = []
    in_batch: set[int] = set()
    for s in range(len(times)):
        if next_retrain < len(retrains) and times[s] >= retrains[next_retrain]:
            serve(batch)
            batch, in_batch = [], set()
            while next_retrain < len(retrains) and times[s] >= retrains[next_retrain]:
                R = retrains[next_retrain]
                snap = _click_log(truth, click_u, click_i, click_t, upto=R)
                current = fit_all(concat_logs(history, snap))
                maps = [to_model_codes(m) for m in current]
                next_retrain += 1
        u = int(users[s])
        if u in in_batch:
            serve(batch)
            batch, in_batch = [], set()
        batch.append(s)
        in_batch.add(u)
    serve(batch)

    events.sort(key=lambda e: e[0])
    clicks = _click_log(truth, click_u, click_i, click_t)
    return LiveRun([e for _, e in events], clicks, retrains, manifest)


def _click_log(truth, us, its, ts, upto: int | None = None) -> InteractionLog | None:
    if not us:
        return None
    u, i, t = np.asarray(us), np.asarray(its), np.asarray(ts)
    order = np.lexsort((i, u, t))
    u, i, t = u[order], i[order], t[order]
    if upto is not None:
        keep = t <= upto
        if not keep.any():
            return None
        u, i, t = u[keep], i[keep], t[keep]
    return InteractionLog(truth.user_ids[u], truth.item_ids[i], t)
