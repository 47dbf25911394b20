"""Leave-one-out and leave-last-one-out recall, with popularity penalization.

Both protocols reduce to a list of *trials* ``(user, target, profile)``:

* LOO: every distinct item ``i`` of a user is predicted from ``N_u \\ {i}``.
* LLOO: every first occurrence ``(i1, t1)`` of an item in the user's history
  is predicted from the items seen strictly before ``t1``.

A model is asked once per trial for the rank of its target. Hits at any
cutoff ``k`` and any popularity exponent ``beta`` then follow from those
ranks alone, which is what makes the full (val, beta, k) grid cheap.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionLog, PopularityTable, RelevantItems
from .errors import InstanceTooLarge, ModelFailure, UnknownItem, UnknownUser
from .models import RecModel, target_ranks


class Val(str, enum.Enum):
    LOO = "loo"
    LLOO = "lloo"


class ColdStart(str, enum.Enum):
    INCLUDE = "include_with_fallback"
    SKIP = "skip"


@dataclass(frozen=True)
class MetricConfig:
    val: Val = Val.LOO
    beta: float = 0.0
    k: int = 10
    cold_start: ColdStart = ColdStart.INCLUDE

    def __post_init__(self):
        object.__setattr__(self, "val", Val(self.val))
        object.__setattr__(self, "cold_start", ColdStart(self.cold_start))
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")


@dataclass
class RecallResult:
    value: float
    per_user: dict[str, tuple[float, float]]
    config: MetricConfig
    seen_filtered: bool = True

    @property
    def n_users(self) -> int:
        return sum(1 for _, den in self.per_user.values() if den > 0)

    def to_dict(self, per_user: bool = False) -> dict:
        d = {"metric": "recall", "val": self.config.val.value, "beta": self.config.beta,
             "k": self.config.k, "cold_start": self.config.cold_start.value,
             "value": self.value, "n_users": self.n_users, "seen_filtered": self.seen_filtered}
        if per_user:
            d["per_user"] = {u: list(v) for u, v in self.per_user.items()}
        return d

    def to_json(self, per_user: bool = False) -> str:
        return json.dumps(self.to_dict(per_user))


@dataclass
class Trials:
    """Held-out prediction tasks in log coordinates."""

    log: InteractionLog
    val: Val
    users: np.ndarray
    targets: np.ndarray
    profiles: list[np.ndarray] = field(repr=False)

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def cold(self) -> np.ndarray:
        return np.array([len(p) == 0 for p in self.profiles], dtype=bool)


def build_trials(log: InteractionLog, val: Val | str) -> Trials:
    val = Val(val)
    users, targets, profiles = [], [], []
    for u, items, ts in log.iter_users():
        if val is Val.LOO:
            distinct = np.unique(items)
            for j, i in enumerate(distinct):
                users.append(u)
                targets.append(i)
                profiles.append(np.delete(distinct, j))
        else:
            _, first = np.unique(items, return_index=True)
            for pos in np.sort(first):
                cut = np.searchsorted(ts, ts[pos], side="left")
                users.append(u)
                targets.append(items[pos])
                profiles.append(np.unique(items[:cut]))
    return Trials(log, val, np.array(users, dtype=np.int64), np.array(targets, dtype=np.int64),
                  profiles)


def rank_trials(trials: Trials, model: RecModel) -> np.ndarray:
    """Rank of every trial's target under ``model`` (-1: unreachable)."""
    log = trials.log
    index = model.item_index
    to_model = np.array([index.get(it, -1) for it in log.item_ids], dtype=np.int64)
    profiles = []
    for p in trials.profiles:
        q = to_model[p]
        profiles.append(q[q >= 0])
    user_names = log.user_ids[trials.users]
    try:
        return target_ranks(model, profiles, to_model[trials.targets], user_names)
    except ModelFailure:
        raise
    except Exception as exc:
        raise ModelFailure(f"model could not score profiles: {exc}", model.kind) from exc


def _penalty(log: InteractionLog, pop: PopularityTable | None, beta: float) -> np.ndarray:
    """p(i)^-beta for every item code of ``log``."""
    if pop is None:
        if beta != 0:
            raise ValueError("a popularity table is required for beta > 0")
        return np.ones(log.n_items)
    return np.power(pop.lookup(log.item_ids), -float(beta))


def _user_terms(trials: Trials, hits: np.ndarray, w: np.ndarray, include: np.ndarray):
    n = trials.log.n_users
    wt = np.where(include, w[trials.targets], 0.0)
    num = np.bincount(trials.users, weights=np.where(hits, wt, 0.0), minlength=n)
    den = np.bincount(trials.users, weights=wt, minlength=n)
    return num, den


def _weighted_value(num: np.ndarray, den: np.ndarray) -> float:
    """sum_u w(u) * num_u / den_u with w(u) = den_u / sum_v den_v, in user-code order."""
    total = den.sum()
    active = den > 0
    if total == 0:
        return 0.0
    weights = den[active] / total
    return float(np.sum(weights * (num[active] / den[active])))


def _result(trials, ranks, cfg: MetricConfig, pop, weighted: bool, seen_filtered: bool) -> RecallResult:
    if trials.val is not cfg.val:
        raise ValueError("trials were built for a different protocol")
    hits = (ranks >= 0) & (ranks < cfg.k)
    include = np.ones(len(trials), dtype=bool)
    if cfg.cold_start is ColdStart.SKIP:
        include = ~trials.cold
    w = _penalty(trials.log, pop, cfg.beta) if weighted else np.ones(trials.log.n_items)
    num, den = _user_terms(trials, hits, w, include)
    if weighted:
        value = _weighted_value(num, den)
    else:
        value = float(num.sum() / den.sum()) if den.sum() > 0 else 0.0
    per_user = {str(trials.log.user_ids[u]): (float(num[u]), float(den[u])) for u in range(len(num))}
    return RecallResult(value, per_user, cfg, seen_filtered)


def evaluate(log: InteractionLog, model: RecModel, config: MetricConfig,
             pop: PopularityTable | None = None) -> RecallResult:
    if pop is None and config.beta != 0:
        raise ValueError("a popularity table is required for beta > 0")
    trials = build_trials(log, config.val)
    ranks = rank_trials(trials, model)
    return _result(trials, ranks, config, pop, weighted=pop is not None, seen_filtered=model.filter_seen)


def recall_loo(log, model, k: int, cold_start=ColdStart.INCLUDE) -> RecallResult:
    cfg = MetricConfig(Val.LOO, 0.0, k, cold_start)
    trials = build_trials(log, Val.LOO)
    return _result(trials, rank_trials(trials, model), cfg, None, False, model.filter_seen)


def recall_lloo(log, model, k: int, cold_start=ColdStart.INCLUDE) -> RecallResult:
    cfg = MetricConfig(Val.LLOO, 0.0, k, cold_start)
    trials = build_trials(log, Val.LLOO)
    return _result(trials, rank_trials(trials, model), cfg, None, False, model.filter_seen)


def recall_loo_beta(log, model, k: int, beta: float, pop: PopularityTable,
                    cold_start=ColdStart.INCLUDE) -> RecallResult:
    cfg = MetricConfig(Val.LOO, beta, k, cold_start)
    trials = build_trials(log, Val.LOO)
    return _result(trials, rank_trials(trials, model), cfg, pop, True, model.filter_seen)


def recall_lloo_beta(log, model, k: int, beta: float, pop: PopularityTable,
                     cold_start=ColdStart.INCLUDE) -> RecallResult:
    cfg = MetricConfig(Val.LLOO, beta, k, cold_start)
    trials = build_trials(log, Val.LLOO)
    return _result(trials, rank_trials(trials, model), cfg, pop, True, model.filter_seen)


def recall_grid(trials: Trials, ranks: np.ndarray, pop: PopularityTable, ks, betas,
                cold_start=ColdStart.INCLUDE) -> np.ndarray:
    """Popularity-penalized recall for every (beta, k); shape ``(len(betas), len(ks))``.

    Each cell equals ``recall_*_beta`` with the same arguments.
    """
    include = np.ones(len(trials), dtype=bool)
    if ColdStart(cold_start) is ColdStart.SKIP:
        include = ~trials.cold
    out = np.empty((len(betas), len(ks)))
    reachable = ranks >= 0
    for b, beta in enumerate(betas):
        w = _penalty(trials.log, pop, beta)
        for j, k in enumerate(ks):
            num, den = _user_terms(trials, reachable & (ranks < k), w, include)
            out[b, j] = _weighted_value(num, den)
    return out


def user_weight(user: str, relevant: RelevantItems, pop: PopularityTable, beta: float) -> float:
    """w(u) = sum_{N_u} p^-beta / sum_v sum_{N_v} p^-beta (weights sum to one)."""
    log = relevant.log
    try:
        code = log.user_lookup[user]
    except KeyError:
        raise UnknownUser(user) from None
    w = np.power(pop.lookup(log.item_ids), -float(beta))
    per_user = np.array([w[c].sum() for c in relevant.codes])
    return float(per_user[code] / per_user.sum())


# ---------------------------------------------------------------------------
# direct transcription, used as a test oracle

ORACLE_MAX_USERS = 16
ORACLE_MAX_ITEMS = 16
ORACLE_MAX_EVENTS = 64


def oracle_recall(log: InteractionLog, model: RecModel, config: MetricConfig,
                  pop: PopularityTable | None = None) -> float:
    """Naive evaluation of the four recall variants straight from their sums.

    Plain-Python sets and loops, one ``model.recommend`` call per held-out
    event. Only for tiny instances.
    """
    if (log.n_users > ORACLE_MAX_USERS or log.n_items > ORACLE_MAX_ITEMS
            or len(log) > ORACLE_MAX_EVENTS):
        raise InstanceTooLarge(f"{log.n_users} users / {log.n_items} items / {len(log)} events")
    skip = config.cold_start is ColdStart.SKIP
    F = {}
    for f in log.interactions:
        F.setdefault(f.user, []).append((f.item, f.timestamp))
    for u in F:
        F[u].sort(key=lambda e: e[1])  # stable: ties keep input order

    def p_pen(i):
        if pop is None:
            return 1.0
        if i not in pop:
            raise UnknownItem(i)
        return pop[i] ** (-config.beta)

    numerators, denominators = {}, {}
    for u in sorted(F):
        N_u = {i for i, _ in F[u]}
        num = den = 0.0
        if config.val is Val.LOO:
            for i in sorted(N_u):
                M = N_u - {i}
                if skip and not M:
                    continue
                top = model.recommend(M, config.k, user=u)
                num += len({i} & set(top)) * p_pen(i)
                den += p_pen(i)
        else:
            seen = set()
            for i1, t1 in F[u]:
                if i1 in seen:
                    continue
                seen.add(i1)
                Q = set()
                for i2, t2 in F[u]:
                    if t2 < t1:
                        Q.add(i2)
                if skip and not Q:
                    continue
                top = model.recommend(Q, config.k, user=u)
                num += len({i1} & set(top)) * p_pen(i1)
                den += p_pen(i1)
        numerators[u] = num
        denominators[u] = den

    total = sum(denominators.values())
    if total == 0:
        return 0.0
    if pop is None:
        return sum(numerators.values()) / total
    value = 0.0
    for u in sorted(F):
        if denominators[u] == 0:
            continue
        weight = denominators[u] / total
        value += weight * numerators[u] / denominators[u]
    return value
