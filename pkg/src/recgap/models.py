"""Backbone recommenders behind one profile-conditioned Top-K contract.

Every model ranks its catalog by a per-row key matrix (higher is better,
``-inf`` means never recommendable); ties go to the smaller item code, which
is the smaller identifier because catalogs are sorted. ``recommend`` and the
batched ``target_ranks`` share that ordering, so offline metrics computed in
bulk agree exactly with one-at-a-time recommendation calls.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .data import InteractionLog
from .errors import SingularSystem

_log = logging.getLogger(__name__)

FORMAT_NAME = "recgap-model"
FORMAT_VERSION = 1
DEFAULT_NEIGHBORS = 100
_UNSCORED_BASE = -1e9
_CHUNK = 2048


def profile_matrix(profiles: Sequence[np.ndarray], n_items: int) -> sp.csr_matrix:
    """CSR indicator matrix, one row per profile of item codes (sorted, unique)."""
    lens = np.fromiter((len(p) for p in profiles), dtype=np.int64, count=len(profiles))
    indptr = np.zeros(len(profiles) + 1, dtype=np.int64)
    np.cumsum(lens, out=indptr[1:])
    if not len(profiles) or not indptr[-1]:
        indices = np.zeros(0, dtype=np.int64)
    else:
        indices = np.concatenate(profiles).astype(np.int64)
        step = np.diff(indices)
        cuts = indptr[1:-1]
        step[cuts[(cuts > 0) & (cuts < len(indices))] - 1] = 1  # row boundaries
        if np.any(step <= 0):
            indices = np.concatenate([np.unique(p) for p in profiles]).astype(np.int64)
            if len(indices) != indptr[-1]:
                raise ValueError("profiles must not contain duplicates")
    data = np.ones(len(indices), dtype=np.float64)
    return sp.csr_matrix((data, indices, indptr), shape=(len(profiles), n_items))


class RecModel:
    """Base class: subclasses implement ``_keys``."""

    kind = "abstract"

    def __init__(self, items, params: dict | None = None, trained_at: int | None = None,
                 filter_seen: bool = True):
        self.items = np.asarray(items, dtype=object).astype(str)
        if len(self.items) > 1 and not np.all(self.items[:-1] < self.items[1:]):
            raise ValueError("catalog must be sorted and unique")
        self.params = dict(params or {})
        self.trained_at = trained_at
        self.filter_seen = filter_seen

    @property
    def n_items(self) -> int:
        return len(self.items)

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {it: i for i, it in enumerate(self.items)}

    @property
    def metadata(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": dict(self.params), "trained_at": self.trained_at,
                "filter_seen": self.filter_seen, "n_items": self.n_items}

    def _keys(self, P: sp.csr_matrix, users: Sequence[str] | None) -> np.ndarray:
        raise NotImplementedError

    def keys(self, P: sp.csr_matrix, users: Sequence[str] | None = None) -> np.ndarray:
        """Ranking keys for each profile row, with seen items masked out."""
        K = np.array(self._keys(P, users), dtype=np.float64)
        if self.filter_seen and P.nnz:
            rows = np.repeat(np.arange(P.shape[0]), np.diff(P.indptr))
            K[rows, P.indices] = -np.inf
        return K

    def codes(self, profile: Iterable[str]) -> np.ndarray:
        idx = self.item_index
        return np.array(sorted({idx[i] for i in profile if i in idx}), dtype=np.int64)

    def recommend_codes(self, profiles: Sequence[np.ndarray], k: int,
                        users: Sequence[str] | None = None) -> list[np.ndarray]:
        if k < 1:
            raise ValueError("k must be >= 1")
        out = []
        for lo in range(0, len(profiles), _CHUNK):
            P = profile_matrix(profiles[lo:lo + _CHUNK], self.n_items)
            K = self.keys(P, None if users is None else users[lo:lo + _CHUNK])
            out.extend(top_k_rows(K, k))
        return out

    def recommend(self, profile: Iterable[str], k: int, user: str | None = None) -> list[str]:
        """Top-k identifiers for a profile item set (``Top_K(M)``)."""
        codes = self.codes(profile)
        top = self.recommend_codes([codes], k, None if user is None else [user])[0]
        return [str(s) for s in self.items[top]]


def top_k_rows(K: np.ndarray, k: int) -> list[np.ndarray]:
    out = []
    kk = min(k, K.shape[1])
    for row in K:
        order = np.argsort(-row, kind="stable")[:kk]
        out.append(order[np.isfinite(row[order])])
    return out


def target_ranks(model: RecModel, profiles: Sequence[np.ndarray], targets: np.ndarray,
                 users: Sequence[str] | None = None) -> np.ndarray:
    """0-based position of each target in its profile's full ranking.

    ``-1`` marks a target the model can never return (masked or outside the
    catalog), so ``0 <= rank < k`` is exactly "target in Top_K".
    """
    targets = np.asarray(targets, dtype=np.int64)
    ranks = np.full(len(targets), -1, dtype=np.int64)
    cols = np.arange(model.n_items)
    for lo in range(0, len(profiles), _CHUNK):
        hi = min(lo + _CHUNK, len(profiles))
        t = targets[lo:hi]
        valid = t >= 0
        P = profile_matrix(profiles[lo:hi], model.n_items)
        K = model.keys(P, None if users is None else users[lo:hi])
        kt = np.full(hi - lo, -np.inf)
        kt[valid] = K[np.flatnonzero(valid), t[valid]]
        ahead = (K > kt[:, None]) | ((K == kt[:, None]) & (cols[None, :] < t[:, None]))
        r = ahead.sum(axis=1)
        ok = valid & np.isfinite(kt)
        ranks[lo:hi][ok] = r[ok]
    return ranks


def _fallback_order(counts: np.ndarray) -> np.ndarray:
    """Position of every item in the popularity ranking (ties: smaller code first)."""
    order = np.argsort(-np.asarray(counts, dtype=np.float64), kind="stable")
    pos = np.empty(len(order), dtype=np.int64)
    pos[order] = np.arange(len(order))
    return pos


class PopularityModel(RecModel):
    kind = "popularity"

    def __init__(self, items, counts, **kw):
        super().__init__(items, **kw)
        self.counts = np.asarray(counts, dtype=np.float64)

    def _keys(self, P, users):
        return np.broadcast_to(self.counts, (P.shape[0], self.n_items))


def popularity_recommend(pop, profile: Iterable[str], k: int) -> list[str]:
    """Top-k by descending p(i) from a PopularityTable, profile filtered."""
    order = np.argsort(pop.item_ids)
    model = PopularityModel(pop.item_ids[order], pop.values[order])
    return model.recommend(profile, k)


def _profile_seed(seed: int, codes: np.ndarray) -> int:
    h = hashlib.blake2b(np.ascontiguousarray(codes, dtype=np.int64).tobytes(), digest_size=8,
                        key=str(seed).encode())
    return int.from_bytes(h.digest(), "little")


class RandomModel(RecModel):
    """Uniform random ranking, a deterministic function of (seed, profile)."""

    kind = "random"

    def __init__(self, items, seed: int = 0, **kw):
        super().__init__(items, **kw)
        self.seed = int(seed)
        self.params.setdefault("seed", self.seed)

    def _keys(self, P, users):
        K = np.empty(P.shape, dtype=np.float64)
        for r in range(P.shape[0]):
            codes = P.indices[P.indptr[r]:P.indptr[r + 1]]
            K[r] = np.random.default_rng(_profile_seed(self.seed, codes)).random(self.n_items)
        return K


def random_recommend(catalog: Iterable[str], seed: int, profile: Iterable[str], k: int) -> list[str]:
    return RandomModel(sorted(set(catalog)), seed=seed).recommend(profile, k)


# ---------------------------------------------------------------------------
# implicit-feedback matrix factorization


@dataclass
class ItemEmbeddings:
    item_ids: np.ndarray
    vectors: np.ndarray
    params: dict = field(default_factory=dict)
    loss_history: list[float] = field(default_factory=list)
    user_ids: np.ndarray | None = None
    user_vectors: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _count_matrix(log: InteractionLog, catalog: np.ndarray) -> sp.csr_matrix:
    pos = np.searchsorted(catalog, log.item_ids)
    if np.any(pos >= len(catalog)) or np.any(catalog[np.minimum(pos, len(catalog) - 1)] != log.item_ids):
        raise ValueError("catalog does not cover the log's items")
    R = sp.coo_matrix((np.ones(len(log)), (log.user_codes, pos[log.item_codes])),
                      shape=(log.n_users, len(catalog))).tocsr()
    R.sum_duplicates()
    R.sort_indices()
    return R


def _outer_rows(M: np.ndarray) -> np.ndarray:
    f = M.shape[1]
    return (M[:, :, None] * M[:, None, :]).reshape(len(M), f * f)


def _als_half(R: sp.csr_matrix, other: np.ndarray, lam: float, alpha: float) -> np.ndarray:
    """Exact least-squares update of the factors indexed by R's rows."""
    n, f = R.shape[0], other.shape[1]
    G = other.T @ other + lam * np.eye(f)
    Cm1 = R.copy()
    Cm1.data = alpha * R.data
    A = np.zeros((n, f * f))
    step = max(1, 4_000_000 // (f * f))
    for lo in range(0, other.shape[0], step):
        block = Cm1[:, lo:lo + step]
        if block.nnz:
            A += block @ _outer_rows(other[lo:lo + step])
    A = A.reshape(n, f, f) + G[None]
    Cp = R.copy()
    Cp.data = 1.0 + alpha * R.data
    b = Cp @ other
    try:
        return np.linalg.solve(A, b[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc


def implicit_loss(R: sp.csr_matrix, X: np.ndarray, Y: np.ndarray, lam: float, alpha: float) -> float:
    """Confidence-weighted squared loss plus L2 penalty, without densifying R."""
    full = float(np.sum((X.T @ X) * (Y.T @ Y)))
    rows = np.repeat(np.arange(R.shape[0]), np.diff(R.indptr))
    s = np.einsum("ij,ij->i", X[rows], Y[R.indices])
    c = 1.0 + alpha * R.data
    nnz = float(np.sum(c * (1.0 - s) ** 2 - s ** 2))
    return full + nnz + lam * float(np.sum(X * X) + np.sum(Y * Y))


def train_implicit_mf(log: InteractionLog, f: int, lam: float, alpha: float, iters: int,
                      seed: int = 0, catalog: Sequence[str] | None = None,
                      track_loss: bool = False) -> ItemEmbeddings:
    """ALS on binarized feedback with confidence ``1 + alpha * count(u, i)``."""
    if f < 1 or iters < 1:
        raise ValueError("f and iters must be >= 1")
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    items = log.item_ids if catalog is None else np.array(sorted(set(catalog) | set(log.item_ids)))
    R = _count_matrix(log, items)
    RT = R.T.tocsr()
    RT.sort_indices()
    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 0.1, size=(len(items), f))
    X = np.zeros((R.shape[0], f))
    losses = []
    for _ in range(iters):
        X = _als_half(R, Y, lam, alpha)
        Y = _als_half(RT, X, lam, alpha)
        if track_loss:
            losses.append(implicit_loss(R, X, Y, lam, alpha))
    if not np.all(np.isfinite(Y)):
        raise SingularSystem("non-finite item factors")
    params = {"f": f, "lambda": lam, "alpha": alpha, "iters": iters, "seed": seed}
    return ItemEmbeddings(items, Y, params, losses, log.user_ids, X)


# ---------------------------------------------------------------------------
# item-kNN over embedding cosine similarity


@dataclass
class SimilarityIndex:
    item_ids: np.ndarray
    neighbors: list[np.ndarray]
    similarities: list[np.ndarray]
    m: int
    zero_norm: np.ndarray

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        n = len(self.item_ids)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum([len(x) for x in self.neighbors], out=indptr[1:])
        idx = np.concatenate(self.neighbors) if n else np.zeros(0, dtype=np.int64)
        sims = np.concatenate(self.similarities) if n else np.zeros(0)
        rows = np.repeat(np.arange(n), np.diff(indptr))
        # column-sorted rows keep the profile-sum accumulation order canonical
        perm = np.lexsort((idx, rows))
        return sp.csr_matrix((sims[perm], idx[perm], indptr), shape=(n, n))

    @cached_property
    def presence(self) -> sp.csr_matrix:
        M = self.matrix.copy()
        M.data = np.ones_like(M.data)
        return M


def build_similarity_index(emb: ItemEmbeddings, m: int = DEFAULT_NEIGHBORS) -> SimilarityIndex:
    """Exact top-m cosine neighbours per item; zero-norm items are flagged and isolated."""
    if m < 1:
        raise ValueError("m must be >= 1")
    V = np.asarray(emb.vectors, dtype=np.float64)
    n = len(V)
    norms = np.sqrt(np.einsum("ij,ij->i", V, V))
    zero = norms == 0
    if zero.any():
        _log.info("%d items have zero-norm embeddings; they get no neighbours", int(zero.sum()))
    U = np.zeros_like(V)
    U[~zero] = V[~zero] / norms[~zero, None]
    neighbors, sims = [], []
    mm = min(m, max(n - 1, 0))
    for lo in range(0, n, 512):
        S = np.clip(U[lo:lo + 512] @ U.T, -1.0, 1.0)
        S[:, zero] = -np.inf
        r = np.arange(lo, min(lo + 512, n))
        S[r - lo, r] = -np.inf
        order = np.argsort(-S, axis=1, kind="stable")[:, :mm]
        for j, row in enumerate(order):
            if zero[lo + j]:
                neighbors.append(np.zeros(0, dtype=np.int64))
                sims.append(np.zeros(0))
                continue
            vals = S[j, row]
            keep = np.isfinite(vals)
            neighbors.append(row[keep].astype(np.int64))
            sims.append(vals[keep])
    return SimilarityIndex(np.asarray(emb.item_ids).astype(str), neighbors, sims, m, np.flatnonzero(zero))


class ItemKNNModel(RecModel):
    """Sum of neighbour cosines over the profile; unscored items follow by popularity."""

    kind = "mf-knn"

    def __init__(self, index: SimilarityIndex, counts, **kw):
        super().__init__(index.item_ids, **kw)
        self.index = index
        self.counts = np.asarray(counts, dtype=np.float64)
        self._fallback = _UNSCORED_BASE - _fallback_order(self.counts).astype(np.float64)
        self.params.setdefault("m", index.m)
        self.params.setdefault("truncated_neighbors", True)

    def _keys(self, P, users):
        if P.nnz == 0:
            return np.broadcast_to(self._fallback, P.shape)
        scores = (P @ self.index.matrix).toarray()
        scored = (P @ self.index.presence).toarray() > 0
        return np.where(scored, scores, self._fallback[None, :])


def knn_recommend(index: SimilarityIndex, pop, profile: Iterable[str], k: int) -> list[str]:
    counts = np.array([pop[i] if i in pop else 0.0 for i in index.item_ids])
    return ItemKNNModel(index, counts).recommend(profile, k)


class MFModel(RecModel):
    """Ranks by dot product with a user vector folded in from the profile."""

    kind = "mf"

    def __init__(self, emb: ItemEmbeddings, counts, **kw):
        super().__init__(emb.item_ids, **kw)
        self.emb = emb
        self.counts = np.asarray(counts, dtype=np.float64)
        self._fallback = _UNSCORED_BASE - _fallback_order(self.counts).astype(np.float64)
        Y = emb.vectors
        f = Y.shape[1]
        self._G = Y.T @ Y + emb.params["lambda"] * np.eye(f)
        self._outer = _outer_rows(Y)

    def _keys(self, P, users):
        Y, f = self.emb.vectors, self.emb.dim
        alpha = self.emb.params["alpha"]
        A = (alpha * (P @ self._outer)).reshape(-1, f, f) + self._G[None]
        b = (1.0 + alpha) * (P @ Y)
        X = np.linalg.solve(A, b[..., None])[..., 0]
        K = X @ Y.T
        empty = np.diff(P.indptr) == 0
        K[empty] = self._fallback
        return K


# ---------------------------------------------------------------------------
# specs and persistence


@dataclass(frozen=True)
class ModelSpec:
    """Recipe for (re)training one model kind on a log."""

    kind: str
    params: dict = field(default_factory=dict)
    name: str | None = None

    @property
    def tag(self) -> str:
        return self.name or self.kind

    def fit(self, log: InteractionLog, catalog: Sequence[str] | None = None) -> RecModel:
        items = log.item_ids if catalog is None else np.array(sorted(set(catalog) | set(log.item_ids)))
        counts = np.zeros(len(items))
        counts[np.searchsorted(items, log.item_ids)] = log.counts
        trained_at = int(log.timestamps.max())
        p = self.params
        if self.kind == "popularity":
            return PopularityModel(items, counts, trained_at=trained_at)
        if self.kind == "random":
            return RandomModel(items, seed=p.get("seed", 0), trained_at=trained_at)
        if self.kind in ("mf-knn", "mf"):
            emb = train_implicit_mf(log, int(p.get("f", 16)), float(p.get("lambda", 0.1)),
                                    float(p.get("alpha", 10.0)), int(p.get("iters", 10)),
                                    int(p.get("seed", 0)), catalog=items)
            meta = {k: v for k, v in p.items()}
            if self.kind == "mf":
                return MFModel(emb, counts, params=meta, trained_at=trained_at)
            index = build_similarity_index(emb, int(p.get("m", DEFAULT_NEIGHBORS)))
            return ItemKNNModel(index, counts, params=meta, trained_at=trained_at)
        raise ValueError(f"unknown model kind {self.kind!r}")


def model_to_dict(model: RecModel) -> dict:
    d = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "kind": model.kind,
         "params": model.params, "trained_at": model.trained_at,
         "filter_seen": model.filter_seen, "items": model.items.tolist()}
    if isinstance(model, (PopularityModel, ItemKNNModel, MFModel)):
        d["counts"] = model.counts.tolist()
    if isinstance(model, RandomModel):
        d["seed"] = model.seed
    elif isinstance(model, ItemKNNModel):
        ix = model.index
        d["m"] = ix.m
        d["zero_norm"] = ix.zero_norm.tolist()
        d["neighbors"] = [nb.tolist() for nb in ix.neighbors]
        d["similarities"] = [s.tolist() for s in ix.similarities]
    elif isinstance(model, MFModel):
        d["embedding_params"] = model.emb.params
        d["vectors"] = model.emb.vectors.tolist()
    elif not isinstance(model, PopularityModel):
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return d


def model_from_dict(d: dict) -> RecModel:
    if d.get("format") != FORMAT_NAME or d.get("version") != FORMAT_VERSION:
        raise ValueError("not a recgap model container (or unsupported version)")
    kw = {"params": d["params"], "trained_at": d["trained_at"], "filter_seen": d["filter_seen"]}
    items = np.array(d["items"], dtype=object)
    kind = d["kind"]
    if kind == "popularity":
        return PopularityModel(items, d["counts"], **kw)
    if kind == "random":
        return RandomModel(items, seed=d["seed"], **kw)
    if kind == "mf-knn":
        ix = SimilarityIndex(items.astype(str),
                             [np.array(nb, dtype=np.int64) for nb in d["neighbors"]],
                             [np.array(s, dtype=np.float64) for s in d["similarities"]],
                             d["m"], np.array(d["zero_norm"], dtype=np.int64))
        return ItemKNNModel(ix, d["counts"], **kw)
    if kind == "mf":
        emb = ItemEmbeddings(items.astype(str), np.array(d["vectors"], dtype=np.float64),
                             d["embedding_params"])
        return MFModel(emb, d["counts"], **kw)
    raise ValueError(f"unknown model kind {kind!r}")


def save_model(model: RecModel, path: str | os.PathLike) -> None:
    from .config import atomic_write_text
    atomic_write_text(path, json.dumps(model_to_dict(model)))


def load_model(path: str | os.PathLike) -> RecModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
