import logging

import numpy as np
import pytest

from recgap.data import InteractionLog, compute_popularity
from recgap.models import (ItemEmbeddings, ItemKNNModel, ModelSpec, PopularityModel,
                           build_similarity_index, knn_recommend, load_model, popularity_recommend,
                           profile_matrix, random_recommend, save_model, target_ranks,
                           train_implicit_mf)
from recgap.offline import recall_loo

from conftest import random_log


def block_log(n_users=20, seed=0):
    rng = np.random.default_rng(seed)
    users, items, ts = [], [], []
    for u in range(n_users):
        group = "a" if u < n_users // 2 else "b"
        for j in rng.choice(5, size=4, replace=False):
            users.append(f"u{u:02d}")
            items.append(f"{group}{j}")
            ts.append(len(ts))
    return InteractionLog(users, items, ts)


def low_rank_log(seed, n_users=300, n_items=60, per_user=12, clusters=4):
    rng = np.random.default_rng(seed)
    item_cluster = np.arange(n_items) % clusters
    users, items, ts = [], [], []
    for u in range(n_users):
        c = rng.integers(clusters)
        pool = np.flatnonzero(item_cluster == c)
        noise = rng.integers(n_items, size=2)
        for i in np.concatenate([rng.choice(pool, size=per_user - 2, replace=False), noise]):
            users.append(f"u{u:04d}")
            items.append(f"i{i:03d}")
            ts.append(len(ts))
    return InteractionLog(users, items, ts)


def cos(a, b):
    return a @ b / np.linalg.norm(a) / np.linalg.norm(b)


class TestImplicitMF:
    def test_block_structure(self):
        for f, strict in ((2, True), (4, False)):
            emb = train_implicit_mf(block_log(), f=f, lam=0.1, alpha=10, iters=15)
            V = dict(zip(emb.item_ids, emb.vectors))
            within = [cos(V[g + str(i)], V[g + str(j)])
                      for g in "ab" for i in range(5) for j in range(i + 1, 5)]
            across = [cos(V[f"a{i}"], V[f"b{j}"]) for i in range(5) for j in range(5)]
            assert np.mean(within) > np.mean(across) + 0.3
            if strict:
                assert min(within) > max(across)

    @pytest.mark.parametrize("kw", [{"iters": 0}, {"f": 0}, {"lam": 0.0}, {"alpha": -1}])
    def test_invalid(self, kw):
        args = dict(f=2, lam=0.1, alpha=1.0, iters=2) | kw
        with pytest.raises(ValueError):
            train_implicit_mf(block_log(), **args)

    def test_deterministic(self):
        log = random_log(np.random.default_rng(2), n_users=30, n_items=20, n_events=200)
        a = train_implicit_mf(log, 6, 0.1, 5.0, 5, seed=4)
        b = train_implicit_mf(log, 6, 0.1, 5.0, 5, seed=4)
        assert np.array_equal(a.vectors, b.vectors)

    @pytest.mark.parametrize("seed", range(5))
    def test_loss_non_increasing(self, seed):
        log = random_log(np.random.default_rng(seed), n_users=60, n_items=40, n_events=600, zipf=0.7)
        emb = train_implicit_mf(log, 8, 0.05, 10.0, 12, seed=seed, track_loss=True)
        L = np.array(emb.loss_history)
        assert np.all(np.diff(L) <= 1e-9 * L[:-1])

    def test_als_step_is_exact_solution(self):
        # after one sweep, user factors solve the dense normal equations against the initial Y
        log = random_log(np.random.default_rng(8), n_users=5, n_items=7, n_events=25)
        emb = train_implicit_mf(log, 3, 0.2, 4.0, 1, seed=1)
        R = np.zeros((log.n_users, log.n_items))
        np.add.at(R, (log.user_codes, log.item_codes), 1)
        X = emb.user_vectors
        Y0 = np.random.default_rng(1).normal(0.0, 0.1, size=(log.n_items, 3))
        for u in range(log.n_users):
            C = 1 + 4.0 * R[u]
            p = (R[u] > 0).astype(float)
            x = np.linalg.solve(Y0.T @ (C[:, None] * Y0) + 0.2 * np.eye(3), Y0.T @ (C * p))
            np.testing.assert_allclose(X[u], x, rtol=1e-9, atol=1e-12)


class TestSimilarityIndex:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        V = rng.normal(size=(700, 5))
        emb = ItemEmbeddings(np.array([f"i{j:04d}" for j in range(700)]), V)
        ix = build_similarity_index(emb, m=10)
        U = V / np.linalg.norm(V, axis=1, keepdims=True)
        S = U @ U.T
        np.fill_diagonal(S, -np.inf)
        for j in (0, 1, 511, 512, 699):
            expected = np.argsort(-S[j], kind="stable")[:10]
            assert ix.neighbors[j].tolist() == expected.tolist()
            np.testing.assert_allclose(ix.similarities[j], S[j, expected], atol=1e-12)
            assert np.all(np.diff(ix.similarities[j]) <= 0)

    def test_zero_norm_isolated(self, caplog):
        V = np.array([[1.0, 0], [0, 0], [1, 1]])
        with caplog.at_level(logging.INFO):
            ix = build_similarity_index(ItemEmbeddings(np.array(["a", "b", "c"]), V), m=5)
        assert "zero-norm" in caplog.text
        assert ix.zero_norm.tolist() == [1]
        assert len(ix.neighbors[1]) == 0
        assert 1 not in ix.neighbors[0].tolist()

    def test_knn_scores_by_hand(self):
        V = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [-1.0, 0.0]])
        ix = build_similarity_index(ItemEmbeddings(np.array(["a", "b", "c", "d"]), V), m=3)
        pop = {"a": 0.1, "b": 0.2, "c": 0.3, "d": 0.4}
        # profile {a}: b 0.6, c 0.0, d -1.0
        assert knn_recommend(ix, pop, ["a"], 3) == ["b", "c", "d"]
        # profile {a, c}: b 0.6 + 0.8, d -1.0 + 0.0
        model = ItemKNNModel(ix, [1, 2, 3, 4])
        P = profile_matrix([np.array([0, 2])], 4)
        K = model.keys(P)
        assert K[0, 1] == pytest.approx(1.4) and K[0, 3] == pytest.approx(-1.0)

    def test_truncation_falls_back_to_popularity(self):
        V = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
        ix = build_similarity_index(ItemEmbeddings(np.array(["a", "b", "c", "d"]), V), m=1)
        model = ItemKNNModel(ix, counts=[0, 0, 5, 1])
        # only b neighbours a; c and d are unscored and follow by popularity
        assert model.recommend(["a"], 3) == ["b", "c", "d"]


class TestBaselines:
    def test_popularity(self):
        pop = {"a": 0.5, "b": 0.3, "c": 0.2}
        from recgap.data import PopularityTable
        t = PopularityTable(np.array(list(pop)), np.array(list(pop.values())))
        assert popularity_recommend(t, [], 2) == ["a", "b"]
        assert popularity_recommend(t, ["a"], 2) == ["b", "c"]

    def test_popularity_ties_break_on_identifier(self):
        m = PopularityModel(["x", "y", "z"], [1, 3, 1])
        assert m.recommend([], 3) == ["y", "x", "z"]

    def test_random_deterministic(self):
        cat = [f"i{j}" for j in range(50)]
        a = random_recommend(cat, 7, ["i1"], 10)
        assert a == random_recommend(cat, 7, ["i1"], 10)
        assert a != random_recommend(cat, 8, ["i1"], 10)
        assert "i1" not in a


class TestRankingContract:
    @pytest.mark.parametrize("kind", ["popularity", "random", "mf-knn", "mf"])
    def test_invariants(self, kind):
        log = random_log(np.random.default_rng(5), n_users=30, n_items=25, n_events=300)
        model = ModelSpec(kind, {"f": 4, "iters": 3, "m": 8}).fit(log)
        rng = np.random.default_rng(0)
        for _ in range(20):
            prof = set(rng.choice(model.items, size=rng.integers(0, 10), replace=False))
            k = int(rng.integers(1, 30))
            top = model.recommend(prof, k)
            assert len(top) == min(k, model.n_items - len(prof))
            assert len(set(top)) == len(top)
            assert not prof & set(top)

    @pytest.mark.parametrize("kind", ["popularity", "random", "mf-knn"])
    def test_target_ranks_agree_with_top_k(self, kind):
        log = random_log(np.random.default_rng(6), n_users=20, n_items=15, n_events=150)
        model = ModelSpec(kind, {"f": 3, "iters": 2, "m": 5}).fit(log)
        rng = np.random.default_rng(1)
        profiles = [np.sort(rng.choice(15, size=rng.integers(0, 5), replace=False)) for _ in range(40)]
        targets = rng.integers(0, 15, size=40)
        ranks = target_ranks(model, profiles, targets)
        full = model.recommend_codes(profiles, 15)
        for p, t, r, order in zip(profiles, targets, ranks, full):
            if t in p:
                assert r == -1
            else:
                assert order.tolist().index(t) == r

    def test_save_load_bit_exact(self, tmp_path):
        log = random_log(np.random.default_rng(3), n_users=25, n_items=20, n_events=200)
        P = profile_matrix([np.array([0, 3]), np.array([], dtype=np.int64), np.array([5])], 20)
        for kind in ("popularity", "random", "mf-knn", "mf"):
            m = ModelSpec(kind, {"f": 4, "iters": 3, "m": 6}).fit(log)
            save_model(m, tmp_path / f"{kind}.json")
            back = load_model(tmp_path / f"{kind}.json")
            assert type(back) is type(m)
            assert back.metadata == m.metadata
            assert np.array_equal(back.keys(P), m.keys(P))

    def test_unsorted_catalog_rejected(self):
        with pytest.raises(ValueError):
            PopularityModel(["b", "a"], [1, 1])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ModelSpec("svd").fit(random_log(np.random.default_rng(0)))


@pytest.mark.parametrize("seed", range(3))
def test_knn_beats_random_on_low_rank_data(seed):
    log = low_rank_log(seed)
    knn = ModelSpec("mf-knn", {"f": 8, "lambda": 0.1, "alpha": 10, "iters": 8, "m": 30}).fit(log)
    rnd = ModelSpec("random", {"seed": seed}).fit(log)
    assert recall_loo(log, knn, 10).value > recall_loo(log, rnd, 10).value


def test_popularity_table_matches_model_order():
    log = random_log(np.random.default_rng(12), n_users=20, n_items=10, n_events=100, zipf=1.0)
    pop = compute_popularity(log)
    model = ModelSpec("popularity").fit(log)
    assert model.recommend([], 10) == popularity_recommend(pop, [], 10)
