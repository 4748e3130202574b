from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
import scipy.sparse as sp
from scipy.sparse.csgraph import shortest_path

from kgquant.quantize import (
    VARIANTS,
    Codebook,
    EntityCode,
    QuantConfig,
    assign_weights,
    match_anchors_nearest,
    match_anchors_relation_similarity,
    match_random,
    match_relations_connected,
    pagerank,
    quantize_all,
    read_codes,
    select_anchors_degree,
    select_anchors_ppr,
    select_anchors_sample,
    variant_config,
    write_codes,
)

from conftest import make_kg


def anchors_of(*ids):
    return Codebook("anchor", len(ids), np.array(ids))


class TestEntityCode:
    def test_rejects_duplicates_and_range(self):
        with pytest.raises(ValueError):
            EntityCode(np.array([1, 1]), np.ones(2), 4)
        with pytest.raises(ValueError):
            EntityCode(np.array([4]), np.ones(1), 4)
        with pytest.raises(ValueError):
            EntityCode(np.array([0]), np.zeros(1), 4)

    def test_dense_view(self):
        c = EntityCode.from_pairs([3, 0], [2.0, 1.0], 5)
        np.testing.assert_array_equal(c.dense(), [1, 0, 0, 2, 0])

    def test_config_needs_a_source(self):
        with pytest.raises(ValueError):
            QuantConfig(relation_strategy="none", anchor_strategy="none")


class TestDegreeAnchors:
    def test_star_hub(self, star_kg):
        assert select_anchors_degree(star_kg, 1).anchor_ids.tolist() == [0]

    def test_tie_break(self):
        kg = make_kg([(0, 0, 1), (2, 0, 3)])
        assert select_anchors_degree(kg, 2).anchor_ids.tolist() == [0, 1]

    def test_matches_full_sort(self, skewed_kg):
        deg = skewed_kg.degrees
        oracle = sorted(range(len(deg)), key=lambda i: (-deg[i], i))[:5]
        assert select_anchors_degree(skewed_kg, 5).anchor_ids.tolist() == oracle

    def test_too_many(self, star_kg):
        with pytest.raises(ValueError):
            select_anchors_degree(star_kg, 7)


def dense_pagerank(kg, damping, iterations):
    n = kg.entity_count
    a = np.zeros((n, n))
    for h, _, t in kg.train.tolist():
        a[t, h] += 1
        a[h, t] += 1
    out = a.sum(axis=0)
    m = np.zeros((n, n))
    for j in range(n):
        m[:, j] = a[:, j] / out[j] if out[j] else 1.0 / n
    x = np.full(n, 1.0 / n)
    for _ in range(iterations):
        x = damping * m @ x + (1 - damping) / n
    return x


class TestPageRank:
    def test_two_cycle(self):
        kg = make_kg([(0, 0, 1), (1, 0, 0)])
        np.testing.assert_allclose(pagerank(kg), [0.5, 0.5], atol=1e-12)
        assert select_anchors_ppr(kg, 1).anchor_ids.tolist() == [0]

    def test_chain_matches_dense(self):
        kg = make_kg([(0, 0, 1), (1, 0, 2)])
        np.testing.assert_allclose(pagerank(kg, 0.85, 50), dense_pagerank(kg, 0.85, 50), rtol=0, atol=1e-8)

    def test_dangling_matches_dense(self):
        kg = make_kg([(0, 0, 1), (1, 1, 2), (0, 1, 2)], entity_count=5)
        got = pagerank(kg, 0.85, 50)
        np.testing.assert_allclose(got, dense_pagerank(kg, 0.85, 50), atol=1e-8)
        assert abs(got.sum() - 1) < 1e-12

    def test_small_damping_uniform(self, skewed_kg):
        x = pagerank(skewed_kg, 1e-12, 5)
        np.testing.assert_allclose(x, 1.0 / skewed_kg.entity_count, atol=1e-12)

    def test_bad_damping(self, star_kg):
        with pytest.raises(ValueError):
            pagerank(star_kg, 1.0)


class TestSampleAnchors:
    def test_fraction_one(self, skewed_kg):
        assert select_anchors_sample(skewed_kg, 1.0, 3).anchor_ids.tolist() == list(range(skewed_kg.entity_count))

    def test_ceiling(self):
        kg = make_kg([(i, 0, (i + 1) % 50) for i in range(50)])
        assert select_anchors_sample(kg, 0.1, 0).size == 5
        assert select_anchors_sample(kg, 0.11, 0).size == 6

    def test_deterministic(self, skewed_kg):
        a = select_anchors_sample(skewed_kg, 0.2, 9).anchor_ids
        np.testing.assert_array_equal(a, select_anchors_sample(skewed_kg, 0.2, 9).anchor_ids)


class TestRelationMatching:
    def test_two_relations(self):
        kg = make_kg([(0, 2, 1), (2, 5, 0)])
        assert match_relations_connected(kg, 0, None).tolist() == [2, 5]

    def test_truncation_by_count(self):
        counts = [1, 3, 2, 3, 1]
        triples, leaf = [], 1
        for r, c in enumerate(counts):
            for _ in range(c):
                triples.append((0, r, leaf))
                leaf += 1
        kg = make_kg(triples)
        tally = Counter(r for h, r, t in triples if 0 in (h, t))
        oracle = sorted(sorted(tally, key=lambda r: (-tally[r], r))[:3])
        assert match_relations_connected(kg, 0, 3).tolist() == oracle == [1, 2, 3]

    def test_isolated(self):
        kg = make_kg([(0, 0, 1)], entity_count=3)
        assert match_relations_connected(kg, 2, None).tolist() == []


class TestNearestAnchors:
    def test_self_first(self, star_kg):
        book = anchors_of(3, 0)
        assert match_anchors_nearest(star_kg, book, 3, 1).tolist() == [0]

    def test_chain_tie(self):
        kg = make_kg([(0, 0, 1), (1, 0, 2)])
        book = anchors_of(0, 2)
        assert book.anchor_ids[match_anchors_nearest(kg, book, 1, 2)].tolist() == [0, 2]

    def test_disconnected_padding(self):
        kg = make_kg([(0, 0, 1), (1, 0, 2), (3, 0, 4)], entity_count=6)
        book = anchors_of(0, 1, 2)
        a = match_anchors_nearest(kg, book, 5, 2, seed=4)
        assert len(set(a.tolist())) == 2
        np.testing.assert_array_equal(a, match_anchors_nearest(kg, book, 5, 2, seed=4))

    def test_partial_reach_pads_with_unreached(self):
        kg = make_kg([(0, 0, 1), (2, 0, 3)])
        book = anchors_of(1, 2, 3)
        a = match_anchors_nearest(kg, book, 0, 3, seed=1)
        assert a[0] == 0 and sorted(a[1:].tolist()) == [1, 2]

    def test_distances_non_decreasing(self, skewed_kg):
        kg = skewed_kg
        book = select_anchors_degree(kg, 8)
        n = kg.entity_count
        src = np.repeat(np.arange(n), np.diff(kg.adj_ptr))
        graph = sp.csr_matrix((np.ones(len(src)), (src, kg.adj_nbr)), shape=(n, n))
        dist = shortest_path(graph, unweighted=True, directed=False)
        for e in range(n):
            got = book.anchor_ids[match_anchors_nearest(kg, book, e, 4)]
            d = dist[e, got]
            finite = d[np.isfinite(d)]
            assert np.all(np.diff(finite) >= 0)
            oracle = sorted((dist[e, a], a) for a in book.anchor_ids.tolist() if np.isfinite(dist[e, a]))
            assert got[:len(finite)].tolist() == [a for _, a in oracle[:len(finite)]]


class TestSimilarityAnchors:
    def fixture(self):
        # relation sets: e0 {0,1}, e1 {0,1}, e2 {2}, e3 {0,2}, e4 {1}, e5 {0}
        return make_kg([(0, 0, 5), (0, 1, 1), (1, 0, 6), (2, 2, 7), (3, 0, 6), (3, 2, 7), (4, 1, 8)],
                       entity_count=9, relation_count=3)

    def test_identical_first_and_disjoint_zero(self):
        kg = self.fixture()
        book = anchors_of(2, 1)
        order = match_anchors_relation_similarity(kg, book, 0, 2)
        assert book.anchor_ids[order].tolist() == [1, 2]
        from kgquant.quantize import relation_similarity
        np.testing.assert_array_equal(relation_similarity(kg, 0, np.array([1, 2])), [1.0, 0.0])

    def test_brute_force_order(self):
        kg = self.fixture()
        sets = {e: set() for e in range(kg.entity_count)}
        for h, r, t in kg.train.tolist():
            sets[h].add(r)
            sets[t].add(r)

        def jac(a, b):
            u = sets[a] | sets[b]
            return len(sets[a] & sets[b]) / len(u) if u else 0.0

        anchors = [4, 3, 2, 1]
        book = anchors_of(*anchors)
        for e in range(kg.entity_count):
            oracle = sorted(anchors, key=lambda a: (-jac(e, a), a))
            assert book.anchor_ids[match_anchors_relation_similarity(kg, book, e, 4)].tolist() == oracle


class TestRandomMatching:
    def test_full_set(self):
        assert match_random(7, 7, 1, 3).tolist() == list(range(7))

    def test_deterministic(self):
        np.testing.assert_array_equal(match_random(30, 5, 2, 9), match_random(30, 5, 2, 9))
        assert not np.array_equal(match_random(30, 5, 2, 9), match_random(30, 5, 3, 9))

    def test_too_many(self):
        with pytest.raises(ValueError):
            match_random(3, 4, 0, 0)

    def test_marginals(self):
        universe, count, trials = 20, 5, 10_000
        freq = np.zeros(universe)
        for e in range(trials):
            freq[match_random(universe, count, 0, e)] += 1
        p = count / universe
        sigma = np.sqrt(trials * p * (1 - p))
        assert np.all(np.abs(freq - trials * p) <= 3 * sigma)


class TestWeights:
    def test_equal(self, star_kg):
        rw, aw = assign_weights(star_kg, 0, [0, 1], [1, 2], "equal")
        assert rw.tolist() + aw.tolist() == [1, 1, 1, 1]

    def test_connectivity(self):
        kg = make_kg([(0, 1, 1), (0, 1, 2), (0, 2, 3)])
        rw, _ = assign_weights(kg, 0, [1, 2], [], "earl_connectivity")
        np.testing.assert_allclose(rw, [2 / 3, 1 / 3], rtol=1e-15)

    def test_anchor_similarity_sums_to_one(self, skewed_kg):
        anchors = select_anchors_degree(skewed_kg, 6).anchor_ids
        for e in range(skewed_kg.entity_count):
            rels = match_relations_connected(skewed_kg, e)
            rw, aw = assign_weights(skewed_kg, e, rels, anchors, "earl_connectivity")
            if len(rels):
                assert abs(rw.sum() - 1) < 1e-12
            assert abs(aw.sum() - 1) < 1e-12 and np.all(aw > 0)

    def test_random_range(self, star_kg):
        rw, aw = assign_weights(star_kg, 0, [0, 1, 2], [1, 2, 3], "random", seed=5)
        w = np.concatenate([rw, aw])
        assert np.all((w > 0) & (w <= 1))
        rw2, aw2 = assign_weights(star_kg, 0, [0, 1, 2], [1, 2, 3], "random", seed=5)
        np.testing.assert_array_equal(np.concatenate([rw2, aw2]), w)


class TestQuantizeAll:
    def test_hand_fixture(self):
        kg = make_kg([(0, 0, 1), (1, 1, 2)])
        q = quantize_all(kg, QuantConfig(k=1, anchor_count_or_fraction=1))
        assert (q.m, q.n) == (2, 1)
        assert [c.key() for c in q.codes] == [(0, 2), (0, 1, 2), (1, 2)]
        assert all(np.all(c.weights == 1) for c in q.codes)

    def test_abstract_size(self):
        kg = make_kg([(0, 0, 1), (1, 1, 2), (2, 2, 3), (2, 0, 3)])
        assert kg.degrees.tolist() == [1, 2, 3, 2]
        q = quantize_all(kg, QuantConfig(abstract_mode=True, k=2, anchor_count_or_fraction=2))
        assert q.l == 5
        assert {len(c) for c in q.codes} == {4}

    def test_abstract_round_half_even(self):
        # degrees [1, 2, 2, 1] give mean 1.5, which rounds to 2
        kg = make_kg([(0, 0, 1), (1, 1, 2), (2, 0, 3)])
        assert kg.degrees.mean() == 1.5
        q = quantize_all(kg, QuantConfig(abstract_mode=True, k=1, anchor_count_or_fraction=2))
        assert {len(c) for c in q.codes} == {3}

    def test_without_anchors(self, skewed_kg):
        q = quantize_all(skewed_kg, QuantConfig(anchor_strategy="none"))
        assert q.l == skewed_kg.relation_count

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_variants_valid_and_deterministic(self, skewed_kg, variant):
        cfg = variant_config(QuantConfig(k=3, seed=2), variant)
        a, b = quantize_all(skewed_kg, cfg), quantize_all(skewed_kg, cfg)
        assert len(a.codes) == skewed_kg.entity_count
        assert all(x == y for x, y in zip(a.codes, b.codes))
        for c in a.codes:
            assert len(c) == 0 or c.indices[-1] < a.l
        if cfg.abstract_mode:
            assert len({len(c) for c in a.codes}) == 1

    @pytest.mark.parametrize("variant", ["+RSR", "+RSA", "+RW", "+RQ"])
    def test_random_variants_vary_with_seed(self, skewed_kg, variant):
        a = quantize_all(skewed_kg, variant_config(QuantConfig(k=3, seed=1), variant))
        b = quantize_all(skewed_kg, variant_config(QuantConfig(k=3, seed=2), variant))
        assert any(x != y for x, y in zip(a.codes, b.codes))

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="unknown variant"):
            variant_config(QuantConfig(), "+XYZ")

    def test_dump_round_trip(self, skewed_kg, tmp_path):
        q = quantize_all(skewed_kg, variant_config(QuantConfig(k=3), "+RW"))
        write_codes(tmp_path / "c.txt", q, "abc")
        codes, meta = read_codes(tmp_path / "c.txt")
        assert (meta["l"], meta["m"], meta["n"], meta["config"]) == (q.l, q.m, q.n, "abc")
        assert all(x == y for x, y in zip(codes, q.codes))
        write_codes(tmp_path / "d.txt", q, "abc")
        assert (tmp_path / "c.txt").read_bytes() == (tmp_path / "d.txt").read_bytes()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(0, 4), rel=st.sampled_from(["connected", "random"]),
       anc=st.sampled_from(["nearest_path", "relation_similarity", "random"]))
def test_code_invariants(skewed_kg, seed, k, rel, anc):
    q = quantize_all(skewed_kg, QuantConfig(relation_strategy=rel, anchor_strategy=anc, k=k, seed=seed,
                                            weight_scheme="earl_connectivity"))
    for c in q.codes:
        assert np.all(np.diff(c.indices) > 0)
        assert np.all(c.weights > 0)
        assert np.sum(c.indices >= q.m) == k
