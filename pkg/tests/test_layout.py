"""Layout construction and attention-mask compilation tests.

build_mask is checked against check_mask_oracle (an independent per-pair
rule interpreter) across randomized layouts, then each documented rule is
probed directly.
"""

import numpy as np
import pytest

from streamnav import layout as L


def random_layout(rng, with_queries=None):
    turns = int(rng.integers(1, 9))
    if with_queries is None:
        with_queries = bool(rng.integers(0, 2))
    q = int(rng.integers(1, 4)) if with_queries else 0
    return L.build_layout(
        num_turns=turns,
        len_instruction=int(rng.integers(1, 4)),
        len_memory=int(rng.integers(0, 4)),
        len_ctxt=int(rng.integers(1, 4)),
        len_act=int(rng.integers(1, 4)),
        queries_per_modality=q,
        with_queries=with_queries,
    )


class TestBuildLayout:
    def test_direct_construction(self):
        lay = L.build_layout(1, 4, 1, 3, 2)
        want = [(L.INSTRUCTION, None, 4), (L.MEMORY, None, 1),
                (L.CTXT, 0, 3), (L.ACT, 0, 2)]
        got = [(r.kind, r.turn, n) for r, n in lay.segments]
        assert got == want
        assert lay.total_tokens == 10

    def test_zero_memory_omits_segment(self):
        lay = L.build_layout(1, 2, 0, 2, 1)
        assert all(r.kind != L.MEMORY for r, _ in lay.segments)

    def test_query_segment_order(self):
        lay = L.build_layout(2, 1, 1, 1, 1, queries_per_modality=1, with_queries=True)
        kinds = [r.kind for r, _ in lay.segments]
        assert kinds == [L.INSTRUCTION, L.MEMORY,
                         L.CTXT, L.ACT, L.QUERY2D, L.QUERY3D,
                         L.CTXT, L.ACT, L.QUERY2D, L.QUERY3D]

    def test_nine_queries_per_modality(self):
        lay = L.build_layout(8, 2, 1, 2, 4, queries_per_modality=9, with_queries=True)
        qsegs = [(r, n) for r, n in lay.segments if r.is_query]
        assert len(qsegs) == 16
        assert all(n == 9 for _, n in qsegs)

    def test_zero_lengths_rejected(self):
        with pytest.raises(ValueError):
            L.build_layout(1, 0, 1, 1, 1)
        with pytest.raises(ValueError):
            L.build_layout(1, 1, 1, 0, 1)
        with pytest.raises(ValueError):
            L.build_layout(1, 1, 1, 1, 1, queries_per_modality=0, with_queries=True)


class TestStripQueries:
    def test_removes_queries_keeps_nav(self):
        lay = L.build_layout(2, 2, 1, 3, 4, queries_per_modality=2, with_queries=True)
        stripped = L.strip_queries(lay)
        assert not stripped.has_queries
        nav = [(r.kind, r.turn, n) for r, n in lay.segments if not r.is_query]
        assert [(r.kind, r.turn, n) for r, n in stripped.segments] == nav

    def test_idempotent(self):
        lay = L.build_layout(2, 2, 1, 3, 4, queries_per_modality=2, with_queries=True)
        once = L.strip_queries(lay)
        assert L.strip_queries(once) == once

    def test_token_count_arithmetic(self):
        lay = L.build_layout(3, 2, 1, 3, 4, queries_per_modality=2, with_queries=True)
        assert lay.total_tokens - L.strip_queries(lay).total_tokens == 3 * 2 * 2


class TestBuildMask:
    def test_single_turn_no_queries_is_lower_triangular(self):
        lay = L.build_layout(1, 2, 1, 2, 1)
        n = lay.total_tokens
        tri = np.tril(np.ones((n, n), dtype=bool))
        for variant in L.VARIANTS:
            np.testing.assert_array_equal(L.build_mask(lay, variant), tri)

    def test_matches_oracle_on_random_layouts(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            lay = random_layout(rng)
            for variant in L.VARIANTS:
                got = L.build_mask(lay, variant)
                want = L.check_mask_oracle(lay, variant)
                np.testing.assert_array_equal(got, want)

    def test_nav_submatrix_equals_stripped_mask(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            lay = random_layout(rng, with_queries=True)
            mask = L.build_mask(lay, "strict")
            nav_idx = [i for i, r in enumerate(lay.token_roles()) if r.is_nav]
            sub = mask[np.ix_(nav_idx, nav_idx)]
            np.testing.assert_array_equal(sub, L.build_mask(L.strip_queries(lay), "strict"))

    def test_unknown_variant(self):
        lay = L.build_layout(1, 1, 1, 1, 1)
        with pytest.raises(ValueError):
            L.build_mask(lay, "causal")


@pytest.fixture(scope="module")
def cases():
    rng = np.random.default_rng(7)
    return [random_layout(rng, with_queries=True) for _ in range(12)]


class TestMaskProperties:
    def test_no_future_leakage(self, cases):
        for lay in cases:
            n = lay.total_tokens
            future = np.triu(np.ones((n, n), dtype=bool), k=1)
            for variant in L.VARIANTS:
                assert not (L.build_mask(lay, variant) & future).any()

    def test_strict_modality_disentanglement(self, cases):
        for lay in cases:
            mask = L.build_mask(lay, "strict")
            roles = lay.token_roles()
            for q, rq in enumerate(roles):
                for k, rk in enumerate(roles):
                    if rq.is_query and rk.is_query and rq.kind != rk.kind:
                        assert not mask[q, k]

    def test_strict_turn_isolation(self, cases):
        for lay in cases:
            mask = L.build_mask(lay, "strict")
            roles = lay.token_roles()
            for q, rq in enumerate(roles):
                for k, rk in enumerate(roles):
                    if rq.is_query and rk.is_query and rq.turn != rk.turn:
                        assert not mask[q, k]

    def test_strict_query_invisibility(self, cases):
        for lay in cases:
            mask = L.build_mask(lay, "strict")
            roles = lay.token_roles()
            nav = np.array([r.is_nav for r in roles])
            assert not mask[np.ix_(nav, ~nav)].any()

    def test_noiso_differs_only_on_same_turn_cross_modality(self, cases):
        for lay in cases:
            strict = L.build_mask(lay, "strict")
            noiso = L.build_mask(lay, "noiso")
            diff = noiso & ~strict
            assert not (strict & ~noiso).any()
            roles = lay.token_roles()
            for q, k in zip(*np.nonzero(diff)):
                rq, rk = roles[q], roles[k]
                assert rq.is_query and rk.is_query
                assert rq.turn == rk.turn and rq.kind != rk.kind
            # and the full expected set is present, not just a subset
            for q, rq in enumerate(roles):
                for k, rk in enumerate(roles):
                    if (rq.is_query and rk.is_query and rq.turn == rk.turn
                            and rq.kind != rk.kind and k <= q):
                        assert noiso[q, k]

    def test_leaky_nav_sees_earlier_queries(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            lay = random_layout(rng, with_queries=True)
            mask = L.build_mask(lay, "leaky")
            roles = lay.token_roles()
            count = sum(mask[q, k]
                        for q, rq in enumerate(roles) if rq.is_nav
                        for k, rk in enumerate(roles) if rk.is_query)
            if lay.num_turns >= 2:
                assert count > 0

    def test_strict_nav_to_query_count_zero(self):
        lay = L.build_layout(3, 2, 1, 2, 2, queries_per_modality=2, with_queries=True)
        mask = L.build_mask(lay, "strict")
        roles = lay.token_roles()
        count = sum(mask[q, k]
                    for q, rq in enumerate(roles) if rq.is_nav
                    for k, rk in enumerate(roles) if rk.is_query)
        assert count == 0

    def test_nav_diagonal_true(self, cases):
        for lay in cases:
            for variant in L.VARIANTS:
                mask = L.build_mask(lay, variant)
                assert mask.diagonal().all()


class TestDumpFormats:
    def test_ascii(self):
        mask = np.array([[True, False], [True, True]])
        assert L.mask_to_ascii(mask) == "1.\n11\n"

    def test_pgm(self):
        mask = np.array([[True, False]])
        text = L.mask_to_pgm(mask)
        lines = text.splitlines()
        assert lines[0] == "P2"
        assert lines[1] == "2 1"
        assert lines[2] == "255"
        assert lines[3] == "255 0"
