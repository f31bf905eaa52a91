import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_plan, expected_unmerge
from ocdiff.errors import ConfigError, DegenerateTokenError, PartitionError, ShapeError
from ocdiff.tensor import ForegroundMask, TokenGrid
from ocdiff.tome import (
    DEFAULT_CAPS,
    MergeConfig,
    MergePlan,
    SearchMode,
    WindowSpec,
    _best_matches,
    apply_merge,
    build_plan,
    cap_rate,
    eta_sim,
    merge_attention_inputs,
    merge_count,
    replay,
    sample_dst,
    sim,
    unmerge,
    untouched_dst,
)


def rand_case(gen, dims, c=4, fg_frac=0.4, palette=None):
    if palette is None:
        x = gen.standard_normal((*dims, c))
    else:
        pal = gen.standard_normal((palette, c))
        x = pal[gen.integers(0, palette, size=dims)]
    return TokenGrid(x), ForegroundMask(gen.random(dims) < fg_frac)


def frames_of(idx, dims):
    return np.asarray(idx) // (dims[1] * dims[2])


# -- similarity ---------------------------------------------------------------

def test_sim_endpoints():
    assert sim([1, 0], [1, 0]) == 1.0
    assert sim([1, 0], [0, 1]) == 0.5
    assert sim([1, 0], [-1, 0]) == 0.0


def test_sim_degenerate_and_shape():
    with pytest.raises(DegenerateTokenError):
        sim([0, 0], [1, 0])
    with pytest.raises(ShapeError):
        sim([1, 0], [1, 0, 0])


@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-1e3, 1e3), min_size=n, max_size=n),
    st.lists(st.floats(-1e3, 1e3), min_size=n, max_size=n),
)))
@settings(max_examples=200)
def test_sim_range_and_symmetry(pair):
    a, b = pair
    if not (np.any(a) and np.any(b)) or min(np.linalg.norm(a), np.linalg.norm(b)) < 1e-150:
        return
    s = sim(a, b)
    assert 0.0 <= s <= 1.0
    assert s == sim(b, a)


def test_eta_sim_cases():
    a, b = [1.0, 0.2], [0.3, 1.0]
    s = sim(a, b)
    for eta in (0.0, 0.3, 1.0):
        assert eta_sim(a, b, False, eta) == s
    assert eta_sim(a, b, True, 1.0) == s
    assert eta_sim(a, b, True, 0.0) == 0.0
    assert eta_sim(a, b, True, 0.5) == 0.5 * s


# -- destination sampling -----------------------------------------------------

def test_sample_dst_one_per_cell():
    dst = sample_dst((1, 4, 4), WindowSpec(1, 2, 2), seed=3)
    assert dst.size == 4
    cells = {((d // 4) // 2, (d % 4) // 2) for d in dst.tolist()}
    assert cells == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_sample_dst_remainder_cells_and_clamping():
    dst = sample_dst((3, 5, 5), WindowSpec(2, 2, 2), seed=1)
    # windows {0,1},{2}; 3x3 spatial cells each
    assert dst.size == 2 * 9
    assert sample_dst((1, 2, 2), WindowSpec(5, 9, 9), seed=0).size == 1


@given(st.tuples(st.integers(1, 5), st.integers(1, 9), st.integers(1, 9)),
       st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
       st.booleans(), st.integers(0, 2**63))
@settings(max_examples=80, deadline=None)
def test_sample_dst_cell_property(dims, strides, resample, seed):
    f, h, w = dims
    st_, sy, sx = (min(s, d) for s, d in zip(strides, dims))
    dst = sample_dst(dims, WindowSpec(*strides), resample, seed)
    ft, rem = np.divmod(dst, h * w)
    yy, xx = np.divmod(rem, w)
    cells = list(zip((ft // st_).tolist(), (yy // sy).tolist(), (xx // sx).tolist()))
    assert len(set(cells)) == len(cells)
    assert len(cells) == -(-f // st_) * -(-h // sy) * -(-w // sx)
    assert np.all(np.diff(dst) > 0)


def test_sample_dst_shared_offsets_across_frames():
    dst = sample_dst((4, 6, 6), WindowSpec(1, 2, 2), resample_per_window=False, seed=11)
    per_frame = dst.reshape(4, -1) - (np.arange(4) * 36)[:, None]
    assert all(np.array_equal(per_frame[0], per_frame[i]) for i in range(4))
    fresh = sample_dst((4, 6, 6), WindowSpec(1, 2, 2), resample_per_window=True, seed=11)
    fresh_pf = fresh.reshape(4, -1) - (np.arange(4) * 36)[:, None]
    assert not all(np.array_equal(fresh_pf[0], fresh_pf[i]) for i in range(4))


def test_sample_dst_deterministic():
    a = sample_dst((2, 8, 8), WindowSpec(), seed=7)
    assert np.array_equal(a, sample_dst((2, 8, 8), WindowSpec(), seed=7))


# -- rate capping -------------------------------------------------------------

def test_cap_rate_examples():
    r = cap_rate(0.99, 64, (8, 8), DEFAULT_CAPS)
    assert 64 - merge_count(r, 64) >= 4
    assert cap_rate(0.7, 4096, (64, 64), DEFAULT_CAPS) == 0.7
    assert cap_rate(0.5, 4, (2, 2), {(2, 2): 4}) == 0.0
    assert cap_rate(0.5, 4, (2, 2), {(2, 2): 9}) == 0.0


def test_merge_count_floor():
    assert merge_count(0.5, 7) == 3
    assert merge_count(0.3, 10) == 3  # 0.3*10 is 2.9999999999999996
    assert merge_count(1.0, 5) == 5


@pytest.mark.parametrize("hw", [8, 16])
@pytest.mark.parametrize("window", [WindowSpec(1, 8, 8), WindowSpec(2, 4, 4), WindowSpec(4, 8, 8), WindowSpec(1, 2, 2)])
@pytest.mark.parametrize("mode", list(SearchMode))
def test_caps_hold_at_high_rate(hw, window, mode):
    gen = np.random.default_rng(hw)
    g, m = rand_case(gen, (4, hw, hw))
    plan = build_plan(g, m, MergeConfig(r=0.99, window=window, search_mode=mode, seed=5))
    merged_per_frame = np.bincount(frames_of(plan.merge_src, g.dims), minlength=4)
    assert np.all(hw * hw - merged_per_frame >= DEFAULT_CAPS[(hw, hw)])


# -- plan construction ----------------------------------------------------------

def test_r_zero_merges_nothing():
    gen = np.random.default_rng(0)
    g, m = rand_case(gen, (2, 4, 4))
    plan = build_plan(g, m, MergeConfig(r=0.0))
    assert plan.n_merged == 0
    assert np.array_equal(np.sort(np.concatenate([plan.unm, plan.dst])), np.arange(32))


def test_eight_token_example_matches_oracle():
    gen = np.random.default_rng(8)
    g, m = rand_case(gen, (1, 2, 4))
    cfg = MergeConfig(r=0.5, eta=1.0, window=WindowSpec(1, 2, 2), caps={})
    plan = build_plan(g, m, cfg)
    assert plan.dst.size == 2
    unm, merges = brute_force_plan(g.tokens(), m.flat(), g.dims, plan.dst, 1.0, 0.5)
    assert plan.unm.tolist() == unm and plan.merges == merges


@st.composite
def oracle_case(draw):
    f = draw(st.integers(1, 4))
    h = draw(st.integers(1, 4))
    w = draw(st.integers(1, 32 // (f * h)))  # at most 32 tokens
    seed = draw(st.integers(0, 2**32 - 1))
    palette = draw(st.sampled_from([None, 2, 3]))
    c = draw(st.integers(1, 3))
    window = WindowSpec(draw(st.integers(1, 3)), draw(st.integers(1, 3)), draw(st.integers(1, 3)))
    mode = draw(st.sampled_from(list(SearchMode)))
    eta = draw(st.sampled_from([0.0, 0.3, 1.0]))
    r = draw(st.sampled_from([0.0, 0.25, 0.5, 0.8, 1.0]))
    return (f, h, w), seed, palette, c, window, mode, eta, r


@given(oracle_case())
@settings(max_examples=150, deadline=None)
def test_build_plan_equals_brute_force(case):
    dims, seed, palette, c, window, mode, eta, r = case
    gen = np.random.default_rng(seed)
    g, m = rand_case(gen, dims, c, palette=palette)
    cfg = MergeConfig(r=r, eta=eta, window=window, search_mode=mode, caps={}, seed=seed)
    plan = build_plan(g, m, cfg)
    s_t = window.clamped(dims).s_t
    unm, merges = brute_force_plan(g.tokens(), m.flat(), dims, plan.dst, eta, r, s_t, mode.value)
    assert plan.unm.tolist() == unm
    assert plan.merges == merges


def test_build_plan_with_caps_equals_brute_force():
    caps = {(2, 2): 2, (4, 4): 3}
    for seed in range(60):
        gen = np.random.default_rng(seed)
        hw = (2, 4)[seed % 2]
        dims = (2, hw, hw)
        g, m = rand_case(gen, dims, 2, palette=(None, 3)[seed % 3 == 0])
        window = WindowSpec(1 + seed % 2, hw, hw)
        mode = list(SearchMode)[seed % 2]
        cfg = MergeConfig(r=0.9, eta=0.3, window=window, search_mode=mode, caps=caps, seed=seed)
        plan = build_plan(g, m, cfg)
        unm, merges = brute_force_plan(g.tokens(), m.flat(), dims, plan.dst, 0.3, 0.9,
                                       window.clamped(dims).s_t, mode.value, caps)
        assert plan.merges == merges, seed
        assert plan.unm.tolist() == unm


def test_eta_zero_keeps_foreground_out():
    # all-foreground region plus positively similar background: fg sources rank last
    gen = np.random.default_rng(1)
    x = np.abs(gen.standard_normal((1, 4, 4, 3))) + 0.1  # positive orthant: every sim > 0.5
    bits = np.zeros((1, 4, 4), bool)
    bits[0, :2] = True
    g, m = TokenGrid(x), ForegroundMask(bits)
    plan = build_plan(g, m, MergeConfig(r=0.5, eta=0.0, caps={}, seed=2))
    src = np.setdiff1d(np.arange(16), plan.dst)
    n_bg_src = int((~m.flat()[src]).sum())
    assert plan.n_merged <= n_bg_src
    assert not m.flat()[plan.merge_src].any()


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.2, 0.5, 0.8]), st.sampled_from(list(SearchMode)))
@settings(max_examples=40, deadline=None)
def test_eta_monotone_protection(seed, r, mode):
    gen = np.random.default_rng(seed)
    g, m = rand_case(gen, (2, 6, 6), 3, fg_frac=0.5)
    counts = []
    for eta in (1.0, 0.8, 0.5, 0.3, 0.1, 0.0):
        plan = build_plan(g, m, MergeConfig(r=r, eta=eta, search_mode=mode, caps={}, seed=seed))
        counts.append(int(m.flat()[plan.merge_src].sum()))
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_eta_one_plan_ignores_mask():
    gen = np.random.default_rng(3)
    g, m = rand_case(gen, (2, 8, 8))
    a = build_plan(g, m, MergeConfig(eta=1.0))
    b = build_plan(g, ~m, MergeConfig(eta=1.0))
    assert a == b


@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
@settings(max_examples=30, deadline=None)
def test_wts_locality(seed, s_t):
    gen = np.random.default_rng(seed)
    g, m = rand_case(gen, (5, 4, 4))
    plan = build_plan(g, m, MergeConfig(r=0.8, window=WindowSpec(s_t, 2, 2), seed=seed))
    src_w = frames_of(plan.merge_src, g.dims) // s_t
    dst_w = frames_of(plan.dst[plan.merge_dst], g.dims) // s_t
    assert np.array_equal(src_w, dst_w)


def test_gts_best_match_dominates_wts():
    gen = np.random.default_rng(4)
    g, m = rand_case(gen, (4, 6, 6))
    x = g.tokens()
    norms = np.linalg.norm(x, axis=1)
    dst = sample_dst(g.dims, WindowSpec(), seed=0)
    src = np.setdiff1d(np.arange(g.n_tokens), dst)
    fg = m.flat()[src]
    span = 36
    edges = np.arange(0, g.n_tokens + span, span)
    sc, dc = np.searchsorted(src, edges), np.searchsorted(dst, edges)
    wts_groups = [(sc[i], sc[i + 1], dc[i], dc[i + 1]) for i in range(4)]
    best_w, _ = _best_matches(x, norms, src, dst, fg, 0.5, wts_groups)
    best_g, _ = _best_matches(x, norms, src, dst, fg, 0.5, [(0, src.size, 0, dst.size)])
    assert np.all(best_g >= best_w)


def test_degenerate_token_rejected():
    x = np.ones((1, 2, 2, 2))
    x[0, 1, 1] = 0.0
    with pytest.raises(DegenerateTokenError):
        build_plan(TokenGrid(x), ForegroundMask.full((1, 2, 2)), MergeConfig())


def test_mask_mismatch_rejected():
    g, _ = rand_case(np.random.default_rng(0), (1, 4, 4))
    with pytest.raises(ShapeError):
        build_plan(g, ForegroundMask.full((1, 4, 3)), MergeConfig())


def test_config_validation():
    with pytest.raises(ConfigError):
        MergeConfig(r=1.5)
    with pytest.raises(ConfigError):
        MergeConfig(eta=-0.1)
    with pytest.raises(ConfigError):
        MergeConfig(caps={(8, 8): 0})
    with pytest.raises(ConfigError):
        WindowSpec(0, 1, 1)


def test_plan_is_deterministic():
    g, m = rand_case(np.random.default_rng(5), (3, 8, 8))
    cfg = MergeConfig(r=0.6, eta=0.4, seed=99)
    assert build_plan(g, m, cfg) == build_plan(g, m, cfg)


def test_merge_count_matches_floor_of_rate():
    g, m = rand_case(np.random.default_rng(6), (2, 6, 6))
    plan = build_plan(g, m, MergeConfig(r=0.37, caps={}))
    n_src = g.n_tokens - plan.dst.size
    assert plan.n_merged == math.floor(0.37 * n_src)


# -- merge / unmerge ----------------------------------------------------------

def manual_plan(n, dst, unm, merges, sizes=None):
    merges = np.asarray(merges, dtype=np.int64).reshape(-1, 2)
    return MergePlan((1, 1, n), dst, unm, merges[:, 0], merges[:, 1],
                     np.ones(len(dst)) if sizes is None else sizes)


def test_two_point_average():
    plan = manual_plan(2, [0], [], [[1, 0]])
    merged, sizes = apply_merge(np.array([[2.0], [4.0]]), plan)
    assert merged.tolist() == [[3.0]] and sizes.tolist() == [2.0]


def test_three_sources_into_one():
    plan = manual_plan(4, [0], [], [[1, 0], [2, 0], [3, 0]])
    merged, sizes = apply_merge(np.array([[0.0], [1.0], [2.0], [3.0]]), plan)
    assert merged.tolist() == [[1.5]] and sizes.tolist() == [4.0]


def test_output_order_unm_then_dst():
    plan = manual_plan(5, [4, 1], [0, 3], [[2, 1]])
    x = np.arange(5, dtype=float)[:, None]
    merged, _ = apply_merge(x, plan)
    assert merged[:, 0].tolist() == [0.0, 3.0, 4.0, 1.5]  # unm 0,3; dst 4; dst 1 averaged with src 2


def test_apply_merge_shape_errors():
    plan = manual_plan(3, [0], [1, 2], [])
    with pytest.raises(ShapeError):
        apply_merge(np.zeros((4, 1)), plan)
    with pytest.raises(ShapeError):
        unmerge(np.zeros((2, 1)), plan)


def test_plan_partition_validation():
    with pytest.raises(PartitionError):
        manual_plan(3, [0], [1], [])
    with pytest.raises(PartitionError):
        manual_plan(3, [0], [1, 1], [[2, 0]])
    with pytest.raises(PartitionError):
        manual_plan(3, [0], [1], [[2, 1]])


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.1, 0.5, 0.9]), st.booleans())
@settings(max_examples=50, deadline=None)
def test_conservation(seed, r, prior_sizes):
    gen = np.random.default_rng(seed)
    g, m = rand_case(gen, (2, 6, 6), 3)
    plan = build_plan(g, m, MergeConfig(r=r, seed=seed))
    if prior_sizes:
        plan = MergePlan(plan.dims, plan.dst, plan.unm, plan.merge_src, plan.merge_dst,
                         gen.integers(1, 5, size=plan.dst.size).astype(float))
    x = g.tokens()
    w = np.ones(g.n_tokens)
    w[plan.dst] = plan.dst_sizes
    before = (x * w[:, None]).sum(axis=0)
    merged, sizes = apply_merge(g, plan)
    n_unm = plan.unm.size
    after = merged[:n_unm].sum(axis=0) + (merged[n_unm:] * sizes[:, None]).sum(axis=0)
    assert np.all(np.abs(after - before) <= 1e-9 * np.maximum(1.0, np.abs(x * w[:, None]).sum(axis=0)))


def test_zero_rate_roundtrip_is_bit_exact():
    g, m = rand_case(np.random.default_rng(7), (3, 8, 8))
    plan = build_plan(g, m, MergeConfig(r=0.0))
    assert unmerge(apply_merge(g, plan)[0], plan) == g


def test_identical_pair_reconstructs_exactly():
    x = np.array([[1.5, -2.0], [1.5, -2.0]])
    plan = manual_plan(2, [0], [], [[1, 0]])
    assert np.array_equal(unmerge(apply_merge(x, plan)[0], plan).tokens(), x)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_unmerge_matches_positional_oracle(seed):
    gen = np.random.default_rng(seed)
    g, m = rand_case(gen, (2, 6, 6), 3)
    plan = build_plan(g, m, MergeConfig(r=0.5, seed=seed))
    rec = unmerge(apply_merge(g, plan)[0], plan).tokens()
    x = g.tokens()
    exact = np.concatenate([plan.unm, untouched_dst(plan)])
    assert np.array_equal(rec[exact], x[exact])
    assert np.allclose(rec, expected_unmerge(x, plan.dst, plan.merges), rtol=0, atol=1e-12)
    # merged sources take their destination's value
    assert np.array_equal(rec[plan.merge_src], rec[plan.dst[plan.merge_dst]])


# -- plan records and replay --------------------------------------------------

def test_json_schema_and_roundtrip():
    g, m = rand_case(np.random.default_rng(9), (2, 4, 4))
    plan = build_plan(g, m, MergeConfig(r=0.5, seed=123))
    d = json.loads(plan.dumps())
    assert set(d) >= {"dst", "unm", "merges", "sizes", "seed"}
    assert d["seed"] == 123 and all(len(p) == 2 for p in d["merges"])
    assert MergePlan.loads(plan.dumps()) == plan


def test_replay_on_second_grid():
    gen = np.random.default_rng(10)
    g1, m = rand_case(gen, (2, 6, 6))
    g2, _ = rand_case(gen, (2, 6, 6))
    plan = build_plan(g1, m, MergeConfig(r=0.5))
    loaded = MergePlan.loads(plan.dumps())
    assert loaded.same_structure(plan)
    assert np.array_equal(replay(loaded, g1), apply_merge(g1, plan)[0])
    out2 = replay(loaded, g2)
    assert out2.shape == (plan.n_out, g2.channels)
    assert np.array_equal(out2[: plan.unm.size], g2.tokens()[plan.unm])
    with pytest.raises(ShapeError):
        replay(plan, TokenGrid(np.ones((1, 6, 6, 4))))


def test_plan_is_data_independent_in_structure():
    gen = np.random.default_rng(11)
    g1, m = rand_case(gen, (2, 6, 6))
    g2, _ = rand_case(gen, (2, 6, 6))
    cfg = MergeConfig(r=0.5, caps={})
    p1, p2 = build_plan(g1, m, cfg), build_plan(g2, m, cfg)
    assert np.array_equal(p1.dst, p2.dst)
    assert p1.n_merged == p2.n_merged and p1.n_out == p2.n_out


# -- attention inputs ---------------------------------------------------------

def test_kv_only_merging():
    gen = np.random.default_rng(12)
    q, m = rand_case(gen, (2, 8, 8))
    k, _ = rand_case(gen, (2, 8, 8))
    v, _ = rand_case(gen, (2, 8, 8))
    q2, k2, v2, plan = merge_attention_inputs(q, k, v, m, MergeConfig(r=0.5))
    assert np.array_equal(q2, q.tokens())
    assert k2.shape[0] == v2.shape[0] == q.n_tokens - plan.n_merged
    assert np.array_equal(k2, replay(plan, k)) and np.array_equal(v2, replay(plan, v))
    assert plan == build_plan(k, m, MergeConfig(r=0.5))


def test_kv_sixteenth_rate():
    gen = np.random.default_rng(13)
    q, m = rand_case(gen, (2, 8, 8))
    _, k2, _, plan = merge_attention_inputs(q, q, q, m, MergeConfig(r=1 / 16, caps={}))
    n_src = q.n_tokens - plan.dst.size
    assert k2.shape[0] == q.n_tokens - math.floor(n_src / 16)


def test_query_merging_when_not_kv_only():
    gen = np.random.default_rng(14)
    q, m = rand_case(gen, (1, 8, 8))
    q2, k2, _, plan = merge_attention_inputs(q, q, q, m, MergeConfig(r=0.5, kv_only=False))
    assert q2.shape == k2.shape
    with pytest.raises(ShapeError):
        merge_attention_inputs(q, TokenGrid(np.ones((1, 8, 4, 4))), q, m, MergeConfig())
