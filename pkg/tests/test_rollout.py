import numpy as np
import pytest
from fractions import Fraction

from cafe import predictor as pred
from cafe.montage import build_schedule, make_layout, missing_channels
from cafe.predictor import PredictorHyper, init_params
from cafe.rollout import (
    init_state,
    make_context,
    merge_step,
    run_inference,
    run_inference_batch,
    run_oneshot,
)
from cafe.signals import SignalBlock
from cafe.synthdata import gen_montage
from cafe.montage import select_ld_layout

SMALL = PredictorHyper(hidden=8, feat=6, conv_width=6, kernel=3, ff=8)


def setup_case(c_h=8, c_l=3, g=2, t=16, seed=0):
    mont = gen_montage("ring", c_h, seed=seed)
    lay = select_ld_layout(mont, c_l, seed=seed)
    fractions = () if g == 1 else tuple(Fraction(i + 1, g) for i in range(g - 1))
    sch = build_schedule(mont, lay, g, fractions)
    rng = np.random.default_rng(seed)
    x_l = SignalBlock(data=rng.standard_normal((c_l, t)), sample_rate_hz=10.0)
    return mont, lay, sch, x_l


def test_init_state_places_anchors_and_zeros():
    mont, lay, sch, x_l = setup_case(c_h=4, c_l=2, g=1)
    st = init_state(x_l, lay, sch)
    obs = list(lay.observed)
    np.testing.assert_array_equal(st.assembled[obs], x_l.data)
    miss = [i for i in range(4) if i not in obs]
    np.testing.assert_array_equal(st.assembled[miss], 0.0)
    assert st.step == 0
    np.testing.assert_array_equal(np.flatnonzero(st.visible), obs)


def test_init_state_masked_rows_zero_elementwise():
    mont, lay, sch, x_l = setup_case(seed=3)
    st = init_state(x_l, lay, sch)
    hidden = st.assembled * (1.0 - st.visible[:, None])
    np.testing.assert_array_equal(hidden, 0.0)


def test_init_state_row_count_mismatch():
    mont, lay, sch, x_l = setup_case()
    bad = SignalBlock(data=np.zeros((2, 16)) + 1.0)
    with pytest.raises(ValueError):
        init_state(bad, lay, sch)


def test_make_context_zeroes_stale_hidden_rows():
    mont, lay, sch, x_l = setup_case(c_h=8, c_l=3, g=2)
    st = init_state(x_l, lay, sch)
    # inject sentinels into hidden rows of the assembled tensor
    tampered = st.assembled.copy()
    for u in sch.groups[1]:
        tampered[u] = 777.0
    st = type(st)(
        assembled=tampered,
        anchors=st.anchors,
        visible=st.visible,
        step=st.step,
        layout=st.layout,
        schedule=st.schedule,
        sample_rate_hz=st.sample_rate_hz,
    )
    ctx = make_context(st)
    for u in sch.groups[0] + sch.groups[1]:
        np.testing.assert_array_equal(ctx.data[u], 0.0)


def test_merge_writes_only_target_group():
    mont, lay, sch, x_l = setup_case(c_h=8, c_l=3, g=2)
    st = init_state(x_l, lay, sch)
    est = np.full((8, 16), 7.0)
    st2 = merge_step(st, est)
    for u in sch.groups[0]:
        np.testing.assert_array_equal(st2.assembled[u], 7.0)
    for u in sch.groups[1]:
        np.testing.assert_array_equal(st2.assembled[u], 0.0)
    np.testing.assert_array_equal(st2.assembled[list(lay.observed)], x_l.data)
    assert st2.step == 1


def test_merge_never_overwrites_anchors():
    mont, lay, sch, x_l = setup_case()
    st = init_state(x_l, lay, sch)
    est = np.full((8, 16), -123.0)  # anchors rows differ from x_l on purpose
    st2 = merge_step(st, est)
    assert np.array_equal(st2.assembled[list(lay.observed)], x_l.data)


def test_visible_telescopes_to_full_set():
    mont, lay, sch, x_l = setup_case(c_h=8, c_l=3, g=2)
    st = init_state(x_l, lay, sch)
    prev_count = int(st.visible.sum())
    for _ in range(sch.n_groups):
        st = merge_step(st, np.zeros((8, 16)))
        assert int(st.visible.sum()) > prev_count  # strictly monotone
        prev_count = int(st.visible.sum())
    np.testing.assert_array_equal(st.visible, 1.0)


def test_merge_shape_mismatch():
    mont, lay, sch, x_l = setup_case()
    st = init_state(x_l, lay, sch)
    with pytest.raises(ValueError):
        merge_step(st, np.zeros((4, 16)))


def identity_stub(params, ctx, mask):
    return ctx.data.copy()


def test_identity_stub_rollout_leaves_missing_zero():
    mont, lay, sch, x_l = setup_case(c_h=8, c_l=3, g=2)
    out = run_inference(None, x_l, lay, sch, forward_fn=identity_stub)
    miss = missing_channels(mont, lay)
    np.testing.assert_array_equal(out.data[list(miss)], 0.0)
    np.testing.assert_array_equal(out.data[list(lay.observed)], x_l.data)


@pytest.mark.parametrize("kind", pred.BACKBONE_KINDS)
def test_anchor_rows_bit_exact_after_rollout(kind):
    mont, lay, sch, x_l = setup_case(c_h=8, c_l=3, g=2, seed=5)
    params = init_params(kind, 8, 16, SMALL, seed=5)
    out = run_inference(params, x_l, lay, sch)
    assert np.array_equal(out.data[list(lay.observed)], x_l.data)
    assert np.all(np.isfinite(out.data))


@pytest.mark.parametrize("kind", pred.BACKBONE_KINDS)
def test_oneshot_equals_single_group_rollout(kind):
    mont, lay, _, x_l = setup_case(c_h=8, c_l=3, g=1, seed=6)
    sch1 = build_schedule(mont, lay, 1, ())
    params = init_params(kind, 8, 16, SMALL, seed=6)
    a = run_inference(params, x_l, lay, sch1)
    b = run_oneshot(params, x_l, lay)
    assert np.array_equal(a.data, b.data)


def test_oneshot_generally_differs_from_multistep():
    mont, lay, sch, x_l = setup_case(c_h=8, c_l=3, g=2, seed=7)
    params = init_params("conv", 8, 16, SMALL, seed=7)
    multi = run_inference(params, x_l, lay, sch)
    one = run_oneshot(params, x_l, lay)
    assert not np.array_equal(multi.data, one.data)


def test_causality_sentinel_future_groups_never_seen():
    """Contexts at step g must not depend on values of later groups."""
    mont, lay, sch, x_l = setup_case(c_h=10, c_l=3, g=3, seed=8)
    seen = []

    def recording_stub(params, ctx, mask):
        seen.append(ctx.data.copy())
        est = np.zeros_like(ctx.data)
        for g in range(sch.n_groups):
            for u in sch.groups[g]:
                est[u] = 100.0 + g  # marker per group
        return est

    run_inference(None, x_l, lay, sch, forward_fn=recording_stub)
    for g, ctx in enumerate(seen):
        for later in range(g, sch.n_groups):
            for u in sch.groups[later]:
                np.testing.assert_array_equal(ctx[u], 0.0)
        for earlier in range(g):
            for u in sch.groups[earlier]:
                np.testing.assert_array_equal(ctx[u], 100.0 + earlier)


def test_inference_deterministic():
    mont, lay, sch, x_l = setup_case(seed=9)
    params = init_params("mlp", 8, 16, SMALL, seed=9)
    a = run_inference(params, x_l, lay, sch)
    b = run_inference(params, x_l, lay, sch)
    assert np.array_equal(a.data, b.data)


def test_batch_rollout_matches_per_sample():
    mont, lay, sch, _ = setup_case(c_h=8, c_l=3, g=2, seed=10)
    params = init_params("conv", 8, 16, SMALL, seed=10)
    rng = np.random.default_rng(0)
    anchors = rng.standard_normal((5, 3, 16))
    batch = run_inference_batch(params, anchors, lay, sch)
    for i in range(5):
        single = run_inference(params, SignalBlock(data=anchors[i]), lay, sch)
        np.testing.assert_allclose(batch[i], single.data, atol=1e-10)


def test_context_after_rollout_finished():
    mont, lay, sch, x_l = setup_case(g=1)
    st = init_state(x_l, lay, sch)
    st = merge_step(st, np.zeros((8, 16)))
    with pytest.raises(ValueError):
        make_context(st)
