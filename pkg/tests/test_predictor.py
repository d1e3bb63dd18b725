import numpy as np
import pytest

from cafe import predictor as pred
from cafe.montage import build_schedule, make_layout
from cafe.predictor import (
    ModelArtifact,
    PredictorHyper,
    PredictorParams,
    init_params,
    load_model,
    save_model,
)
from cafe.signals import ChannelStats, FormatError, SignalBlock
from cafe.synthdata import gen_montage
from cafe.montage import select_ld_layout
from fractions import Fraction

SMALL = PredictorHyper(hidden=8, feat=6, conv_width=6, kernel=3, ff=8)


def test_init_deterministic_and_seed_sensitive():
    a = init_params("mlp", 8, 16, SMALL, seed=3)
    b = init_params("mlp", 8, 16, SMALL, seed=3)
    c = init_params("mlp", 8, 16, SMALL, seed=4)
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name])
    assert any(not np.array_equal(a.tensors[n], c.tensors[n]) for n in a.tensors)


def test_mlp_param_count_closed_form():
    c_h, t = 16, 128
    hyper = PredictorHyper(hidden=64, feat=32)
    p = init_params("mlp", c_h, t, hyper, seed=0, input_mode="mask_appended")
    c_in = 2 * c_h
    h, d = hyper.hidden, hyper.feat
    expected = (
        c_in * h + h  # channel-mix layer 1
        + h * c_h + c_h  # channel-mix layer 2
        + c_in * c_h  # linear skip
        + t * d  # temporal features
        + c_h * d  # per-channel positional encodings
        + d * t + t  # temporal decode
    )
    assert p.n_params() == expected


def test_masked_only_halves_input_channels():
    a = init_params("mlp", 8, 16, SMALL, seed=0, input_mode="masked_only")
    b = init_params("mlp", 8, 16, SMALL, seed=0, input_mode="mask_appended")
    assert a.c_in == 8 and b.c_in == 16
    assert a.tensors["mix_w1"].shape[0] == 8
    assert b.tensors["mix_w1"].shape[0] == 16


@pytest.mark.parametrize("kind", pred.BACKBONE_KINDS)
def test_forward_deterministic_and_finite(kind):
    params = init_params(kind, 6, 32, SMALL, seed=1)
    rng = np.random.default_rng(0)
    ctx = rng.standard_normal((6, 32))
    mask = np.array([1.0, 0, 1, 0, 0, 1])
    ctx = ctx * mask[:, None]
    blk = SignalBlock(data=ctx, sample_rate_hz=10.0)
    out1 = pred.forward(params, blk, mask)
    out2 = pred.forward(params, blk, mask)
    assert np.array_equal(out1.estimate.data, out2.estimate.data)
    assert out1.estimate.data.shape == (6, 32)
    assert out1.estimate.sample_rate_hz == 10.0


@pytest.mark.parametrize("kind", pred.BACKBONE_KINDS)
def test_all_zero_context_finite(kind):
    params = init_params(kind, 6, 32, SMALL, seed=2)
    out = pred.forward(params, np.zeros((6, 32)), np.zeros(6))
    assert np.all(np.isfinite(out.estimate.data))


@pytest.mark.parametrize("kind", pred.BACKBONE_KINDS)
def test_backward_zero_upstream_gives_zero_grads(kind):
    params = init_params(kind, 6, 32, SMALL, seed=3)
    rng = np.random.default_rng(1)
    ctx = rng.standard_normal((6, 32))
    mask = np.ones(6)
    out = pred.forward(params, ctx, mask)
    grads = pred.backward(params, out.cache, np.zeros((6, 32)))
    assert set(grads) == set(params.tensors)
    for name, g in grads.items():
        assert g.shape == params.tensors[name].shape
        np.testing.assert_array_equal(g, 0.0)


@pytest.mark.parametrize("kind", pred.BACKBONE_KINDS)
def test_backward_linear_in_upstream(kind):
    params = init_params(kind, 6, 32, SMALL, seed=4)
    rng = np.random.default_rng(2)
    ctx = rng.standard_normal((6, 32))
    mask = np.ones(6)
    out = pred.forward(params, ctx, mask)
    up = rng.standard_normal((6, 32))
    g1 = pred.backward(params, out.cache, up)
    g2 = pred.backward(params, out.cache, 2.0 * up)
    for name in g1:
        np.testing.assert_allclose(g2[name], 2.0 * g1[name], rtol=1e-12, atol=1e-12)


def test_backward_rejects_mismatched_cache():
    p_conv = init_params("conv", 6, 32, SMALL, seed=5)
    p_mlp = init_params("mlp", 6, 32, SMALL, seed=5)
    out = pred.forward(p_conv, np.zeros((6, 32)), np.ones(6))
    with pytest.raises(ValueError):
        pred.backward(p_mlp, out.cache, np.zeros((6, 32)))


def test_context_shape_mismatch_rejected():
    params = init_params("mlp", 6, 32, SMALL, seed=6)
    with pytest.raises(ValueError):
        pred.forward(params, np.zeros((5, 32)), np.ones(5))


def _make_artifact(kind="conv", seed=0):
    mont = gen_montage("grid", 9, seed=0)
    lay = select_ld_layout(mont, 3, seed=0)
    sch = build_schedule(mont, lay, 2, (Fraction(1, 2),))
    params = init_params(kind, 9, 16, SMALL, seed=seed)
    stats = ChannelStats(mean=np.arange(9.0), std=np.ones(9) + 0.5)
    return mont, ModelArtifact(
        params=params,
        stats=stats,
        schedule=sch,
        layout=lay,
        sample_rate_hz=100.0,
        config_echo={"scheme": "ss", "pi": "0.95"},
    )


def test_model_round_trip_bit_exact_forward(tmp_path):
    mont, art = _make_artifact()
    path = tmp_path / "m.cafe"
    save_model(art, path)
    back = load_model(path, expect_montage=mont)
    rng = np.random.default_rng(3)
    ctx = rng.standard_normal((9, 16))
    mask = np.ones(9)
    before = pred.forward(art.params, ctx, mask).estimate.data
    after = pred.forward(back.params, ctx, mask).estimate.data
    assert np.array_equal(before, after)
    for name in art.params.tensors:
        assert np.array_equal(art.params.tensors[name], back.params.tensors[name])
    np.testing.assert_array_equal(back.stats.mean, art.stats.mean)
    assert back.schedule == art.schedule
    assert back.layout.observed == art.layout.observed
    assert back.config_echo == art.config_echo
    assert back.sample_rate_hz == 100.0


def test_model_montage_hash_mismatch(tmp_path):
    _, art = _make_artifact()
    path = tmp_path / "m.cafe"
    save_model(art, path)
    other = gen_montage("ring", 9, seed=0)
    with pytest.raises(FormatError, match="hash"):
        load_model(path, expect_montage=other)


def test_model_backbone_kind_mismatch(tmp_path):
    _, art = _make_artifact(kind="conv")
    path = tmp_path / "m.cafe"
    save_model(art, path)
    with pytest.raises(FormatError, match="backbone"):
        load_model(path, expect_backbone="mlp")


def test_model_not_a_model_file(tmp_path):
    path = tmp_path / "junk.cafe"
    path.write_bytes(b"garbage")
    with pytest.raises(FormatError):
        load_model(path)


def test_invalid_hyper_rejected():
    with pytest.raises(ValueError):
        PredictorHyper(kernel=4)
    with pytest.raises(ValueError):
        PredictorHyper(hidden=0)
    with pytest.raises(ValueError):
        init_params("nosuch", 4, 8)
