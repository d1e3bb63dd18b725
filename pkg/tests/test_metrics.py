import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cafe.metrics import (
    MetricsReport,
    StftConfig,
    evaluate_block,
    gain,
    nmse,
    nmse_per_channel,
    pcc,
    snr_db,
    spec_mae,
    stft_power,
)


def brute_force_spec_mae(pred, target, channel_set, cfg):
    """O(T^2) reference: per frame, per bin, explicit windowed DFT."""
    def power(x):
        win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(cfg.window) / cfg.window)
        n_frames = 1 + (x.shape[-1] - cfg.window) // cfg.hop
        n_bins = cfg.window // 2 + 1
        out = np.zeros((x.shape[0], n_frames, n_bins))
        for c in range(x.shape[0]):
            for f in range(n_frames):
                seg = x[c, f * cfg.hop : f * cfg.hop + cfg.window] * win
                for k in range(n_bins):
                    re = sum(seg[n] * np.cos(-2 * np.pi * k * n / cfg.window) for n in range(cfg.window))
                    im = sum(seg[n] * np.sin(-2 * np.pi * k * n / cfg.window) for n in range(cfg.window))
                    out[c, f, k] = re * re + im * im
        return out

    idx = sorted(channel_set)
    p = power(np.asarray(pred)[idx])
    t = power(np.asarray(target)[idx])
    return float(np.abs(p - t).mean())


def test_nmse_basics():
    t = np.array([[1.0, 0.0, -1.0, 0.0]])
    assert nmse(t, t, [0]) == 0.0
    assert nmse(np.zeros_like(t), t, [0]) == 1.0
    p = np.array([[1.0, 0.0, 0.0, 0.0]])
    assert nmse(p, t, [0]) == pytest.approx(0.5)


def test_nmse_zero_energy_target_rejected():
    with pytest.raises(ValueError):
        nmse(np.ones((2, 3)), np.zeros((2, 3)), [0, 1])


def test_nmse_channel_order_invariant():
    rng = np.random.default_rng(0)
    p = rng.standard_normal((5, 20))
    t = rng.standard_normal((5, 20))
    assert nmse(p, t, [1, 3, 4]) == nmse(p, t, [4, 1, 3])


def test_pcc_basics():
    rng = np.random.default_rng(1)
    t = rng.standard_normal((2, 50))
    assert pcc(t, t, [0, 1]) == pytest.approx(1.0)
    assert pcc(-t, t, [0, 1]) == pytest.approx(-1.0)
    assert pcc(t + 5.0, t, [0, 1]) == pytest.approx(1.0)  # shift invariance


def test_pcc_zero_variance_warns_and_zeroes():
    t = np.vstack([np.ones(10), np.arange(10.0)])
    p = np.vstack([np.arange(10.0), np.arange(10.0)])
    with pytest.warns(UserWarning):
        val = pcc(p, t, [0])
    assert val == 0.0


def test_snr_hand_value_and_cap():
    t = np.array([[1.0, 1.0]])
    p = np.array([[1.0 + np.sqrt(0.5), 1.0 - np.sqrt(0.5)]])  # nmse = 0.5
    assert snr_db(p, t, [0]) == pytest.approx(10.0 * np.log10(2.0), abs=1e-9)
    assert snr_db(t, t, [0]) == 120.0


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=10**6))
def test_snr_nmse_identity(seed):
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((3, 16))
    t = rng.standard_normal((3, 16))
    v = nmse(p, t, [0, 1, 2])
    assert snr_db(p, t, [0, 1, 2]) == pytest.approx(-10.0 * np.log10(v), abs=1e-9)


def test_spec_mae_zero_on_equal():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 128))
    assert spec_mae(x, x, [0, 1]) == 0.0


def test_spec_mae_matches_brute_force_dft():
    rng = np.random.default_rng(3)
    cfg = StftConfig(window=16, hop=8)
    p = rng.standard_normal((2, 64))
    t = rng.standard_normal((2, 64))
    fast = spec_mae(p, t, [0, 1], cfg)
    slow = brute_force_spec_mae(p, t, [0, 1], cfg)
    assert fast == pytest.approx(slow, abs=1e-9)


def test_spec_mae_amplitude_scaling_on_sinusoid():
    # doubling the amplitude quadruples power; |4P - P| = 3P elementwise
    cfg = StftConfig(window=32, hop=16)
    n = np.arange(128)
    s = np.sin(2 * np.pi * 4 * n / 32.0)[None, :]  # bin-aligned frequency
    base = spec_mae(np.zeros_like(s), s, [0], cfg)
    doubled = spec_mae(2.0 * s, s, [0], cfg)
    assert doubled == pytest.approx(3.0 * base, rel=1e-9)


def test_spec_mae_window_longer_than_signal():
    with pytest.raises(ValueError):
        spec_mae(np.zeros((1, 16)), np.zeros((1, 16)), [0], StftConfig(window=32, hop=16))


def test_stft_power_shape():
    x = np.zeros((3, 100))
    p = stft_power(x, StftConfig(window=64, hop=32))
    assert p.shape == (3, 2, 33)


def test_gain_table_cells():
    # lower-is-better: 0.18 -> 0.12 gives 33%; higher-is-better: 6.98 -> 9.04 gives 30%
    assert round(gain(0.18, 0.12, lower_is_better=True)) == 33
    assert round(gain(6.98, 9.04, lower_is_better=False)) == 30
    assert gain(0.5, 0.5, lower_is_better=True) == 0.0


def test_gain_zero_baseline_rejected():
    with pytest.raises(ValueError):
        gain(0.0, 1.0, True)


def test_report_cumulative_is_prefix_sum():
    rep = MetricsReport(nmse=0.2, pcc=0.9, snr_db=7.0, spec_mae=0.1,
                        per_group_nmse=[0.1, 0.25, 0.4])
    np.testing.assert_allclose(rep.cumulative_nmse, [0.1, 0.35, 0.75])


def test_report_json_line_stable_fields():
    rep = MetricsReport(nmse=0.2, pcc=0.9, snr_db=7.0, spec_mae=0.1)
    line = rep.to_json_line()
    assert line.index('"nmse"') < line.index('"pcc"') < line.index('"snr_db"')


def test_evaluate_block_full_report():
    rng = np.random.default_rng(4)
    t = rng.standard_normal((6, 128))
    p = t + 0.1 * rng.standard_normal((6, 128))
    rep = evaluate_block(p, t, [2, 3, 4, 5], groups=[[2, 3], [4, 5]])
    assert 0 < rep.nmse < 0.1
    assert rep.pcc > 0.9
    assert len(rep.per_group_nmse) == 2
    assert len(rep.cumulative_nmse) == 2
    assert rep.channel_set == (2, 3, 4, 5)


def test_nmse_per_channel_variant():
    p = np.array([[0.0, 0.0], [2.0, 0.0]])
    t = np.array([[1.0, 0.0], [2.0, 0.0]])
    # channel 0: nmse 1.0; channel 1: nmse 0.0
    assert nmse_per_channel(p, t, [0, 1]) == pytest.approx(0.5)
