import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from cafe.montage import missing_channels, select_ld_layout
from cafe.signals import SignalBlock, load_block
from cafe.synthdata import (
    GenConfig,
    gen_block,
    gen_linear_block,
    gen_montage,
    inject_anchor_noise,
    linear_mixing_matrix,
    load_dataset,
    make_dataset,
)


def test_grid_four_channels_are_unit_square_corners():
    m = gen_montage("grid", 4, seed=0)
    got = {tuple(p) for p in m.positions.tolist()}
    assert got == {(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0)}


def test_ring_eight_is_regular_octagon():
    m = gen_montage("ring", 8, seed=0)
    ang = 2 * np.pi * np.arange(8) / 8
    expected = np.stack([np.cos(ang), np.sin(ang), np.zeros(8)], axis=1)
    np.testing.assert_allclose(m.positions, expected, atol=1e-12)


def test_montage_deterministic():
    a = gen_montage("scalp", 20, seed=5)
    b = gen_montage("scalp", 20, seed=5)
    np.testing.assert_array_equal(a.positions, b.positions)


def test_grid_needs_four_channels():
    with pytest.raises(ValueError):
        gen_montage("grid", 3)


def test_gen_block_deterministic_and_seed_sensitive():
    m = gen_montage("grid", 9, seed=0)
    cfg = GenConfig(c_h=9, t=64, seed=3)
    a = gen_block(m, cfg)
    b = gen_block(m, cfg)
    c = gen_block(m, cfg, seed=4)
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_gen_block_uniform_mixing_limit():
    # sigma huge, one source, no noise: all channels identical
    m = gen_montage("grid", 9, seed=0)
    cfg = GenConfig(c_h=9, t=32, n_sources=1, spatial_sigma=1e6, noise_std=0.0, seed=1)
    blk = gen_block(m, cfg)
    for i in range(1, 9):
        np.testing.assert_allclose(blk.data[i], blk.data[0], rtol=1e-9)


def test_cross_channel_correlation_decays_with_distance():
    """Monte-Carlo: Spearman rho between |corr| and distance < -0.5."""
    m = gen_montage("grid", 16, seed=0)
    sigma = 0.3 * m.diameter()
    dists, corrs = [], []
    for seed in range(20):
        cfg = GenConfig(c_h=16, t=256, n_sources=8, spatial_sigma=sigma,
                        noise_std=0.02, seed=seed)
        x = gen_block(m, cfg).data
        cc = np.corrcoef(x)
        for i in range(16):
            for j in range(i + 1, 16):
                dists.append(np.linalg.norm(m.positions[i] - m.positions[j]))
                corrs.append(abs(cc[i, j]))
    rho = spearmanr(dists, corrs).statistic
    assert rho < -0.5, f"spearman rho {rho}"


def test_linear_block_exact_mixing_at_zero_noise():
    m = gen_montage("grid", 16, seed=0)
    lay = select_ld_layout(m, 4, seed=0)
    cfg = GenConfig(c_h=16, t=64, noise_std=0.0, seed=2)
    blk = gen_linear_block(m, lay, cfg)
    mix = linear_mixing_matrix(m, lay, cfg)
    obs = list(lay.observed)
    miss = list(missing_channels(m, lay))
    np.testing.assert_allclose(blk.data[miss], mix @ blk.data[obs], atol=1e-12)


def test_inject_noise_inf_sentinel_is_identity():
    rng = np.random.default_rng(3)
    blk = SignalBlock(data=rng.standard_normal((4, 64)))
    out = inject_anchor_noise(blk, math.inf, seed=0)
    np.testing.assert_array_equal(out.data, blk.data)


def test_inject_noise_hits_requested_snr():
    rng = np.random.default_rng(4)
    blk = SignalBlock(data=rng.standard_normal((4, 4096)))
    for target in (20.0, 10.0, 0.0):
        out = inject_anchor_noise(blk, target, seed=5)
        noise = out.data - blk.data
        snr = 10 * np.log10((blk.data**2).sum() / (noise**2).sum())
        assert abs(snr - target) < 0.5


def test_inject_noise_deterministic():
    blk = SignalBlock(data=np.random.default_rng(5).standard_normal((2, 128)))
    a = inject_anchor_noise(blk, 10.0, seed=6)
    b = inject_anchor_noise(blk, 10.0, seed=6)
    np.testing.assert_array_equal(a.data, b.data)


def test_make_dataset_round_trip(tmp_path):
    m = gen_montage("grid", 9, seed=0)
    lay = select_ld_layout(m, 3, seed=0)
    cfg = GenConfig(c_h=9, t=32, seed=7)
    root = make_dataset(m, lay, "correlated", 4, 2, 2, cfg, tmp_path / "ds")
    ds = load_dataset(root)
    assert ds.montage.content_hash() == m.content_hash()
    assert ds.layout.observed == lay.observed
    assert ds.manifest["kind"] == "correlated"
    assert len(ds.split("train")) == 4
    assert len(ds.split("val")) == 2
    assert len(ds.split("test")) == 2
    assert ds.gen_config() == cfg
    blk = ds.split("train")[0]
    assert blk.c == 9 and blk.t == 32


def test_make_dataset_rejects_zero_train(tmp_path):
    m = gen_montage("grid", 9, seed=0)
    lay = select_ld_layout(m, 3, seed=0)
    with pytest.raises(ValueError):
        make_dataset(m, lay, "correlated", 0, 1, 1, GenConfig(c_h=9, t=16), tmp_path / "x")


def test_make_dataset_refuses_nonempty_without_force(tmp_path):
    m = gen_montage("grid", 9, seed=0)
    lay = select_ld_layout(m, 3, seed=0)
    cfg = GenConfig(c_h=9, t=16, seed=8)
    make_dataset(m, lay, "correlated", 2, 0, 0, cfg, tmp_path / "d")
    with pytest.raises(ValueError):
        make_dataset(m, lay, "correlated", 2, 0, 0, cfg, tmp_path / "d")
    make_dataset(m, lay, "correlated", 2, 0, 0, cfg, tmp_path / "d", force=True)


def test_regeneration_byte_identical(tmp_path):
    m = gen_montage("grid", 9, seed=0)
    lay = select_ld_layout(m, 3, seed=0)
    cfg = GenConfig(c_h=9, t=32, seed=9)
    r1 = make_dataset(m, lay, "linear", 3, 1, 1, cfg, tmp_path / "a")
    r2 = make_dataset(m, lay, "linear", 3, 1, 1, cfg, tmp_path / "b")
    for rel in ["montage.csv", "layout.txt", "manifest.txt", "mixing.npy",
                "train/0000.cafesig", "val/0000.cafesig", "test/0000.cafesig"]:
        assert (r1 / rel).read_bytes() == (r2 / rel).read_bytes(), rel


def test_splits_differ(tmp_path):
    m = gen_montage("grid", 9, seed=0)
    lay = select_ld_layout(m, 3, seed=0)
    cfg = GenConfig(c_h=9, t=32, seed=10)
    root = make_dataset(m, lay, "correlated", 2, 2, 2, cfg, tmp_path / "s")
    tr = load_block(root / "train" / "0000.cafesig")
    va = load_block(root / "val" / "0000.cafesig")
    assert not np.array_equal(tr.data, va.data)


def test_gen_config_validation():
    with pytest.raises(ValueError):
        GenConfig(n_sources=0)
    with pytest.raises(ValueError):
        GenConfig(spatial_sigma=0.0)
    with pytest.raises(ValueError):
        GenConfig(source_band=(10.0, 200.0), sample_rate_hz=128.0)
    with pytest.raises(ValueError):
        GenConfig(noise_std=-1.0)
