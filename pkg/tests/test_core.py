"""Spiking-convolution core tests: accumulation, firing, inhibition,
competition, plasticity, pooling, and checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikecnn.core import (ConvKernel, InhibitionConfig, LayerState,
                           conv_accumulate, count_spikes, depress_map,
                           double_learning_rates, fire_and_inhibit,
                           global_max_potential, homeostasis_gate, infer_image,
                           init_kernel, load_kernel, max_pool, save_kernel,
                           stdp_competition, stdp_update)


def fresh_state(maps_out=3, maps_in=2, out_h=8, out_w=8, in_h=12, in_w=12):
    return LayerState(maps_out, maps_in, out_h, out_w, in_h, in_w)


def brute_force_valid_conv(spikes, weights):
    """Triple-loop valid-mode correlation (test oracle)."""
    m_out, m_in, k, _ = weights.shape
    c, h, w = spikes.shape
    out = np.zeros((m_out, h - k + 1, w - k + 1))
    for m in range(m_out):
        for u in range(h - k + 1):
            for v in range(w - k + 1):
                out[m, u, v] = np.sum(spikes[:, u:u + k, v:v + k] * weights[m])
    return out


class TestConvKernel:
    def test_validates_range(self):
        with pytest.raises(ValueError):
            ConvKernel(np.full((1, 1, 3, 3), 1.5))
        with pytest.raises(ValueError):
            ConvKernel(np.full((1, 1, 3, 3), -0.1))

    def test_validates_rates(self):
        with pytest.raises(ValueError):
            ConvKernel(np.full((1, 1, 3, 3), 0.5), a_plus=0.0)

    def test_init_kernel_within_open_interval(self):
        k = init_kernel(30, 2, 5, np.random.default_rng(0))
        assert k.weights.shape == (30, 2, 5, 5)
        assert 0 < k.weights.min() and k.weights.max() < 1
        assert abs(k.weights.mean() - 0.8) < 0.01


class TestConvAccumulate:
    def test_zero_bin_leaves_potentials(self):
        w = np.full((3, 2, 5, 5), 0.5)
        pot = np.zeros((3, 8, 8))
        out = conv_accumulate(np.zeros((2, 12, 12), dtype=bool), w, pot)
        np.testing.assert_array_equal(out, 0.0)

    def test_vertical_line_alignment(self):
        spikes = np.zeros((1, 5, 5), dtype=bool)
        spikes[0, :, 2] = True
        weights = np.zeros((1, 1, 5, 5))
        weights[0, 0, :, 2] = 1.0
        pot = np.zeros((1, 1, 1))
        conv_accumulate(spikes, weights, pot)
        assert pot[0, 0, 0] == pytest.approx(5.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        spikes = rng.random((2, 10, 10)) < 0.2
        weights = rng.uniform(0, 1, size=(4, 2, 5, 5))
        pot = np.zeros((4, 6, 6))
        conv_accumulate(spikes, weights, pot)
        np.testing.assert_allclose(pot, brute_force_valid_conv(spikes, weights), atol=1e-12)

    def test_additive_over_bins(self):
        rng = np.random.default_rng(2)
        weights = rng.uniform(0, 1, size=(3, 2, 5, 5))
        bins = rng.random((6, 2, 12, 12)) < 0.1
        pot = np.zeros((3, 8, 8))
        for t in range(6):
            conv_accumulate(bins[t], weights, pot)
        total = np.zeros((3, 8, 8))
        conv_accumulate(bins.sum(axis=0).astype(float), weights, total)
        np.testing.assert_allclose(pot, total, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            conv_accumulate(np.zeros((3, 12, 12)), np.zeros((2, 2, 5, 5)),
                            np.zeros((2, 8, 8)))


class TestFireAndInhibit:
    def test_single_neuron_above_threshold(self):
        state = fresh_state()
        pot = np.zeros((3, 8, 8))
        pot[1, 4, 4] = 16.0
        fired = fire_and_inhibit(pot, state, InhibitionConfig(threshold=15.0), 0)
        assert fired.sum() == 1 and fired[1, 4, 4]

    def test_highest_potential_map_wins_location(self):
        state = fresh_state()
        pot = np.zeros((3, 8, 8))
        pot[0, 4, 4] = 15.7
        pot[2, 4, 4] = 16.2
        fired = fire_and_inhibit(pot, state, InhibitionConfig(threshold=15.0), 0)
        assert fired.sum() == 1 and fired[2, 4, 4]
        # the beaten map stays silenced there for the rest of the image
        pot[0, 4, 4] = 99.0
        fired2 = fire_and_inhibit(pot, state, InhibitionConfig(threshold=15.0), 1)
        assert not fired2[0, 4, 4]

    def test_tie_goes_to_lower_map(self):
        state = fresh_state()
        pot = np.zeros((3, 8, 8))
        pot[1, 2, 2] = 16.0
        pot[2, 2, 2] = 16.0
        fired = fire_and_inhibit(pot, state, InhibitionConfig(threshold=15.0), 0)
        assert fired[1, 2, 2] and not fired[2, 2, 2]

    def test_no_refire_within_image(self):
        state = fresh_state()
        pot = np.zeros((3, 8, 8))
        pot[0, 1, 1] = 20.0
        cfg = InhibitionConfig(threshold=15.0)
        assert fire_and_inhibit(pot, state, cfg, 0).sum() == 1
        assert fire_and_inhibit(pot, state, cfg, 1).sum() == 0

    def test_without_lateral_inhibition_all_maps_fire(self):
        state = fresh_state()
        pot = np.zeros((3, 8, 8))
        pot[:, 4, 4] = 16.0
        cfg = InhibitionConfig(threshold=15.0, lateral_inhibition=False)
        fired = fire_and_inhibit(pot, state, cfg, 0)
        assert fired.sum() == 3

    def test_per_location_sparsity_random_images(self):
        rng = np.random.default_rng(3)
        cfg = InhibitionConfig(threshold=15.0)
        kernel = init_kernel(8, 2, 5, rng)
        for _ in range(20):
            dense = rng.random((6, 2, 16, 16)) < 0.25
            spikes, _ = infer_image(dense, kernel, cfg)
            per_location = spikes.sum(axis=(0, 1))
            assert per_location.max(initial=0) <= 1


class TestStdpCompetition:
    def test_single_candidate_wins(self):
        state = fresh_state(maps_out=2, out_h=20, out_w=20)
        fired = np.zeros((2, 20, 20), dtype=bool)
        fired[0, 3, 3] = True
        pot = np.zeros((2, 20, 20))
        pot[0, 3, 3] = 17.0
        assert stdp_competition(fired, pot, state, 5) == [(0, 3, 3)]

    def test_nearby_candidates_suppressed(self):
        # 8 pixels apart: both fit inside one 11x11 window, weaker one loses
        state = fresh_state(maps_out=2, out_h=20, out_w=20)
        fired = np.zeros((2, 20, 20), dtype=bool)
        pot = np.zeros((2, 20, 20))
        fired[0, 5, 5] = True
        pot[0, 5, 5] = 20.0
        fired[1, 5, 13] = True
        pot[1, 5, 13] = 18.0
        assert stdp_competition(fired, pot, state, 5) == [(0, 5, 5)]

    def test_distant_candidates_both_survive(self):
        state = fresh_state(maps_out=2, out_h=20, out_w=20)
        fired = np.zeros((2, 20, 20), dtype=bool)
        pot = np.zeros((2, 20, 20))
        fired[0, 5, 5] = True
        pot[0, 5, 5] = 20.0
        fired[1, 5, 17] = True
        pot[1, 5, 17] = 18.0
        assert stdp_competition(fired, pot, state, 5) == [(0, 5, 5), (1, 5, 17)]

    def test_map_updates_once_per_image(self):
        state = fresh_state(maps_out=1, out_h=30, out_w=30)
        fired = np.zeros((1, 30, 30), dtype=bool)
        pot = np.zeros((1, 30, 30))
        fired[0, 2, 2] = True
        pot[0, 2, 2] = 20.0
        assert stdp_competition(fired, pot, state, 5) == [(0, 2, 2)]
        fired2 = np.zeros((1, 30, 30), dtype=bool)
        pot2 = np.zeros((1, 30, 30))
        fired2[0, 25, 25] = True
        pot2[0, 25, 25] = 30.0
        assert stdp_competition(fired2, pot2, state, 5) == []

    def test_region_lock_persists_across_bins(self):
        state = fresh_state(maps_out=2, out_h=30, out_w=30)
        fired = np.zeros((2, 30, 30), dtype=bool)
        pot = np.zeros((2, 30, 30))
        fired[0, 10, 10] = True
        pot[0, 10, 10] = 20.0
        stdp_competition(fired, pot, state, 5)
        fired2 = np.zeros((2, 30, 30), dtype=bool)
        pot2 = np.zeros((2, 30, 30))
        fired2[1, 12, 12] = True  # inside the locked region from the last bin
        pot2[1, 12, 12] = 40.0
        assert stdp_competition(fired2, pot2, state, 5) == []

    def test_against_brute_force_pairwise_oracle(self):
        rng = np.random.default_rng(4)
        radius = 5
        for _ in range(30):
            maps, h, w = 6, 25, 25
            state = fresh_state(maps_out=maps, out_h=h, out_w=w)
            fired = rng.random((maps, h, w)) < 0.02
            pot = np.where(fired, rng.uniform(15, 30, size=(maps, h, w)), 0.0)
            winners = stdp_competition(fired, pot, state, radius)
            # oracle: all winner pairs must not fit inside one 11x11 window
            for i in range(len(winners)):
                for j in range(i + 1, len(winners)):
                    _, u1, v1 = winners[i]
                    _, u2, v2 = winners[j]
                    assert max(abs(u1 - u2), abs(v1 - v2)) > 2 * radius
            # oracle: one update per map
            maps_won = [m for m, _, _ in winners]
            assert len(maps_won) == len(set(maps_won))


class TestStdpUpdate:
    def test_potentiation_value(self):
        k = ConvKernel(np.full((1, 1, 1, 1), 0.5), a_plus=0.004, a_minus=0.003)
        stdp_update(k, 0, np.ones((1, 1, 1), dtype=bool))
        assert k.weights[0, 0, 0, 0] == pytest.approx(0.501, abs=1e-12)

    def test_depression_value(self):
        k = ConvKernel(np.full((1, 1, 1, 1), 0.5), a_plus=0.004, a_minus=0.003)
        stdp_update(k, 0, np.zeros((1, 1, 1), dtype=bool))
        assert k.weights[0, 0, 0, 0] == pytest.approx(0.5 - 0.003 * 0.25, abs=1e-12)

    def test_fixed_points(self):
        k = ConvKernel(np.array([[[[0.0, 1.0]]]]), a_plus=0.1, a_minus=0.1)
        stdp_update(k, 0, np.ones((1, 1, 2), dtype=bool))
        np.testing.assert_array_equal(k.weights, [[[[0.0, 1.0]]]])
        stdp_update(k, 0, np.zeros((1, 1, 2), dtype=bool))
        np.testing.assert_array_equal(k.weights, [[[[0.0, 1.0]]]])

    def test_only_winner_map_touched(self):
        rng = np.random.default_rng(5)
        k = ConvKernel(rng.uniform(0.2, 0.8, size=(3, 2, 5, 5)))
        before = k.weights.copy()
        stdp_update(k, 1, rng.random((2, 5, 5)) < 0.5)
        np.testing.assert_array_equal(k.weights[0], before[0])
        np.testing.assert_array_equal(k.weights[2], before[2])
        assert not np.array_equal(k.weights[1], before[1])

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_interval_preserved_under_random_sequences(self, seed):
        rng = np.random.default_rng(seed)
        k = ConvKernel(rng.uniform(0, 1, size=(2, 2, 3, 3)),
                       a_plus=rng.uniform(1e-4, 0.15), a_minus=rng.uniform(1e-4, 0.15))
        for _ in range(200):
            if rng.random() < 0.8:
                stdp_update(k, rng.integers(2), rng.random((2, 3, 3)) < 0.5)
            else:
                depress_map(k, rng.integers(2))
        assert k.weights.min() >= 0.0 and k.weights.max() <= 1.0


class TestHomeostasis:
    def test_two_updates_then_penalize(self):
        state = fresh_state()
        assert homeostasis_gate(state, 0) is True
        assert homeostasis_gate(state, 0) is True
        assert homeostasis_gate(state, 0) is False
        assert homeostasis_gate(state, 1) is True  # per-map counters

    def test_window_reset(self):
        state = fresh_state()
        for _ in range(3):
            homeostasis_gate(state, 0)
        assert homeostasis_gate(state, 0) is False
        for _ in range(5):        # advance through images 0..4
            state.begin_image()
            state.images_seen += 1
        state.begin_image()       # image 5 starts a new tumbling window
        assert homeostasis_gate(state, 0) is True


class TestLearningRateDoubling:
    def test_doubles_at_mark(self):
        k = ConvKernel(np.full((1, 1, 1, 1), 0.5), a_plus=0.004, a_minus=0.003)
        double_learning_rates(k, 1000)
        assert k.a_plus == pytest.approx(0.008)
        assert k.a_minus == pytest.approx(0.006)

    def test_no_change_off_mark(self):
        k = ConvKernel(np.full((1, 1, 1, 1), 0.5), a_plus=0.004, a_minus=0.003)
        double_learning_rates(k, 999)
        assert k.a_plus == pytest.approx(0.004)

    def test_cap(self):
        k = ConvKernel(np.full((1, 1, 1, 1), 0.5), a_plus=0.128, a_minus=0.096)
        double_learning_rates(k, 5000)
        assert k.a_plus == pytest.approx(0.128)
        assert k.a_minus == pytest.approx(0.096)


class TestMaxPool:
    def test_empty_block_no_spike(self):
        spikes = np.zeros((3, 1, 4, 4), dtype=bool)
        out = max_pool(spikes, np.zeros((1, 4, 4)))
        assert not out.any()

    def test_highest_potential_passes(self):
        spikes = np.zeros((3, 1, 2, 2), dtype=bool)
        spikes[0, 0, 0, 0] = True   # potential 15.7
        spikes[2, 0, 1, 1] = True   # potential 16.2
        pot = np.zeros((1, 2, 2))
        pot[0, 0, 0] = 15.7
        pot[0, 1, 1] = 16.2
        out = max_pool(spikes, pot)
        assert out.sum() == 1 and out[2, 0, 0, 0]

    def test_odd_dimensions_trimmed(self):
        spikes = np.zeros((2, 30, 23, 23), dtype=bool)
        out = max_pool(spikes, np.zeros((30, 23, 23)))
        assert out.shape == (2, 30, 11, 11)

    def test_keeps_original_bin(self):
        spikes = np.zeros((5, 1, 2, 2), dtype=bool)
        spikes[3, 0, 0, 1] = True
        pot = np.zeros((1, 2, 2))
        pot[0, 0, 1] = 20.0
        out = max_pool(spikes, pot)
        assert out[3, 0, 0, 0]

    def test_pool_lateral_inhibition_one_per_location(self):
        spikes = np.zeros((4, 3, 2, 2), dtype=bool)
        pot = np.zeros((3, 2, 2))
        spikes[1, 0, 0, 0] = True
        pot[0, 0, 0] = 16.0
        spikes[0, 1, 1, 1] = True   # earlier bin wins the pooled location
        pot[1, 1, 1] = 15.5
        spikes[2, 2, 0, 1] = True
        pot[2, 0, 1] = 17.0
        out = max_pool(spikes, pot, pool_lateral_inhibition=True)
        assert out.sum(axis=(0, 1)).max() == 1
        assert out[0, 1, 0, 0]  # bin 0 beats bin 1 and bin 2 at location (0,0)


class TestGlobalMaxPotential:
    def test_zero_input(self):
        k = ConvKernel(np.full((4, 2, 3, 3), 0.5))
        out = global_max_potential(np.zeros((5, 2, 8, 8), dtype=bool), k)
        np.testing.assert_array_equal(out, np.zeros(4))

    def test_vector_length_matches_maps(self):
        rng = np.random.default_rng(6)
        k = ConvKernel(rng.uniform(0, 1, size=(7, 2, 3, 3)))
        out = global_max_potential(rng.random((5, 2, 8, 8)) < 0.2, k)
        assert out.shape == (7,)

    def test_single_bin_equals_spatial_max(self):
        rng = np.random.default_rng(7)
        k = ConvKernel(rng.uniform(0, 1, size=(3, 2, 3, 3)))
        spikes = (rng.random((1, 2, 8, 8)) < 0.3)
        out = global_max_potential(spikes, k)
        pot = np.zeros((3, 6, 6))
        conv_accumulate(spikes[0], k.weights, pot)
        np.testing.assert_allclose(out, pot.max(axis=(1, 2)))

    def test_resets_between_bins(self):
        k = ConvKernel(np.ones((1, 1, 1, 1)))
        spikes = np.zeros((3, 1, 2, 2), dtype=bool)
        spikes[0, 0, 0, 0] = True
        spikes[1, 0, 0, 0] = True
        out = global_max_potential(spikes, k)
        # fresh accumulation per bin: 1 + 1, not 1 + 2
        assert out[0] == pytest.approx(2.0)


class TestCountSpikes:
    def test_empty(self):
        np.testing.assert_array_equal(count_spikes(np.zeros((3, 2, 2, 2), dtype=bool)),
                                      np.zeros(8))

    def test_per_bin_counting(self):
        spikes = np.zeros((10, 1, 3, 3), dtype=bool)
        spikes[:, 0, 1, 2] = True
        counts = count_spikes(spikes)
        assert counts[1 * 3 + 2] == 10
        assert counts.sum() == 10


class TestKernelCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        k = ConvKernel(rng.uniform(0, 1, size=(30, 2, 5, 5)), a_plus=0.016, a_minus=0.012)
        p1 = tmp_path / "k1.skrn"
        save_kernel(p1, k)
        back = load_kernel(p1)
        np.testing.assert_array_equal(back.weights, k.weights)
        assert back.a_plus == k.a_plus and back.a_minus == k.a_minus
        p2 = tmp_path / "k2.skrn"
        save_kernel(p2, back)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.skrn"
        p.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_kernel(p)

    def test_truncated(self, tmp_path):
        rng = np.random.default_rng(9)
        k = ConvKernel(rng.uniform(0, 1, size=(2, 2, 3, 3)))
        p = tmp_path / "k.skrn"
        save_kernel(p, k)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_kernel(p)
