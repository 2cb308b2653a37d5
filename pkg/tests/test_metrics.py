"""Loss and score verification against closed forms and in-test oracles."""

import math

import numpy as np
import pytest

from freqnet import autodiff as ad
from freqnet import metrics as mt
from freqnet.dct import FreqMaps, inverse_dct_block
from freqnet.errors import InvalidInputError
from freqnet.selfcheck import finite_difference_grad, relative_grad_error

RING_TABLE = {
    "3": 1.0, "4-3": 1.0, "5-4": 5.0, "6-5": 10.0,
    "7-6": 10.0, "8-7": 5.0, "9-8": 1.0, "10-9": 1.0,
}


def betas_by_enumeration(r=10):
    """Independent per-channel weight construction straight from the ring rule."""
    betas = np.zeros(r * r)
    for u in range(r):
        for v in range(r):
            k = max(u, v) + 1
            label = "3" if k <= 3 else f"{k}-{k - 1}"
            betas[u * r + v] = RING_TABLE[label]
    return betas


def make_maps(data, normalized=True):
    return FreqMaps(data=np.asarray(data, dtype=np.float64), r=10,
                    normalized=normalized)


class TestRings:
    def test_labels(self):
        assert mt.annulus_label(0, 0) == "3"
        assert mt.annulus_label(2, 2) == "3"
        assert mt.annulus_label(0, 3) == "4-3"
        assert mt.annulus_label(5, 2) == "6-5"
        assert mt.annulus_label(9, 9) == "10-9"
        with pytest.raises(InvalidInputError):
            mt.annulus_label(-1, 0)

    def test_ring_cardinalities_partition_the_region(self):
        # Core is 3x3 = 9; ring k contributes k^2 - (k-1)^2 = 2k - 1.
        want = {"3": 9, "4-3": 7, "5-4": 9, "6-5": 11, "7-6": 13,
                "8-7": 15, "9-8": 17, "10-9": 19}
        seen = set()
        for label, n in want.items():
            chans = mt.annulus_channels(label, 10)
            assert len(chans) == n, label
            assert not (seen & set(chans))
            seen.update(chans)
        assert seen == set(range(100))

    def test_empty_ring_rejected(self):
        with pytest.raises(InvalidInputError):
            mt.annulus_channels("10-9", 3)

    def test_reference_weights_match_enumeration(self):
        prof = mt.table1_weights()
        assert prof.profile_id == "table1"
        assert np.array_equal(prof.betas, betas_by_enumeration())
        assert prof.betas.sum() == 412.0
        assert prof.r == 10
        # Spot values.
        assert prof.betas[0] == 1.0          # (0, 0) core
        assert prof.betas[5 * 10 + 2] == 10.0  # (5, 2) ring 6-5
        assert prof.betas[99] == 1.0         # (9, 9) outermost

    def test_reference_weights_need_r10(self):
        with pytest.raises(InvalidInputError):
            mt.table1_weights(r=8)

    def test_table_must_cover_region(self):
        partial = dict(RING_TABLE)
        del partial["10-9"]
        with pytest.raises(InvalidInputError):
            mt.weights_from_annulus_table(partial, 10)

    def test_small_region_table(self):
        prof = mt.weights_from_annulus_table({"3": 2.0}, 3)
        assert np.array_equal(prof.betas, np.full(9, 2.0))

    def test_profile_validation(self):
        with pytest.raises(InvalidInputError):
            mt.WeightProfile(betas=np.array([-1.0, 1.0]))
        with pytest.raises(InvalidInputError):
            mt.WeightProfile(betas=np.ones(7)).r


class TestCharbonnier:
    def test_floor_and_values(self):
        p = mt.CharbonnierParams(epsilon=1e-3)
        assert mt.charbonnier(5.0, 5.0, p) == 1e-3
        assert mt.charbonnier(3.0, 1.0, p) == math.sqrt(4.0 + 1e-6)
        assert mt.charbonnier(1.0, 3.0, p) == mt.charbonnier(3.0, 1.0, p)

    def test_epsilon_must_be_positive(self):
        with pytest.raises(InvalidInputError):
            mt.CharbonnierParams(epsilon=0.0)


class TestFreqLoss:
    def test_identical_maps_hit_the_floor(self):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(100, 3, 4))
        a, b = make_maps(data), make_maps(data.copy())
        loss = mt.freq_loss(a, b, mt.table1_weights(), mt.CharbonnierParams())
        # Every cell contributes beta_c * eps; the mean is eps * sum(beta) / r^2.
        assert loss == pytest.approx(1e-3 * 412.0 / 100.0, rel=1e-12)
        assert loss == pytest.approx(4.12e-3, rel=1e-12)

    def test_single_channel_delta_closed_form(self):
        rng = np.random.default_rng(1)
        base = rng.normal(size=(100, 2, 3))
        delta, chan, eps = 0.5, 42, 1e-3
        perturbed = base.copy()
        perturbed[chan] += delta
        prof = mt.table1_weights()
        loss = mt.freq_loss(make_maps(perturbed), make_maps(base), prof,
                            mt.CharbonnierParams(eps))
        beta_c = prof.betas[chan]
        want = (beta_c * math.sqrt(delta ** 2 + eps ** 2)
                + (412.0 - beta_c) * eps) / 100.0
        assert loss == pytest.approx(want, rel=1e-12)

    def test_symmetry_and_floor_equality_condition(self):
        rng = np.random.default_rng(2)
        a = make_maps(rng.normal(size=(100, 2, 2)))
        b = make_maps(rng.normal(size=(100, 2, 2)))
        prof = mt.table1_weights()
        p = mt.CharbonnierParams()
        assert mt.freq_loss(a, b, prof, p) == mt.freq_loss(b, a, prof, p)
        assert mt.freq_loss(a, b, prof, p) > 4.12e-3

    def test_requires_normalized_maps(self):
        data = np.zeros((100, 2, 2))
        with pytest.raises(InvalidInputError):
            mt.freq_loss(make_maps(data, normalized=False), make_maps(data),
                         mt.table1_weights(), mt.CharbonnierParams())

    def test_shape_and_profile_mismatches(self):
        prof = mt.table1_weights()
        p = mt.CharbonnierParams()
        with pytest.raises(InvalidInputError):
            mt.freq_loss(make_maps(np.zeros((100, 2, 2))),
                         make_maps(np.zeros((100, 3, 2))), prof, p)
        small = mt.weights_from_annulus_table({"3": 1.0}, 3)
        with pytest.raises(InvalidInputError):
            mt.freq_loss(make_maps(np.zeros((100, 2, 2))),
                         make_maps(np.zeros((100, 2, 2))), small, p)

    def test_graph_twin_matches_numpy(self):
        rng = np.random.default_rng(3)
        sr = rng.normal(size=(100, 3, 3))
        hr = rng.normal(size=(100, 3, 3))
        prof = mt.table1_weights()
        want = mt.freq_loss(make_maps(sr), make_maps(hr), prof,
                            mt.CharbonnierParams())
        got = mt.freq_loss_graph(sr[None], hr[None], prof.betas, 1e-3)
        assert abs(float(got.data) - want) < 1e-15

    def test_graph_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        sr = rng.normal(size=(1, 100, 2, 2))
        hr = rng.normal(size=(1, 100, 2, 2))
        betas = mt.table1_weights().betas

        def run(a):
            return float(mt.freq_loss_graph(a, hr, betas, 1e-3).data)

        t = ad.Tensor(sr, requires_grad=True)
        ad.backward(mt.freq_loss_graph(t, hr, betas, 1e-3))
        # The Charbonnier curvature scale is epsilon, so the step must sit
        # well below 1e-3.
        fd = finite_difference_grad(run, [sr], h=1e-6)
        assert relative_grad_error(t.grad, fd[0]) < 1e-4

    def test_graph_rejects_bad_rank_and_epsilon(self):
        with pytest.raises(InvalidInputError):
            mt.freq_loss_graph(np.zeros((100, 2, 2)), np.zeros((100, 2, 2)),
                               np.ones(100), 1e-3)
        with pytest.raises(InvalidInputError):
            mt.freq_loss_graph(np.zeros((1, 100, 2, 2)), np.zeros((1, 100, 2, 2)),
                               np.ones(100), 0.0)


class TestScores:
    def test_frm_of_the_floor(self):
        assert mt.frm(4.12e-3) == pytest.approx(-10.0 * math.log10(4.12e-3))
        assert mt.frm(4.12e-3) == pytest.approx(23.851, abs=5e-4)

    def test_frm_is_monotone_decreasing(self):
        assert mt.frm(1e-4) > mt.frm(1e-3) > mt.frm(1e-2)

    def test_frm_rejects_non_positive(self):
        for bad in (0.0, -1.0, math.inf, math.nan):
            with pytest.raises(InvalidInputError):
                mt.frm(bad)

    def test_psnr_identical_is_infinite(self):
        img = np.full((8, 8, 3), 77, dtype=np.uint8)
        assert mt.psnr_y(img, img) == math.inf

    def test_psnr_unit_luma_error(self):
        a = np.full((16, 16), 100, dtype=np.uint8)
        b = np.full((16, 16), 101, dtype=np.uint8)
        assert mt.psnr_y(a, b) == pytest.approx(20.0 * math.log10(255.0))

    def test_psnr_ignores_chroma(self):
        # Perturb along (0.587, -0.299, 0), which is orthogonal to the luma
        # row; only float rounding noise can leak through (> 300 dB).
        rng = np.random.default_rng(5)
        a = rng.uniform(40, 200, size=(6, 6, 3))
        shift = rng.normal(size=(6, 6, 1)) * np.array([0.587, -0.299, 0.0])
        assert mt.psnr_y(a, a + shift) > 300.0
        # An equal-size luma shift is loud by comparison.
        assert mt.psnr_y(a, a + 1.0) < 50.0

    def test_psnr_dim_mismatch(self):
        with pytest.raises(InvalidInputError):
            mt.psnr_y(np.zeros((4, 4)), np.zeros((4, 5)))


class TestResidualProfile:
    def test_identical_grids_give_zero(self):
        rng = np.random.default_rng(6)
        grid = rng.normal(size=(2, 2, 32, 32))
        out = mt.region_residual_profile([(grid, grid.copy())])
        assert not np.any(out["res"])
        assert not np.any(out["v"])
        assert out["samples"] == 1

    def test_dc_only_difference_lands_in_first_step(self):
        # A DC-coefficient delta appears in every truncation, so res is flat
        # and only v_1 is nonzero; its value is delta / M exactly.
        m, delta = 32, 8.0
        hr = np.zeros((1, 1, m, m))
        lr = np.zeros((1, 1, m, m))
        hr[0, 0, 0, 0] = delta
        out = mt.region_residual_profile([(hr, lr)])
        assert np.allclose(out["res"], delta / m)
        assert out["v"][0] == pytest.approx(delta / m)
        assert np.max(np.abs(out["v"][1:])) < 1e-12

    def test_corner_coefficient_lands_in_last_step(self):
        # (9, 9) only enters the r = 10 truncation; the expected magnitude
        # comes from an explicit inverse-transform oracle.
        m, delta = 32, 4.0
        hr = np.zeros((1, 1, m, m))
        hr[0, 0, 9, 9] = delta
        lr = np.zeros((1, 1, m, m))
        out = mt.region_residual_profile([(hr, lr)])
        coeff = np.zeros((m, m))
        coeff[9, 9] = delta
        want = float(np.mean(np.abs(inverse_dct_block(coeff))))
        assert np.max(np.abs(out["res"][:7])) < 1e-15
        assert out["res"][7] == pytest.approx(want, rel=1e-12)
        assert out["v"][7] == pytest.approx(want, rel=1e-12)

    def test_multiple_pairs_average(self):
        m = 16
        hr = np.zeros((1, 1, m, m))
        hr[0, 0, 0, 0] = 4.0
        zero = np.zeros((1, 1, m, m))
        one = mt.region_residual_profile([(hr, zero)])
        two = mt.region_residual_profile([(hr, zero), (zero, zero)])
        assert two["samples"] == 2
        assert np.allclose(two["res"], one["res"] / 2.0)

    def test_error_cases(self):
        with pytest.raises(InvalidInputError):
            mt.region_residual_profile([])
        with pytest.raises(InvalidInputError):
            mt.region_residual_profile(
                [(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)))]
            )
        with pytest.raises(InvalidInputError):
            mt.region_residual_profile(
                [(np.zeros((1, 1, 16, 16)), np.zeros((1, 2, 16, 16)))]
            )
