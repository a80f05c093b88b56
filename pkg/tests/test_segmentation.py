import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_frame
from teleimmersion.errors import ModelError, OracleSizeError, ShapeError
from teleimmersion.geometry import RgbdFrame
from teleimmersion.segmentation import (
    BACKGROUND,
    FOREGROUND,
    BackgroundModel,
    LabelField,
    MrfModel,
    PotentialParams,
    brute_force_map,
    build_model,
    energy,
    fit_background,
    lbp_map,
    segment,
    segment_roi,
)


def random_model(rng, h, w, scale=3.0):
    return MrfModel(rng.uniform(0, scale, (h, w, 2)), rng.uniform(0, 2, (h, max(w - 1, 0))),
                    rng.uniform(0, 2, (max(h - 1, 0), w)))


def loop_energy(model, labels):
    """Independent per-pixel, per-edge summation."""
    lab = np.asarray(labels)
    h, w = lab.shape
    e = 0.0
    for i in range(h):
        for j in range(w):
            e += model.unary[i, j, lab[i, j]]
            if j + 1 < w and lab[i, j] != lab[i, j + 1]:
                e += model.h_weight[i, j]
            if i + 1 < h and lab[i, j] != lab[i + 1, j]:
                e += model.v_weight[i, j]
    return e


# -- background model ----------------------------------------------------------


def test_single_constant_frame_background():
    bg = fit_background([small_frame(np.full((3, 4), 2000))])
    assert np.all(bg.mean_depth == 2000) and np.all(bg.depth_sigma == 5.0)


def test_background_mean_of_two_observations():
    bg = fit_background([small_frame(np.full((2, 2), d)) for d in (1990, 2010)])
    assert np.all(bg.mean_depth == 2000)


def test_background_sigma_recovers_noise():
    rng = np.random.default_rng(7)
    frames = [small_frame(np.rint(2000 + rng.normal(0, 10, (40, 40)))) for _ in range(10)]
    bg = fit_background(frames)
    assert abs(np.median(bg.depth_sigma) - 10.0) < 3.0


def test_background_ignores_holes_and_needs_frames():
    a = np.full((2, 2), 1000)
    b = a.copy()
    b[0, 0] = 0
    bg = fit_background([small_frame(a), small_frame(b)])
    assert bg.mean_depth[0, 0] == 1000
    with pytest.raises(ModelError):
        fit_background([])


def test_background_model_save_load(tmp_path):
    bg = BackgroundModel(np.full((2, 3), 1500.0), np.full((2, 3), 7.0))
    bg.save(tmp_path / "bg.npz")
    back = BackgroundModel.load(tmp_path / "bg.npz")
    assert np.array_equal(back.mean_depth, bg.mean_depth) and np.array_equal(back.depth_sigma, bg.depth_sigma)


# -- potentials ----------------------------------------------------------------


def test_pixel_at_background_mean_has_zero_background_cost():
    f = small_frame(np.full((3, 3), 2000))
    m = build_model(f, fit_background([f]))
    assert np.all(m.unary[..., BACKGROUND] == 0)
    assert np.allclose(m.h_weight, PotentialParams().w_p) and np.allclose(m.v_weight, PotentialParams().w_p)


def test_near_bump_favours_foreground_with_hand_costs():
    p = PotentialParams()
    bg = fit_background([small_frame(np.full((3, 3), 2000))])
    depth = np.full((3, 3), 2000)
    depth[1, 1] = 1500
    m = build_model(small_frame(depth), bg, p)
    # residual 500/5 clipped at tau
    assert m.unary[1, 1, BACKGROUND] == pytest.approx(p.lambda_d * p.tau_d)
    assert m.unary[1, 1, FOREGROUND] == pytest.approx(0.0)
    assert m.h_weight[1, 0] == pytest.approx(p.w_p * np.exp(-500 / p.sigma_depth))
    assert lbp_map(m).labels[1, 1] == FOREGROUND


def test_hole_pixel_uses_colour_matched_neighbours():
    bg = fit_background([small_frame(np.full((5, 5), 2000))])
    depth = np.full((5, 5), 2000)
    depth[2, 2] = 0
    m = build_model(small_frame(depth), bg)
    assert np.isfinite(m.unary).all()
    assert m.unary[2, 2, BACKGROUND] <= m.unary[2, 2, FOREGROUND]


def test_shape_mismatch_rejected():
    bg = BackgroundModel(np.full((2, 2), 1.0), np.ones((2, 2)))
    with pytest.raises(ShapeError):
        build_model(small_frame(np.ones((3, 3))), bg)


def test_negative_cost_rejected():
    with pytest.raises(ModelError):
        MrfModel.uniform(-np.ones((2, 2, 2)), 1.0)


# -- energy and inference ------------------------------------------------------


def test_energy_examples():
    m = MrfModel.uniform(np.zeros((2, 3, 2)), 0.0)
    assert energy(m, np.zeros((2, 3), np.uint8)) == 0.0
    m = MrfModel(np.zeros((1, 3, 2)), np.array([[0.7, 1.3]]), np.zeros((0, 3)))
    assert energy(m, np.array([[0, 0, 1]], np.uint8)) == pytest.approx(1.3)


@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 5))
def test_energy_matches_loop_oracle(seed, h, w):
    rng = np.random.default_rng(seed)
    m = random_model(rng, h, w)
    lab = rng.integers(0, 2, (h, w)).astype(np.uint8)
    assert energy(m, LabelField(lab)) == pytest.approx(loop_energy(m, lab), abs=1e-9)


def test_zero_pairwise_is_unary_argmin(rng):
    u = rng.uniform(0, 3, (6, 7, 2))
    labels = lbp_map(MrfModel.uniform(u, 0.0)).labels
    assert np.array_equal(labels, (u[..., 1] < u[..., 0]).astype(np.uint8))


def test_ties_go_to_background():
    m = MrfModel.uniform(np.zeros((3, 3, 2)), 1.0)
    assert not lbp_map(m).labels.any()
    assert not brute_force_map(m).labels.any()


def test_brute_force_single_pixel_and_exhaustive_check(rng):
    m = MrfModel(np.array([[[2.0, 1.0]]]), np.zeros((1, 0)), np.zeros((0, 1)))
    assert brute_force_map(m).labels[0, 0] == FOREGROUND
    m = random_model(rng, 3, 3)
    best = energy(m, brute_force_map(m))
    for bits in itertools.product((0, 1), repeat=9):
        assert best <= energy(m, np.array(bits, np.uint8).reshape(3, 3)) + 1e-12


def test_brute_force_refuses_large_models():
    with pytest.raises(OracleSizeError):
        brute_force_map(MrfModel.uniform(np.zeros((5, 5, 2)), 1.0))


@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.booleans())
def test_lbp_exact_on_chains(seed, n, vertical):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n, 1) if vertical else random_model(rng, 1, n)
    assert energy(m, lbp_map(m, 30)) == pytest.approx(energy(m, brute_force_map(m)), abs=1e-9)


def test_lbp_within_five_percent_on_3x3(rng):
    for _ in range(20):
        m = random_model(rng, 3, 3)
        assert energy(m, lbp_map(m, 30)) <= 1.05 * energy(m, brute_force_map(m)) + 1e-12


def test_lbp_output_shape_and_invalid_iterations(rng):
    m = random_model(rng, 4, 9)
    assert lbp_map(m).shape == (4, 9)
    with pytest.raises(ValueError):
        lbp_map(m, 0)


def test_lbp_invariant_to_constant_unary_shift(rng):
    # adding a per-pixel constant to both labels only shifts messages
    m = random_model(rng, 4, 4)
    shifted = MrfModel(m.unary + rng.uniform(0, 5, (4, 4, 1)), m.h_weight, m.v_weight)
    assert lbp_map(m, 30) == lbp_map(shifted, 30)


def test_segment_roi_matches_full_segmentation_inside_roi():
    from teleimmersion.sim.scene import SyntheticScene, render_background, render_synthetic

    scene = SyntheticScene()
    bg = fit_background(render_background(scene, 3))
    frame, truth = render_synthetic(scene, 0)
    full, _ = segment(frame, bg)
    ys, xs = np.nonzero(truth.head_mask)
    roi = (int(xs.min()) - 10, int(ys.min()) - 10, int(np.ptp(xs)) + 21, int(np.ptp(ys)) + 21)
    part = segment_roi(frame, bg, roi)
    x, y, w, h = roi
    assert not part.labels[:, :x].any() and not part.labels[:y].any()
    inner = (slice(y + 3, y + h - 3), slice(x + 3, x + w - 3))
    agree = (part.labels[inner] == full.labels[inner]).mean()
    assert agree > 0.99
    # the head is recovered
    hit = part.labels[truth.head_mask.astype(bool)].mean()
    assert hit > 0.95
    with pytest.raises(ShapeError):
        segment_roi(frame, bg, (500, 0, 20, 20))
