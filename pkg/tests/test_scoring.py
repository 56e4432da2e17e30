from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shearad import scoring
from shearad.datamodel import BoundingBox
from shearad.errors import ValidationError

heatmaps = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.floats(0, 10))
masks = arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def flood_fill_components(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    """Independent 8-connected labelling by breadth-first search."""
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    h, w = mask.shape
    for y in range(h):
        for x in range(w):
            if not mask[y, x] or seen[y, x]:
                continue
            comp, queue = [], deque([(y, x)])
            seen[y, x] = True
            while queue:
                cy, cx = queue.popleft()
                comp.append((cy, cx))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
            comps.append(comp)
    return comps


def gaussian_kernel_center(sigma: float, radius: int) -> float:
    x = np.arange(-radius, radius + 1)
    k = np.exp(-(x**2) / (2 * sigma**2))
    k /= k.sum()
    return float(k[radius] ** 2)


# ---------------------------------------------------------------- scores


def test_peak_and_mean_examples():
    h = [[0.0, 0.0], [0.0, 1.0]]
    assert scoring.score_peaks(h) == 1.0 and scoring.score_means(h) == 0.25
    assert scoring.score_peaks(np.zeros((3, 3))) == 0.0
    spike = np.zeros((5, 5))
    spike[3, 1] = 7.5
    assert scoring.score_peaks(spike) == 7.5
    assert scoring.score_means(np.full((4, 4), 2.5)) == 2.5
    assert scoring.score_means(np.arange(1, 10, dtype=float).reshape(3, 3)) == 5.0


def test_invalid_heatmaps():
    with pytest.raises(ValidationError):
        scoring.score_peaks(np.zeros((0, 3)))
    with pytest.raises(ValidationError):
        scoring.score_means([[-1.0]])
    with pytest.raises(ValidationError):
        scoring.AnomalyHeatmap(np.array([[np.nan]]))


@given(heatmaps)
def test_mean_never_exceeds_peak(h):
    assert scoring.score_means(h) <= scoring.score_peaks(h) + 1e-12


@given(heatmaps, st.floats(1e-3, 1e3))
def test_scale_covariance(h, c):
    assert scoring.score_peaks(c * h) == pytest.approx(c * scoring.score_peaks(h), rel=1e-12, abs=1e-300)
    assert scoring.score_means(c * h) == pytest.approx(c * scoring.score_means(h), rel=1e-9, abs=1e-300)


# ---------------------------------------------------------------- smoothing


def test_smooth_constant_map():
    np.testing.assert_allclose(scoring.smooth(np.full((20, 30), 3.0), 4.0), 3.0, atol=1e-9)


def test_smooth_impulse_center_and_mass():
    h = np.zeros((41, 41))
    h[20, 20] = 1.0
    s = scoring.smooth(h, 1.0)
    assert s[20, 20] == pytest.approx(0.159, abs=1e-3)
    assert s[20, 20] == pytest.approx(gaussian_kernel_center(1.0, 4), rel=1e-9)
    assert abs(s.sum() - 1.0) < 1e-3


def test_smooth_rejects_bad_sigma():
    with pytest.raises(ValidationError):
        scoring.smooth(np.zeros((3, 3)), 0.0)


# ---------------------------------------------------------------- binarize and regions


def test_binarize_edges():
    h = np.array([[0.2, 0.5], [0.7, 0.9]])
    assert scoring.binarize(h, 0.1).all()
    assert not scoring.binarize(h, 1.0).any()
    np.testing.assert_array_equal(scoring.binarize(h, 0.5), [[False, True], [True, True]])
    with pytest.raises(ValidationError):
        scoring.binarize(h, float("nan"))


def test_regions_examples():
    h = np.zeros((12, 12))
    assert scoring.extract_regions(np.zeros_like(h, bool), h, 0) == []
    h[1:3, 1:3] = 0.4
    h[7:10, 6:9] = 0.5
    h[8, 7] = 0.9
    dets = scoring.extract_regions(h > 0, h, 0)
    assert [d.confidence for d in dets] == [0.9, 0.4]
    assert dets[0].box == BoundingBox(6, 7, 9, 10)


def test_single_blob_box():
    mask = np.zeros((10, 12), bool)
    mask[2:6, 3:8] = True
    (det,) = scoring.extract_regions(mask, mask.astype(float), 0)
    # rows 2..5 and cols 3..7 inclusive, as pixel-edge coordinates
    assert det.box == BoundingBox(3, 2, 8, 6)


def test_min_area_filters_small_components():
    mask = np.zeros((8, 8), bool)
    mask[0, 0] = True
    mask[4:6, 4:6] = True
    assert len(scoring.extract_regions(mask, mask.astype(float), 4)) == 1
    assert len(scoring.extract_regions(mask, mask.astype(float), 0)) == 2


def test_diagonal_pixels_are_connected():
    mask = np.eye(5, dtype=bool)
    assert len(scoring.extract_regions(mask, mask.astype(float), 0)) == 1


@given(masks, st.integers(0, 2**31 - 1))
def test_regions_match_flood_fill(mask, seed):
    h = np.random.default_rng(seed).uniform(0, 1, mask.shape)
    dets = scoring.extract_regions(mask, h, 0)
    comps = flood_fill_components(mask)
    assert len(dets) == len(comps)
    expected = set()
    for comp in comps:
        ys, xs = zip(*comp)
        expected.add((min(xs), min(ys), max(xs) + 1, max(ys) + 1, max(h[y, x] for y, x in comp)))
    assert {(d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max, d.confidence) for d in dets} == expected
    confs = [d.confidence for d in dets]
    assert confs == sorted(confs, reverse=True)


@given(heatmaps, st.floats(0, 10), st.floats(0, 10))
def test_threshold_monotonicity(h, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    m_lo, m_hi = scoring.binarize(h, lo), scoring.binarize(h, hi)
    assert m_hi.sum() <= m_lo.sum()
    assert not np.any(m_hi & ~m_lo)


def test_localize_pipeline():
    h = np.zeros((40, 40))
    h[10:14, 20:24] = 1.0
    dets = scoring.localize(h, 0.2, sigma=1.0, min_area=1)
    assert len(dets) == 1
    b = dets[0].box
    assert b.x_min <= 20 and b.x_max >= 24 and b.y_min <= 10 and b.y_max >= 14


# ---------------------------------------------------------------- strategy compatibility


def test_strategy_compatibility():
    scoring.check_strategy("STFPM", "peaks")
    scoring.check_strategy("AE", "recon")
    with pytest.raises(ValidationError):
        scoring.check_strategy("AE", "peaks")
    with pytest.raises(ValidationError):
        scoring.check_strategy("STFPM", "recon")
    with pytest.raises(ValidationError):
        scoring.check_strategy("STFPM", "median")


def test_default_thresholds_per_subset():
    assert scoring.DEFAULT_THRESHOLDS == {"A": 0.1, "B": 0.001}
    assert scoring.DEFAULT_SIGMA == 4.0 and scoring.DEFAULT_MIN_AREA == 4


def test_peaks_and_means_share_one_inference(monkeypatch):
    import copy

    import torch

    from shearad.models import training
    from shearad.models.stfpm import STFPM, ResNetPyramid, STFPMConfig

    torch.manual_seed(0)
    teacher = ResNetPyramid().eval()
    model = training.TrainedModel("STFPM", STFPMConfig(input_resolution=(64, 128)), STFPM(teacher, copy.deepcopy(teacher)))
    calls = []
    original = model.module.anomaly_map
    monkeypatch.setattr(model.module, "anomaly_map", lambda x: calls.append(len(x)) or original(x))
    imgs = np.random.default_rng(0).uniform(-3, 3, (3, 105, 192)).astype(np.float32)
    out = scoring.score_images(model, imgs, ("peaks", "means"))
    assert sum(calls) == 3
    np.testing.assert_allclose(out["peaks"], out["heatmaps"].reshape(3, -1).max(1))
    np.testing.assert_allclose(out["means"], out["heatmaps"].reshape(3, -1).mean(1))
    # student copied from teacher: a zero heatmap scores 0 under both rules
    assert out["peaks"].max() < 1e-6 and out["means"].max() < 1e-6
    assert scoring.sample_score(model, imgs[0], "peaks") == pytest.approx(out["peaks"][0], abs=1e-9)


def test_search_threshold_picks_best_candidate():
    h = np.zeros((30, 30))
    h[5:10, 5:10] = 1.0
    gt = [[BoundingBox(5, 5, 10, 10)]]
    best, results = scoring.search_threshold([h], gt, [0.001, 0.5, 2.0], sigma=1.0, min_area=0)
    assert results[2.0] == 0.0
    assert results[0.001] < 1.0  # a very low cut inflates the box past IoU 0.5
    assert best == 0.5 and results[0.5] == 1.0


def test_threshold_candidates_span_three_decades():
    maps = [np.full((4, 4), 0.5), np.eye(4) * 2.0]
    cands = scoring.threshold_candidates(maps, 4)
    np.testing.assert_allclose(cands, [2e-3, 2e-2, 2e-1, 2.0])
    assert np.all(scoring.threshold_candidates([np.zeros((3, 3))], 5) == 0)
