import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffcount.locmap import test_time_normalize as apply_ttn
from diffcount.locmap import (
    CountMetrics,
    ExemplarBox,
    PointSet,
    count_metrics,
    detect_peaks,
    export_png16,
    import_png16,
    match_points,
    perturb_boxes,
    render_gt_map,
)

# ---------------------------------------------------------------------------
# independent oracles


def brute_force_peaks(values: np.ndarray, tau: float):
    """Exhaustive O(HW*9) reference with the same plateau rule, as plain loops."""
    from numba import njit

    @njit(cache=True)
    def _candidates(v, tau):
        h, w = v.shape
        cand = np.zeros((h, w), dtype=np.uint8)
        for r in range(h):
            for c in range(w):
                if v[r, c] <= tau:
                    continue
                ok = True
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        if dr == 0 and dc == 0:
                            continue
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < h and 0 <= cc < w and v[r, c] < v[rr, cc]:
                            ok = False
                if ok:
                    cand[r, c] = 1
        return cand

    cand = _candidates(values.astype(np.float64), tau)
    h, w = values.shape
    seen = np.zeros((h, w), dtype=bool)
    peaks = []
    for r in range(h):
        for c in range(w):
            if not cand[r, c] or seen[r, c]:
                continue
            # flood fill the equal-valued plateau, track its smallest cell
            stack, best = [(r, c)], (r, c)
            seen[r, c] = True
            while stack:
                rr, cc = stack.pop()
                if (rr, cc) < best:
                    best = (rr, cc)
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        r2, c2 = rr + dr, cc + dc
                        if (
                            0 <= r2 < h
                            and 0 <= c2 < w
                            and cand[r2, c2]
                            and not seen[r2, c2]
                            and values[r2, c2] == values[rr, cc]
                        ):
                            seen[r2, c2] = True
                            stack.append((r2, c2))
            peaks.append(best)
    return sorted(peaks)


def brute_force_match(pred_pts, gt_pts, gt_boxes):
    """Greedy matching by re-scanning for the global minimum each round."""
    pred_free = set(range(len(pred_pts)))
    gt_free = set(range(len(gt_pts)))
    tp, dists = 0, []
    while pred_free and gt_free:
        best = None
        for i in pred_free:
            for j in gt_free:
                d = math.dist(pred_pts[i], gt_pts[j])
                if best is None or d < best[0]:
                    best = (d, i, j)
        d, i, j = best
        pred_free.remove(i)
        gt_free.remove(j)
        x, y = pred_pts[i]
        b = gt_boxes[j]
        if b.x_min <= x <= b.x_max and b.y_min <= y <= b.y_max:
            tp += 1
            dists.append(d)
    return tp, len(pred_pts) - tp, len(gt_pts) - tp


# ---------------------------------------------------------------------------


class TestRenderGtMap:
    def test_empty(self):
        m = render_gt_map(PointSet(np.empty((0, 2))), 32, 32, 0.5)
        assert m.shape == (32, 32) and not m.any()

    def test_single_point_values(self):
        m = render_gt_map(PointSet([[10.0, 10.0]]), 32, 32, 0.5)
        assert m[10, 10] == 1.0
        assert m[10, 11] == pytest.approx(math.exp(-2.0), rel=1e-12)
        assert m[11, 11] == pytest.approx(math.exp(-4.0), rel=1e-12)

    def test_sigma_zero_impulse(self):
        m = render_gt_map(PointSet([[5.4, 7.6]]), 16, 16, 0.0)
        assert m[8, 5] == 1.0
        assert m.sum() == 1.0

    @pytest.mark.parametrize("sigma", [0.0, 0.25, 0.5, 1.0, 1.5])
    def test_ablation_sigmas_accepted(self, sigma):
        m = render_gt_map(PointSet([[8.0, 8.0]]), 16, 16, sigma)
        assert m[8, 8] == 1.0

    def test_overlap_combined_by_max(self):
        m = render_gt_map(PointSet([[8.0, 8.0], [9.0, 8.0]]), 16, 16, 1.5)
        # midpoint value keeps the larger single-kernel contribution
        expected = math.exp(-0.25 / (2 * 1.5**2))
        assert m[8, 8] == 1.0 and m[8, 9] == 1.0
        assert m[9, 8] == pytest.approx(math.exp(-1 / (2 * 1.5**2)), rel=1e-9)
        assert m[8, 10] == pytest.approx(math.exp(-1 / (2 * 1.5**2)), rel=1e-9)
        del expected

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError):
            render_gt_map(PointSet([[40.0, 4.0]]), 16, 16, 0.5)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            render_gt_map(PointSet([[4.0, 4.0]]), 16, 16, -1.0)


class TestDetectPeaks:
    def test_all_zero(self):
        assert len(detect_peaks(np.zeros((16, 16)), 0.1)) == 0

    def test_five_clean_points_recovered(self):
        pts = np.array([[3, 3], [10, 3], [3, 10], [10, 10], [7, 7]], dtype=float)
        m = render_gt_map(PointSet(pts), 16, 16, 0.5)
        found = detect_peaks(m, 0.1)
        assert sorted(map(tuple, found.points)) == sorted(map(tuple, pts))

    def test_plateau_collapsed_to_smallest(self):
        m = np.zeros((8, 8))
        m[3:5, 3:5] = 0.7
        found = detect_peaks(m, 0.1)
        assert [tuple(p) for p in found.points] == [(3.0, 3.0)]

    def test_border_peak(self):
        m = np.zeros((8, 8))
        m[0, 0] = 0.5
        assert [tuple(p) for p in detect_peaks(m, 0.1).points] == [(0.0, 0.0)]

    def test_threshold_strict(self):
        m = np.zeros((8, 8))
        m[4, 4] = 0.1
        assert len(detect_peaks(m, 0.1)) == 0
        m[4, 4] = 0.1000001
        assert len(detect_peaks(m, 0.1)) == 1

    def test_nonfinite_rejected(self):
        m = np.zeros((4, 4))
        m[1, 1] = np.nan
        with pytest.raises(ValueError):
            detect_peaks(m, 0.1)

    @pytest.mark.parametrize("quantize", [False, True])
    def test_matches_brute_force(self, quantize):
        rng = np.random.default_rng(42 if quantize else 43)
        for _ in range(60):
            m = rng.random((24, 24))
            if quantize:
                m = np.round(m, 1)  # plateau-rich
            got = sorted((int(y), int(x)) for x, y in detect_peaks(m, 0.3).points)
            assert got == brute_force_peaks(m, 0.3)

    def test_constant_shift_below_threshold_no_spurious(self):
        pts = np.array([[5, 5], [12, 12]], dtype=float)
        m = render_gt_map(PointSet(pts), 20, 20, 0.5)
        shifted = m + 0.05  # still below tau for background
        assert len(detect_peaks(shifted, 0.1)) >= len(pts)
        got = detect_peaks(shifted, 0.1 + 0.05)
        assert sorted(map(tuple, got.points)) == sorted(map(tuple, pts))

    def test_hflip_equivariance(self):
        rng = np.random.default_rng(7)
        m = rng.random((16, 16))
        fwd = {(int(x), int(y)) for x, y in detect_peaks(m, 0.4).points}
        flipped = {(15 - int(x), int(y)) for x, y in detect_peaks(m[:, ::-1], 0.4).points}
        assert fwd == flipped


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 12),
    seed=st.integers(0, 10_000),
    sigma=st.sampled_from([0.0, 0.25, 0.5]),
)
def test_detect_of_render_identity(n, seed, sigma):
    # integer points with pairwise separation >= 2 px are recovered exactly
    rng = np.random.default_rng(seed)
    pts = []
    while len(pts) < n:
        cand = rng.integers(0, 32, size=2)
        if all(max(abs(cand[0] - p[0]), abs(cand[1] - p[1])) >= 2 for p in pts):
            pts.append(tuple(cand))
        else:
            n -= 1  # crowded draw; accept fewer points
    pts = np.array(sorted(pts), dtype=float)
    m = render_gt_map(PointSet(pts), 32, 32, sigma)
    found = detect_peaks(m, 0.1)
    assert sorted(map(tuple, found.points)) == sorted(map(tuple, pts))


class TestTestTimeNormalize:
    def _boxes(self):
        return [
            ExemplarBox(0, 0, 10, 10),
            ExemplarBox(20, 0, 30, 10),
            ExemplarBox(0, 20, 10, 30),
        ]

    def test_one_per_box_unchanged(self):
        det = PointSet([[5, 5], [25, 5], [5, 25], [50, 50]])
        assert apply_ttn(4, det, self._boxes()) == 4

    def test_two_per_box_halves(self):
        pts = [[4, 4], [6, 6], [24, 4], [26, 6], [4, 24], [6, 26]]
        pts += [[40 + i, 40 + i] for i in range(34)]
        det = PointSet(pts)
        assert apply_ttn(40, det, self._boxes()) == 20

    def test_none_inside_unchanged(self):
        det = PointSet([[50, 50], [60, 60]])
        assert apply_ttn(2, det, self._boxes()) == 2

    def test_empty_exemplars_identity(self):
        det = PointSet([[5, 5]])
        assert apply_ttn(1, det, []) == 1

    def test_strict_interior(self):
        # detections on the box edge do not count
        det = PointSet([[0, 0], [10, 10], [5, 5]])
        boxes = [ExemplarBox(0, 0, 10, 10)]
        assert apply_ttn(3, det, boxes) == 3

    def test_never_increases(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pts = rng.uniform(0, 64, size=(rng.integers(1, 30), 2))
            det = PointSet(pts)
            boxes = [ExemplarBox(10, 10, 30, 30)]
            assert apply_ttn(len(det), det, boxes) <= len(det)

    def test_mismatched_raw_count(self):
        with pytest.raises(ValueError):
            apply_ttn(3, PointSet([[1, 1]]), [])

    def test_round_half_away_from_zero(self):
        # r = 2, raw 5 -> 2.5 rounds to 3
        det = PointSet([[4, 4], [6, 6], [50, 50], [60, 60], [70, 70]])
        boxes = [ExemplarBox(0, 0, 10, 10)]
        assert apply_ttn(5, det, boxes) == 3


class TestCountMetrics:
    def test_perfect(self):
        m = count_metrics([3, 7, 1], [3, 7, 1])
        assert m.mae == 0.0 and m.rmse == 0.0 and m.n_images == 3

    def test_hand_case(self):
        m = count_metrics([3, 5], [1, 5])
        assert m.mae == 1.0
        assert m.rmse == pytest.approx(math.sqrt(2.0), rel=1e-12)

    def test_symmetry_single(self):
        m = count_metrics([0], [4])
        assert m.mae == 4.0 and m.rmse == 4.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            count_metrics([], [])

    def test_rmse_ge_mae_and_permutation_invariance(self):
        rng = np.random.default_rng(1)
        preds = rng.integers(0, 50, size=20)
        gts = rng.integers(0, 50, size=20)
        m = count_metrics(preds, gts)
        assert m.rmse >= m.mae >= 0
        perm = rng.permutation(20)
        m2 = count_metrics(preds[perm], gts[perm])
        assert m2.mae == pytest.approx(m.mae) and m2.rmse == pytest.approx(m.rmse)


class TestMatchPoints:
    def test_exact_match(self):
        pts = PointSet([[3, 3], [10, 10]])
        boxes = [ExemplarBox(2, 2, 4, 4), ExemplarBox(9, 9, 11, 11)]
        r = match_points(pts, pts, boxes)
        assert (r.tp, r.fp, r.fn) == (2, 0, 0)
        assert r.precision == r.recall == r.f1 == 1.0
        assert r.mean_tp_distance == 0.0

    def test_one_to_one(self):
        preds = PointSet([[5, 5], [5.4, 5.0]])
        gts = PointSet([[5, 5]])
        boxes = [ExemplarBox(4, 4, 6, 6)]
        r = match_points(preds, gts, boxes)
        assert (r.tp, r.fp, r.fn) == (1, 1, 0)

    def test_matched_but_outside_box_is_fp_and_fn(self):
        preds = PointSet([[20, 20]])
        gts = PointSet([[5, 5]])
        boxes = [ExemplarBox(4, 4, 6, 6)]
        r = match_points(preds, gts, boxes)
        assert (r.tp, r.fp, r.fn) == (0, 1, 1)

    def test_counts_add_up(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            preds = PointSet(rng.uniform(0, 64, size=(rng.integers(0, 15), 2)))
            gts_pts = rng.uniform(4, 60, size=(rng.integers(0, 15), 2))
            gts = PointSet(gts_pts)
            boxes = [ExemplarBox(x - 3, y - 3, x + 3, y + 3) for x, y in gts_pts]
            r = match_points(preds, gts, boxes)
            assert r.tp + r.fp == len(preds)
            assert r.tp + r.fn == len(gts)

    def test_against_oracle_50_scenes(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            n_p, n_g = rng.integers(0, 20), rng.integers(0, 20)
            preds = rng.uniform(0, 64, size=(n_p, 2))
            gts = rng.uniform(4, 60, size=(n_g, 2))
            boxes = [
                ExemplarBox(x - rng.uniform(1, 5), y - rng.uniform(1, 5),
                            x + rng.uniform(1, 5), y + rng.uniform(1, 5))
                for x, y in gts
            ]
            r = match_points(PointSet(preds), PointSet(gts), boxes)
            assert (r.tp, r.fp, r.fn) == brute_force_match(preds, gts, boxes)

    def test_box_count_mismatch(self):
        with pytest.raises(ValueError):
            match_points(PointSet([[1, 1]]), PointSet([[1, 1]]), [])


class TestPerturbBoxes:
    def test_scale_zero_identity(self):
        boxes = [ExemplarBox(4, 4, 10, 12)]
        out = perturb_boxes(boxes, 0.0, np.random.default_rng(0), 64, 64)
        assert out[0] == boxes[0]

    def test_deterministic_given_seed(self):
        boxes = [ExemplarBox(4, 4, 10, 12), ExemplarBox(20, 20, 30, 24)]
        a = perturb_boxes(boxes, 0.05, np.random.default_rng(5), 64, 64)
        b = perturb_boxes(boxes, 0.05, np.random.default_rng(5), 64, 64)
        assert a == b

    def test_displacement_bound_10k(self):
        box = ExemplarBox(20, 20, 40, 50)  # w=20, h=30
        rng = np.random.default_rng(77)
        for _ in range(10_000):
            (p,) = perturb_boxes([box], 0.05, rng, 128, 128)
            assert abs(p.x_min - 20) <= 0.05 * 20 + 1e-12
            assert abs(p.x_max - 40) <= 0.05 * 20 + 1e-12
            assert abs(p.y_min - 20) <= 0.05 * 30 + 1e-12
            assert abs(p.y_max - 50) <= 0.05 * 30 + 1e-12
            assert p.x_max > p.x_min and p.y_max > p.y_min

    def test_clamped_to_bounds(self):
        box = ExemplarBox(0.5, 0.5, 63.5, 63.5)
        rng = np.random.default_rng(1)
        for _ in range(100):
            (p,) = perturb_boxes([box], 0.4, rng, 64, 64)
            assert 0 <= p.x_min < p.x_max <= 63
            assert 0 <= p.y_min < p.y_max <= 63

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            perturb_boxes([], 0.5, np.random.default_rng(0), 64, 64)


def test_png16_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = np.round(rng.random((32, 48)), 4)
    p = tmp_path / "map.png"
    export_png16(m, p)
    back = import_png16(p)
    assert back.shape == m.shape
    assert np.max(np.abs(back - m)) < 1.0 / 65535.0
