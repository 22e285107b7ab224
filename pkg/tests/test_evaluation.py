import math

import numpy as np
import pytest

from recdepth.evaluation import (
    EvalConfig,
    accumulated_rmse,
    arte,
    depth_metrics,
    emit_report,
    evaluate_sequence,
    median_scale,
    plot_training_log,
)


def loop_depth_metrics(pred, gt, mask, cap=80.0, floor=1e-3):
    """Naive per-pixel oracle for the metric suite."""
    se = sle = ar = sr = 0.0
    d1 = d2 = d3 = 0
    n = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if not mask[i, j]:
                continue
            p = min(max(float(pred[i, j]), floor), cap)
            g = float(gt[i, j])
            n += 1
            se += (p - g) ** 2
            sle += (math.log(p) - math.log(g)) ** 2
            ar += abs(p - g) / g
            sr += (p - g) ** 2 / g
            ratio = max(p / g, g / p)
            d1 += ratio < 1.25
            d2 += ratio < 1.25**2
            d3 += ratio < 1.25**3
    return {
        "rmse": math.sqrt(se / n),
        "rmse_log": math.sqrt(sle / n),
        "abs_rel": ar / n,
        "sq_rel": sr / n,
        "d1": d1 / n,
        "d2": d2 / n,
        "d3": d3 / n,
    }


def loop_arte(preds, gts, masks, eps=0.001):
    pair_means = []
    for i in range(1, len(preds)):
        vals = []
        for r in range(preds[0].shape[0]):
            for c in range(preds[0].shape[1]):
                if masks[i][r, c] and masks[i - 1][r, c]:
                    dp = abs(float(preds[i][r, c]) - float(preds[i - 1][r, c]))
                    dg = abs(float(gts[i][r, c]) - float(gts[i - 1][r, c]))
                    vals.append(abs(dp - dg) / (dg + eps))
        if vals:
            pair_means.append(sum(vals) / len(vals))
    return sum(pair_means) / len(pair_means)


class TestMedianScale:
    def test_double_prediction_halves(self):
        gt = np.random.default_rng(0).uniform(1, 10, (8, 8))
        pred = 2 * gt
        scaled, scale = median_scale(pred, gt, np.ones_like(gt, bool))
        assert scale == pytest.approx(0.5)
        assert np.allclose(scaled, gt)

    def test_identity(self):
        gt = np.random.default_rng(1).uniform(1, 10, (8, 8))
        _, scale = median_scale(gt.copy(), gt, np.ones_like(gt, bool))
        assert scale == pytest.approx(1.0)

    def test_metrics_invariant_to_global_rescale(self):
        rng = np.random.default_rng(2)
        gt = rng.uniform(2, 20, (8, 8))
        pred = gt * rng.uniform(0.8, 1.2, (8, 8))
        mask = np.ones_like(gt, bool)
        base, _ = median_scale(pred, gt, mask)
        m_base = depth_metrics(base, gt, mask)
        for c in (0.1, 3.7):
            scaled, _ = median_scale(pred * c, gt, mask)
            m = depth_metrics(scaled, gt, mask)
            assert m.abs_rel == pytest.approx(m_base.abs_rel, rel=1e-12)
            assert m.rmse == pytest.approx(m_base.rmse, rel=1e-12)

    def test_empty_mask_raises(self):
        gt = np.ones((4, 4))
        with pytest.raises(ValueError):
            median_scale(gt, gt, np.zeros_like(gt, bool))


class TestDepthMetrics:
    def test_perfect_prediction(self):
        gt = np.random.default_rng(3).uniform(1, 30, (8, 8))
        m = depth_metrics(gt.copy(), gt, np.ones_like(gt, bool))
        assert (m.rmse, m.rmse_log, m.abs_rel, m.sq_rel) == (0, 0, 0, 0)
        assert (m.delta1, m.delta2, m.delta3) == (1, 1, 1)

    def test_hand_computed_two_pixel_case(self):
        gt = np.array([[2.0, 4.0]])
        pred = np.array([[1.0, 4.0]])
        m = depth_metrics(pred, gt, np.ones_like(gt, bool))
        assert m.rmse == pytest.approx(math.sqrt(0.5))
        assert m.abs_rel == pytest.approx(0.25)
        assert m.delta1 == pytest.approx(0.5)  # ratio 2 >= 1.25 on pixel one

    def test_cap_applied_to_predictions(self):
        gt = np.array([[70.0]])
        pred = np.array([[100.0]])
        m = depth_metrics(pred, gt, np.ones_like(gt, bool))
        assert m.rmse == pytest.approx(10.0)  # capped to 80 before comparison

    def test_oracle_equivalence_random_instances(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            gt = rng.uniform(0.5, 90.0, (8, 8))
            pred = gt * rng.uniform(0.5, 2.0, (8, 8))
            mask = rng.uniform(size=(8, 8)) < 0.8
            if not mask.any():
                continue
            ours = depth_metrics(pred, gt, mask).as_dict()
            ref = loop_depth_metrics(pred, gt, mask)
            for k, v in ref.items():
                assert abs(ours[k] - v) < 1e-10, k

    def test_empty_mask_raises(self):
        with pytest.raises(ValueError):
            depth_metrics(np.ones((4, 4)), np.ones((4, 4)), np.zeros((4, 4), bool))

    def test_delta_ordering(self):
        rng = np.random.default_rng(5)
        gt = rng.uniform(1, 50, (16, 16))
        pred = gt * rng.uniform(0.3, 3.0, (16, 16))
        m = depth_metrics(pred, gt, np.ones_like(gt, bool))
        assert 0 <= m.delta1 <= m.delta2 <= m.delta3 <= 1


class TestArte:
    def test_zero_on_perfect_predictions(self):
        rng = np.random.default_rng(6)
        gts = [rng.uniform(1, 10, (6, 6)) for _ in range(4)]
        masks = [np.ones((6, 6), bool)] * 4
        assert arte(gts, gts, masks) == 0.0

    def test_static_gt_constant_drift_closed_form(self):
        # static scene, predictions jump by c between frames -> term = c / eps
        g = np.full((5, 5), 7.0)
        gts = [g, g, g]
        c = 0.25
        preds = [g, g + c, g + 2 * c]
        masks = [np.ones_like(g, bool)] * 3
        eps = 0.001
        assert arte(preds, gts, masks) == pytest.approx(c / eps, rel=1e-9)

    def test_oracle_equivalence_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            gts = [rng.uniform(1, 20, (8, 8)) for _ in range(3)]
            preds = [g * rng.uniform(0.8, 1.2, (8, 8)) for g in gts]
            masks = [rng.uniform(size=(8, 8)) < 0.7 for _ in range(3)]
            if not all((masks[i] & masks[i - 1]).any() for i in range(1, 3)):
                continue
            assert abs(arte(preds, gts, masks) - loop_arte(preds, gts, masks)) < 1e-10

    def test_pair_without_covalid_pixels_skipped(self):
        g = np.ones((4, 4))
        masks = [np.ones((4, 4), bool), np.zeros((4, 4), bool), np.ones((4, 4), bool)]
        # both pairs involve the empty-mask frame -> error
        with pytest.raises(ValueError):
            arte([g, g, g], [g, g, g], masks)

    def test_needs_two_frames(self):
        g = np.ones((4, 4))
        with pytest.raises(ValueError):
            arte([g], [g], [np.ones((4, 4), bool)])

    def test_self_arte_is_zero(self):
        rng = np.random.default_rng(8)
        preds = [rng.uniform(1, 5, (6, 6)) for _ in range(5)]
        masks = [np.ones((6, 6), bool)] * 5
        assert arte(preds, preds, masks) == 0.0

    def test_duplicated_pairs_contribute_identically(self):
        # appending the reversed pair duplicates its (symmetric) contribution,
        # so the pair average is unchanged
        rng = np.random.default_rng(9)
        a, b = rng.uniform(1, 5, (4, 4)), rng.uniform(1, 5, (4, 4))
        ga, gb = rng.uniform(1, 5, (4, 4)), rng.uniform(1, 5, (4, 4))
        masks = [np.ones((4, 4), bool)] * 3
        short = arte([a, b], [ga, gb], masks[:2])
        extended = arte([a, b, a], [ga, gb, ga], masks)
        assert extended == pytest.approx(short, rel=1e-12)


class TestAccumulatedRmse:
    def test_constant_per_frame_rmse_gives_flat_curve(self):
        gt = np.full((4, 4), 5.0)
        preds = [gt + 1.0] * 6
        curve = accumulated_rmse(preds, [gt] * 6, [np.ones_like(gt, bool)] * 6)
        assert np.allclose(curve, 1.0)

    def test_running_mean(self):
        gt = np.full((2, 2), 3.0)
        preds = [gt + 2.0, gt + 4.0]
        curve = accumulated_rmse(preds, [gt, gt], [np.ones_like(gt, bool)] * 2)
        assert np.allclose(curve, [2.0, 3.0])

    def test_length_matches_sequence(self):
        gt = np.ones((3, 3))
        n = 7
        curve = accumulated_rmse([gt] * n, [gt] * n, [np.ones_like(gt, bool)] * n)
        assert len(curve) == n


class TestEvaluateSequence:
    def test_scale_ambiguity_resolved_by_median_scaling(self):
        rng = np.random.default_rng(9)
        gts = np.stack([rng.uniform(2, 10, (8, 8)) for _ in range(3)])
        preds = gts * 0.01  # scale-blind predictions
        out = evaluate_sequence(preds, gts, EvalConfig(median_scaling=True))
        assert out["abs_rel"] < 1e-9
        out_raw = evaluate_sequence(preds, gts, EvalConfig(median_scaling=False))
        assert out_raw["abs_rel"] > 0.5


class TestEmitReport:
    def _row(self, **kw):
        base = {
            "mode": "self_pred",
            "pattern": "",
            "rmse": 1.0,
            "rmse_log": 0.1,
            "abs_rel": 0.05,
            "sq_rel": 0.2,
            "d1": 0.9,
            "d2": 0.95,
            "d3": 0.99,
            "arte": 0.12,
        }
        base.update(kw)
        return base

    def test_table_only_when_no_curves(self, tmp_path):
        paths = emit_report([self._row()], tmp_path / "rep")
        assert paths["table"].exists()
        assert "curves" not in paths
        header = paths["table"].read_text().splitlines()[0]
        assert header == "mode,pattern,rmse,rmse_log,abs_rel,sq_rel,d1,d2,d3,arte"

    def test_row_count_matches_configurations(self, tmp_path):
        rows = [self._row(mode=f"m{i}") for i in range(4)]
        paths = emit_report(rows, tmp_path / "rep")
        lines = paths["table"].read_text().splitlines()
        assert len(lines) == 5

    def test_curves_and_sweep_emitted_and_overwritten(self, tmp_path):
        out = tmp_path / "rep"
        curves = {"seq0": np.linspace(1, 0.5, 10)}
        sweep = [(50, 2.0), (200, 1.5), (500, 1.2)]
        p1 = emit_report([self._row()], out, curves=curves, sweep=sweep)
        assert p1["curves"].exists() and p1["sweep"].exists()
        stamp = p1["table"].read_text()
        p2 = emit_report([self._row()], out, curves=curves, sweep=sweep)
        assert p2["table"].read_text() == stamp

    def test_unwritable_path_raises(self, tmp_path):
        target = tmp_path / "file"
        target.write_text("x")
        with pytest.raises(OSError):
            emit_report([self._row()], target / "sub")


class TestPlotTrainingLog:
    def test_plot_written(self, tmp_path):
        from recdepth.training import TrainingLog

        log_path = tmp_path / "log.csv"
        with TrainingLog(log_path) as tl:
            for i in range(10):
                tl.row(i, 0, "stage1", components={"total": 1.0 / (i + 1)})
            for i in range(10, 20):
                tl.row(i, 0, "stage2", components={"total": 0.5 / (i + 1)})
        out = plot_training_log(log_path, tmp_path / "loss.png")
        assert out.exists() and out.stat().st_size > 0
