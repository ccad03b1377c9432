from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otadet.geometry import BoxXYXY, xyxy_to_cxcywh
from otadet.head import NEG, LogitBlock
from otadet.losses import (
    Assignment,
    LossParts,
    LossWeights,
    MalConfig,
    breakdown_json,
    hungarian_match,
    localization_losses,
    mal,
    mal_grad,
    mal_grad_grid,
    mal_grid,
    semantic_losses,
    total_loss,
)
from otadet.supervision import CorrespondenceSet
from oracles import brute_force_assignment_cost, central_difference

CFG = MalConfig()


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


class TestMalBoundaries:
    @pytest.mark.parametrize("gamma", [0.0, 1.5, 2.0])
    def test_perfect_positive_exact_zero(self, gamma):
        assert abs(mal(1.0, 1.0, 1, MalConfig(gamma=gamma))) <= 1e-12

    @pytest.mark.parametrize("gamma", [0.0, 1.5, 2.0])
    @pytest.mark.parametrize("q", [0.0, 0.3, 1.0])
    def test_perfect_negative_exact_zero(self, gamma, q):
        assert abs(mal(0.0, q, 0, MalConfig(gamma=gamma))) <= 1e-12

    @pytest.mark.parametrize("gamma", [0.0, 1.5, 2.0])
    def test_half_probability_gives_ln2(self, gamma):
        # direct substitution: at q=1 only the log(p) term survives
        assert mal(0.5, 1.0, 1, MalConfig(gamma=gamma)) == pytest.approx(math.log(2), abs=1e-12)

    def test_clamp_keeps_loss_finite(self):
        assert math.isfinite(mal(1.0, 0.3, 1, CFG))
        assert math.isfinite(mal(0.0, 1.0, 1, CFG))
        assert math.isfinite(mal(1.0, 0.5, 0, CFG))

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            p, q = rng.uniform(0, 1, size=2)
            y = int(rng.integers(0, 2))
            assert mal(float(p), float(q), y, CFG) >= 0.0


class TestMalProperties:
    @given(st.floats(0.35, 0.65), st.floats(0.0, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_continuity_in_p(self, p, q):
        delta = 1e-9
        for y in (0, 1):
            a = mal(p, q, y, CFG)
            b = mal(p + delta, q, y, CFG)
            assert abs(a - b) < 1e-6

    @given(st.floats(0.05, 0.95))
    @settings(max_examples=100, deadline=None)
    def test_continuity_in_q_for_positive_gamma(self, p):
        for q0 in (0.0, 1.0):
            near = mal(p, q0 + (1e-9 if q0 == 0.0 else -1e-9), 1, CFG)
            at = mal(p, q0, 1, CFG)
            assert abs(near - at) < 1e-6

    def test_strictly_decreasing_in_p_at_q1(self):
        ps = np.linspace(0.01, 0.99, 50)
        vals = [mal(float(p), 1.0, 1, CFG) for p in ps]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    @given(st.floats(0.01, 0.99), st.floats(0.0, 1.0), st.integers(0, 1))
    @settings(max_examples=300, deadline=None)
    def test_grid_matches_scalar(self, p, q, y):
        grid = mal_grid(np.array([[p]]), np.array([[q]]), np.array([[y]]), CFG)
        assert grid[0, 0] == pytest.approx(mal(p, q, y, CFG), abs=1e-12)
        ggrid = mal_grad_grid(np.array([[p]]), np.array([[q]]), np.array([[y]]), CFG)
        assert ggrid[0, 0] == pytest.approx(mal_grad(p, q, y, CFG), abs=1e-12)

    def test_gamma_zero_is_plain_cross_entropy(self):
        cfg = MalConfig(gamma=0.0, alpha_neg=1.0)
        p = 0.37
        assert mal(p, 1.0, 1, cfg) == pytest.approx(-math.log(p), abs=1e-12)
        assert mal(p, 0.5, 1, cfg) == pytest.approx(-math.log(p) - math.log(1 - p), abs=1e-12)
        assert mal(p, 0.9, 0, cfg) == pytest.approx(-math.log(1 - p), abs=1e-12)


class TestMalGrad:
    def test_hand_derivative_positive_branch(self):
        # y=1, q=1: d/dp of -log p is -1/p
        assert mal_grad(0.5, 1.0, 1, MalConfig(gamma=1.5)) == pytest.approx(-2.0, abs=1e-12)

    def test_hand_derivative_negative_branch_gamma_zero(self):
        cfg = MalConfig(gamma=0.0, alpha_neg=1.0)
        for p in (0.2, 0.5, 0.8):
            assert mal_grad(p, 0.0, 0, cfg) == pytest.approx(1.0 / (1.0 - p), abs=1e-12)

    @pytest.mark.parametrize("gamma", [0.0, 1.0, 1.5, 2.0])
    def test_matches_central_differences(self, gamma):
        cfg = MalConfig(gamma=gamma, alpha_neg=1.3)
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(200):
            p = float(rng.uniform(0.01, 0.99))
            q = float(rng.uniform(0.0, 1.0))
            y = int(rng.integers(0, 2))
            numeric = central_difference(lambda x: mal(x, q, y, cfg), p)
            analytic = mal_grad(p, q, y, cfg)
            rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, rel)
        assert worst < 1e-6


class TestMalConfigValidation:
    def test_negative_gamma_rejected(self):
        with pytest.raises(ValueError):
            MalConfig(gamma=-0.5)

    def test_nonpositive_alpha_neg_rejected(self):
        with pytest.raises(ValueError):
            MalConfig(alpha_neg=0.0)


def random_cost_instance(rng: np.random.Generator, n: int, m: int):
    """Random boxes/logits whose hungarian inputs yield a generic cost matrix."""
    pred = np.column_stack([
        rng.uniform(0.2, 0.8, size=n), rng.uniform(0.2, 0.8, size=n),
        rng.uniform(0.05, 0.3, size=n), rng.uniform(0.05, 0.3, size=n),
    ])
    gt = np.column_stack([
        rng.uniform(0.2, 0.8, size=m), rng.uniform(0.2, 0.8, size=m),
        rng.uniform(0.05, 0.3, size=m), rng.uniform(0.05, 0.3, size=m),
    ])
    logits = rng.normal(0, 3, size=(n, m))
    cols = list(range(m))
    return pred, logits, gt, cols


def rebuild_cost(pred, logits, gt, cols, weights=(2.0, 5.0, 2.0)):
    from otadet.geometry import cxcywh_to_xyxy, giou_matrix, l1_matrix
    from scipy.special import expit

    c_cls, c_box, c_giou = weights
    return (
        c_cls * (-expit(logits[:, cols]))
        + c_box * l1_matrix(pred, gt)
        + c_giou * (-giou_matrix(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt)))
    )


class TestHungarianMatch:
    def test_single_pair(self):
        rng = np.random.default_rng(0)
        pred, logits, gt, cols = random_cost_instance(rng, 1, 1)
        a = hungarian_match(pred, logits, gt, cols)
        assert a.pairs == ((0, 0),)
        assert a.unmatched_preds == ()

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n, m = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            pred, logits, gt, cols = random_cost_instance(rng, n, m)
            a = hungarian_match(pred, logits, gt, cols)
            cost = rebuild_cost(pred, logits, gt, cols)
            expected = brute_force_assignment_cost(cost)
            got = sum(cost[i, j] for i, j in a.pairs)
            assert got == pytest.approx(expected, abs=1e-9)
            assert a.total_cost == pytest.approx(expected, abs=1e-9)

    def test_tied_rows_take_lexicographically_smallest(self):
        pred = np.array([[0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]])
        gt = np.array([[0.3, 0.5, 0.2, 0.2], [0.7, 0.5, 0.2, 0.2]])
        logits = np.zeros((2, 2))
        for _ in range(5):
            a = hungarian_match(pred, logits, gt, [0, 1])
            assert a.pairs == ((0, 0), (1, 1))

    def test_injective_and_sized(self):
        rng = np.random.default_rng(9)
        pred, logits, gt, cols = random_cost_instance(rng, 5, 3)
        a = hungarian_match(pred, logits, gt, cols)
        assert len(a.pairs) == 3
        assert len({i for i, _ in a.pairs}) == 3
        assert len({j for _, j in a.pairs}) == 3
        assert len(a.unmatched_preds) == 2

    def test_empty_gt(self):
        a = hungarian_match(np.zeros((3, 4)), np.zeros((3, 0)), np.zeros((0, 4)), [])
        assert a.pairs == ()
        assert a.unmatched_preds == (0, 1, 2)

    def test_non_finite_cost_rejected(self):
        pred = np.array([[0.5, 0.5, np.nan, 0.2]])
        gt = np.array([[0.5, 0.5, 0.2, 0.2]])
        with pytest.raises(ValueError, match="non-finite"):
            hungarian_match(pred, np.zeros((1, 1)), gt, [0])

    def test_accepts_logit_block(self):
        rng = np.random.default_rng(3)
        pred, logits, gt, cols = random_cost_instance(rng, 2, 2)
        block = LogitBlock(values=logits, mask=np.ones(2, dtype=bool))
        a = hungarian_match(pred, block, gt, cols)
        assert len(a.pairs) == 2


def make_cs(m_q: np.ndarray, a_max: int, gt_boxes: list[BoxXYXY],
            attrs_per_query: list[int]) -> CorrespondenceSet:
    n_obj, q_max = m_q.shape
    m_map = np.zeros((q_max, q_max * a_max), dtype=np.int8)
    for j, n in enumerate(attrs_per_query):
        m_map[j, j * a_max: j * a_max + n] = 1
    m_a = ((m_q.astype(np.int32) @ m_map.astype(np.int32)) > 0).astype(np.int8)
    return CorrespondenceSet(m_q=m_q.astype(np.int8), m_a=m_a, m_map=m_map, gt_boxes=gt_boxes)


def block_for(values: np.ndarray, valid: np.ndarray) -> LogitBlock:
    vals = values.astype(float).copy()
    vals[:, ~valid] = NEG
    return LogitBlock(values=vals, mask=valid)


class TestSemanticLosses:
    def _setup_perfect(self, true_logit: float):
        gt_box = BoxXYXY(0, 0, 10, 10)
        cs = make_cs(np.array([[1, 0]]), 1, [gt_box], [1, 1])
        valid_q = np.array([True, True])
        s_query = block_for(np.array([[true_logit, -40.0]]), valid_q)
        s_attr = block_for(np.array([[true_logit, -40.0]]), valid_q)
        pred_xyxy = np.array([[0.0, 0.0, 10.0, 10.0]])
        assignment = Assignment(pairs=((0, 0),), unmatched_preds=())
        return s_query, s_attr, assignment, pred_xyxy, cs

    def test_perfect_prediction_zero_loss(self):
        s_query, s_attr, assignment, pred, cs = self._setup_perfect(40.0)
        l_q, l_a = semantic_losses(s_query, s_attr, assignment, pred, cs, CFG)
        assert abs(l_q) < 1e-12
        assert abs(l_a) < 1e-12

    def test_half_probability_reduces_to_ln2(self):
        s_query, s_attr, assignment, pred, cs = self._setup_perfect(0.0)
        l_q, _ = semantic_losses(s_query, s_attr, assignment, pred, cs, CFG)
        assert l_q == pytest.approx(math.log(2), abs=1e-9)

    def test_multilabel_row_sums_scalar_mal(self):
        gt_box = BoxXYXY(0, 0, 10, 10)
        cs = make_cs(np.array([[1, 1, 0]]), 1, [gt_box], [1, 1, 1])
        valid = np.array([True, True, True])
        logits = np.array([[0.3, -0.2, -1.0]])
        s = block_for(logits, valid)
        pred = np.array([[0.0, 0.0, 10.0, 10.0]])
        assignment = Assignment(pairs=((0, 0),), unmatched_preds=())
        l_q, _ = semantic_losses(s, s, assignment, pred, cs, CFG)
        from scipy.special import expit

        expected = (
            mal(float(expit(0.3)), 1.0, 1, CFG)
            + mal(float(expit(-0.2)), 1.0, 1, CFG)
            + mal(float(expit(-1.0)), 0.0, 0, CFG)
        )
        assert l_q == pytest.approx(expected, rel=1e-12)

    def test_unmatched_preds_all_negative(self):
        gt_box = BoxXYXY(0, 0, 10, 10)
        cs = make_cs(np.array([[1, 0]]), 1, [gt_box], [1, 1])
        valid = np.array([True, True])
        logits = np.array([[40.0, -40.0], [2.0, 1.0]])
        s = block_for(logits, valid)
        pred = np.array([[0.0, 0.0, 10.0, 10.0], [50.0, 0.0, 60.0, 10.0]])
        assignment = Assignment(pairs=((0, 0),), unmatched_preds=(1,))
        l_q, _ = semantic_losses(s, s, assignment, pred, cs, CFG)
        from scipy.special import expit

        expected = (
            mal(float(expit(2.0)), 0.0, 0, CFG) + mal(float(expit(1.0)), 0.0, 0, CFG)
        )
        assert l_q == pytest.approx(expected, rel=1e-9)

    def test_empty_gt_flagged_negatives_only(self, caplog):
        cs = make_cs(np.zeros((0, 2)), 1, [], [1, 1])
        valid = np.array([True, True])
        s = block_for(np.array([[1.0, -1.0]]), valid)
        pred = np.array([[0.0, 0.0, 10.0, 10.0]])
        assignment = Assignment(pairs=(), unmatched_preds=(0,))
        with caplog.at_level("WARNING"):
            l_q, l_a = semantic_losses(s, s, assignment, pred, cs, CFG)
        assert l_q > 0
        assert any("no retained objects" in r.message for r in caplog.records)

    def test_padded_columns_excluded_bitwise(self):
        gt_box = BoxXYXY(0, 0, 10, 10)
        cs = make_cs(np.array([[1, 0]]), 1, [gt_box], [1, 1])
        valid = np.array([True, True, False])
        vals = np.array([[0.4, -0.7, 0.0]])
        cs2 = CorrespondenceSet(
            m_q=np.array([[1, 0, 0]], dtype=np.int8),
            m_a=np.array([[1, 0, 0]], dtype=np.int8),
            m_map=np.eye(3, dtype=np.int8),
            gt_boxes=[gt_box],
        )
        pred = np.array([[0.0, 0.0, 10.0, 10.0]])
        assignment = Assignment(pairs=((0, 0),), unmatched_preds=())
        base = semantic_losses(block_for(vals, valid), block_for(vals, valid),
                               assignment, pred, cs2, CFG)
        poked = vals.copy()
        poked[0, 2] = 123.0
        after = semantic_losses(block_for(poked, valid), block_for(poked, valid),
                                assignment, pred, cs2, CFG)
        assert base == after

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        q_max, a_max, n_obj, n_pred = 4, 2, 3, 4
        m_q = (rng.random((n_obj, q_max)) < 0.4).astype(np.int8)
        m_q[:, -1] = 0
        m_q[m_q.sum(axis=1) == 0, 0] = 1
        attrs = [2, 1, 2, 0]
        gt_boxes = [BoxXYXY(10 * i, 0, 10 * i + 8, 8) for i in range(n_obj)]
        cs = make_cs(m_q, a_max, gt_boxes, attrs)
        valid_q = np.array([True, True, True, False])
        valid_a = cs.m_map.sum(axis=0).astype(bool)
        sq_vals = rng.normal(0, 2, size=(n_pred, q_max))
        sa_vals = rng.normal(0, 2, size=(n_pred, q_max * a_max))
        pred = np.array([[10.0 * i, 0.0, 10.0 * i + 8.0, 8.0] for i in range(n_pred)])
        assignment = Assignment(pairs=((0, 0), (1, 1), (2, 2)), unmatched_preds=(3,))
        base = semantic_losses(block_for(sq_vals, valid_q), block_for(sa_vals, valid_a),
                               assignment, pred, cs, CFG)

        perm = [2, 0, 1, 3]  # new slot p holds old query perm[p]
        sq_p = sq_vals[:, perm]
        valid_qp = valid_q[perm]
        m_q_p = m_q[:, perm]
        attrs_p = [attrs[p] for p in perm]
        sa_p = np.zeros_like(sa_vals)
        valid_ap = np.zeros_like(valid_a)
        for new_j, old_j in enumerate(perm):
            sa_p[:, new_j * a_max:(new_j + 1) * a_max] = sa_vals[:, old_j * a_max:(old_j + 1) * a_max]
            valid_ap[new_j * a_max:(new_j + 1) * a_max] = valid_a[old_j * a_max:(old_j + 1) * a_max]
        cs_p = make_cs(m_q_p, a_max, gt_boxes, attrs_p)
        permuted = semantic_losses(block_for(sq_p, valid_qp), block_for(sa_p, valid_ap),
                                   assignment, pred, cs_p, CFG)
        assert base[0] == pytest.approx(permuted[0], rel=1e-12)
        assert base[1] == pytest.approx(permuted[1], rel=1e-12)

    def test_q1_positive_terms_are_plain_log(self):
        for gamma in (0.0, 1.5, 2.0):
            cfg = MalConfig(gamma=gamma)
            s_query, s_attr, assignment, pred, cs = self._setup_perfect(0.6)
            l_q, _ = semantic_losses(s_query, s_attr, assignment, pred, cs, cfg)
            from scipy.special import expit

            p = float(expit(0.6))
            neg = mal(float(expit(-40.0)), 1.0, 0, cfg)
            assert l_q == pytest.approx(-math.log(p) + neg, rel=1e-9)


class TestLocalizationLosses:
    def test_perfect_boxes(self):
        boxes = np.array([[0.5, 0.5, 0.2, 0.2]])
        a = Assignment(pairs=((0, 0),), unmatched_preds=())
        assert localization_losses(boxes, boxes, a) == (0.0, 0.0)

    def test_single_pair_from_geometry_example(self):
        pred = xyxy_to_cxcywh(np.array([[0.0, 0.0, 1.0, 1.0]]))
        gt = xyxy_to_cxcywh(np.array([[2.0, 0.0, 3.0, 1.0]]))
        a = Assignment(pairs=((0, 0),), unmatched_preds=())
        l_box, l_giou = localization_losses(pred, gt, a)
        assert l_giou == pytest.approx(4.0 / 3.0, abs=1e-12)
        assert l_box == pytest.approx(2.0, abs=1e-12)

    def test_empty_assignment(self):
        a = Assignment(pairs=(), unmatched_preds=(0,))
        assert localization_losses(np.zeros((1, 4)), np.zeros((0, 4)), a) == (0.0, 0.0)

    def test_unmatched_preds_contribute_nothing(self):
        boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.9, 0.9, 0.1, 0.1]])
        gt = np.array([[0.5, 0.5, 0.2, 0.2]])
        a = Assignment(pairs=((0, 0),), unmatched_preds=(1,))
        assert localization_losses(boxes, gt, a) == (0.0, 0.0)


class TestTotalLoss:
    def test_all_zero(self):
        assert total_loss(LossParts(0, 0, 0, 0), LossWeights()) == 0.0

    def test_default_weights_sum(self):
        # weighted sum with unit parts: 1*1 + 1*1 + 5*1 + 2*1
        assert total_loss(LossParts(1, 1, 1, 1), LossWeights()) == pytest.approx(9.0)

    def test_linearity_in_query_weight(self):
        parts = LossParts(0.7, 0.3, 0.1, 0.2)
        base = total_loss(parts, LossWeights(query=1.0))
        doubled = total_loss(parts, LossWeights(query=2.0))
        assert doubled - base == pytest.approx(0.7)

    def test_fgl_ddf_contribute_zero(self):
        parts = LossParts(0, 0, 0, 0, fgl=100.0, ddf=100.0)
        assert total_loss(parts, LossWeights()) == 0.0

    def test_default_weight_values(self):
        w = LossWeights()
        assert (w.query, w.attr, w.box, w.giou, w.fgl, w.ddf) == (1.0, 1.0, 5.0, 2.0, 0.15, 1.5)

    def test_breakdown_json_keys(self):
        line = json.loads(breakdown_json(3, LossParts(1, 2, 3, 4), 7))
        assert set(line) == {"step", "l_query", "l_attr", "l_box", "l_giou", "n_pos"}
        assert line["step"] == 3 and line["n_pos"] == 7
