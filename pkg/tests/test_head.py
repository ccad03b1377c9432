from __future__ import annotations

import math

import numpy as np
import pytest

from otadet.data import AggregatedSample, GroundTruth, QueryEntry
from otadet.decomp import Attribute
from otadet.geometry import BoxXYXY
from otadet.head import (
    NEG,
    GradCheckReport,
    HeadParams,
    backward,
    dual_forward,
    gradcheck,
    load_params,
    save_params,
    similarity_logits,
)
from otadet.supervision import SamplerConfig, full_batch


def identity_params(d: int, alpha: float = 1.0, beta: float = 0.0) -> HeadParams:
    return HeadParams(w=np.eye(d), alpha_raw=math.log(alpha), beta=beta)


class TestSimilarityLogits:
    def test_identical_unit_vectors(self):
        p = identity_params(3)
        v = np.array([[1.0, 0.0, 0.0]])
        t = np.array([[1.0, 0.0, 0.0]])
        block = similarity_logits(v, t, p)
        assert block.values[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_with_scale_and_bias(self):
        p = identity_params(3, alpha=3.0, beta=-1.0)
        v = np.array([[1.0, 0.0, 0.0]])
        t = np.array([[0.0, 1.0, 0.0]])
        block = similarity_logits(v, t, p)
        assert block.values[0, 0] == pytest.approx(-1.0, abs=1e-12)

    def test_all_columns_invalid(self):
        p = identity_params(2)
        block = similarity_logits(
            np.ones((2, 2)), np.ones((3, 2)), p, valid=np.zeros(3, dtype=bool)
        )
        assert (block.values == NEG).all()

    def test_zero_norm_visual_row_identified(self):
        p = identity_params(2)
        with pytest.raises(ValueError, match="visual row 1"):
            similarity_logits(np.array([[1.0, 0.0], [0.0, 0.0]]), np.ones((1, 2)), p)

    def test_zero_norm_valid_text_row_identified(self):
        p = identity_params(2)
        with pytest.raises(ValueError, match="text row 0"):
            similarity_logits(np.ones((1, 2)), np.zeros((1, 2)), p)

    def test_zero_norm_invalid_text_row_tolerated(self):
        p = identity_params(2)
        t = np.array([[0.0, 0.0], [1.0, 0.0]])
        block = similarity_logits(np.ones((1, 2)), t, p, valid=np.array([False, True]))
        assert block.values[0, 0] == NEG
        assert np.isfinite(block.values[0, 1])

    def test_scale_invariance_of_rows(self):
        rng = np.random.default_rng(0)
        p = HeadParams(w=rng.standard_normal((4, 3)))
        v = rng.standard_normal((2, 3))
        t = rng.standard_normal((5, 4))
        base = similarity_logits(v, t, p).values
        scaled = similarity_logits(v * np.array([[7.5], [0.3]]), t, p).values
        assert np.allclose(base, scaled, atol=1e-12)

    def test_logit_range(self):
        rng = np.random.default_rng(1)
        p = HeadParams(w=rng.standard_normal((4, 3)), alpha_raw=math.log(4.0), beta=-1.5)
        block = similarity_logits(rng.standard_normal((3, 3)), rng.standard_normal((6, 4)), p)
        assert (np.abs(block.values - p.beta) <= p.alpha + 1e-9).all()

    def test_dimension_mismatch(self):
        p = identity_params(3)
        with pytest.raises(ValueError, match="dim"):
            similarity_logits(np.ones((1, 2)), np.ones((1, 3)), p)


def tiny_batch() -> tuple:
    q0 = QueryEntry("alpha target", "expression", (
        Attribute("other", "alpha target"),
        Attribute("other", "alpha part"),
    ))
    q1 = QueryEntry("beta target", "expression", (
        Attribute("other", "beta target"),
    ))
    sample = AggregatedSample(
        "img", (100, 100), (q0, q1),
        (GroundTruth(BoxXYXY(0, 0, 10, 10), 0), GroundTruth(BoxXYXY(20, 0, 30, 10), 1)),
    )
    return full_batch(sample, SamplerConfig(q_max=2, a_max=2))


class TestDualForward:
    def _embed(self, texts, d, rng):
        rows = []
        for t in texts:
            if t == "":
                rows.append(np.zeros(d))
            else:
                seed = abs(hash((t, 0))) % (2**32)
                rows.append(np.random.default_rng(seed).standard_normal(d))
        return np.stack(rows)

    def test_shapes(self):
        tb, _ = tiny_batch()
        rng = np.random.default_rng(0)
        p = HeadParams(w=rng.standard_normal((4, 3)))
        sq, sa = dual_forward(
            rng.standard_normal((5, 3)),
            self._embed(tb.query_texts, 4, rng),
            self._embed(tb.attr_texts, 4, rng),
            p, tb,
        )
        assert sq.values.shape == (5, 2)
        assert sa.values.shape == (5, 4)

    def test_invalid_query_slot_masks_attr_block(self):
        tb, _ = tiny_batch()
        # q1 has one attribute; its second slot is padding
        rng = np.random.default_rng(0)
        p = HeadParams(w=rng.standard_normal((4, 3)))
        sq, sa = dual_forward(
            rng.standard_normal((2, 3)),
            self._embed(tb.query_texts, 4, rng),
            self._embed(tb.attr_texts, 4, rng),
            p, tb,
        )
        assert (sa.values[:, 3] == NEG).all()

    def test_attr_text_equal_to_query_text_gives_equal_columns(self):
        tb, _ = tiny_batch()
        rng = np.random.default_rng(0)
        p = HeadParams(w=rng.standard_normal((4, 3)))
        f_query = self._embed(tb.query_texts, 4, rng)
        f_attr = self._embed(tb.attr_texts, 4, rng)
        # attribute slot 0 of query 0 carries the query text itself
        f_attr[0] = f_query[0]
        sq, sa = dual_forward(rng.standard_normal((3, 3)), f_query, f_attr, p, tb)
        assert np.allclose(sq.values[:, 0], sa.values[:, 0], atol=1e-12)

    def test_separate_attr_scales(self):
        tb, _ = tiny_batch()
        rng = np.random.default_rng(0)
        p = HeadParams(w=rng.standard_normal((4, 3)), alpha_raw=math.log(2.0), beta=0.0)
        pa = HeadParams(w=p.w, alpha_raw=math.log(4.0), beta=1.0)
        v = rng.standard_normal((2, 3))
        fq = self._embed(tb.query_texts, 4, rng)
        fa = self._embed(tb.attr_texts, 4, rng)
        _, sa_shared = dual_forward(v, fq, fa, p, tb)
        _, sa_own = dual_forward(v, fq, fa, p, tb, attr_params=pa)
        valid = sa_shared.mask
        assert not np.allclose(sa_shared.values[:, valid], sa_own.values[:, valid])


class TestBackward:
    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(0)
        p = HeadParams(w=rng.standard_normal((3, 2)))
        v, t = rng.standard_normal((2, 2)), rng.standard_normal((4, 3))
        g = backward(v, t, p, None, np.zeros((2, 4)))
        assert not g.v.any() and not g.t.any() and not g.w.any()
        assert g.alpha_raw == 0.0 and g.beta == 0.0

    def test_grad_beta_is_upstream_sum_over_valid(self):
        rng = np.random.default_rng(1)
        p = HeadParams(w=rng.standard_normal((3, 2)))
        v, t = rng.standard_normal((2, 2)), rng.standard_normal((4, 3))
        valid = np.array([True, False, True, True])
        upstream = rng.standard_normal((2, 4))
        g = backward(v, t, p, valid, upstream)
        assert g.beta == pytest.approx(upstream[:, valid].sum(), rel=1e-12)

    def test_masked_text_embedding_influences_nothing(self):
        rng = np.random.default_rng(2)
        p = HeadParams(w=rng.standard_normal((3, 2)))
        v, t = rng.standard_normal((2, 2)), rng.standard_normal((4, 3))
        valid = np.array([True, False, True, True])
        upstream = rng.standard_normal((2, 4))
        base_fwd = similarity_logits(v, t, p, valid).values
        base_bwd = backward(v, t, p, valid, upstream)
        t2 = t.copy()
        t2[1] = rng.standard_normal(3) * 100
        fwd = similarity_logits(v, t2, p, valid).values
        bwd = backward(v, t2, p, valid, upstream)
        assert np.array_equal(base_fwd, fwd)
        for a, b in zip(base_bwd, bwd):
            assert np.allclose(np.asarray(a), np.asarray(b), atol=0)
        assert not bwd.t[1].any()


class TestGradcheck:
    def test_default_run_passes(self):
        report = gradcheck(seed=0, trials=16)
        assert isinstance(report, GradCheckReport)
        assert report.passed
        assert all(err < 1e-5 for err in report.max_rel.values())

    def test_fault_injection_detected(self):
        report = gradcheck(seed=0, trials=4, inject_fault=True)
        assert not report.passed

    def test_edge_case_single_row_column_runs(self):
        report = gradcheck(seed=1, trials=1)
        assert report.passed  # trial 0 pins N=1, C=1

    def test_report_dict_schema(self):
        d = gradcheck(seed=0, trials=2).to_dict()
        assert set(d) == {"max_rel", "trials", "eps", "threshold", "passed"}
        assert set(d["max_rel"]) == {"v", "t", "w", "alpha_raw", "beta"}


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(3)
        p = HeadParams(w=rng.standard_normal((5, 4)), alpha_raw=0.37, beta=-1.25)
        path = tmp_path / "head.bin"
        save_params(p, path)
        q = load_params(path)
        assert np.array_equal(p.w, q.w)
        assert p.alpha_raw == q.alpha_raw
        assert p.beta == q.beta

    def test_truncated_payload_rejected(self, tmp_path):
        rng = np.random.default_rng(3)
        p = HeadParams(w=rng.standard_normal((5, 4)))
        path = tmp_path / "head.bin"
        save_params(p, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="payload"):
            load_params(path)

    def test_alpha_positive_by_construction(self):
        p = HeadParams(w=np.eye(2), alpha_raw=-3.0)
        assert p.alpha > 0
