from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iresnet.data import StereoSample
from iresnet.errors import FormatError
from iresnet.metrics import bad_pixels, d1, epe, evaluate_dataset, report_lines, report_table, write_report
from iresnet.tensor import Tensor

GT = np.array([[10.0, 200.0, 50.0, 1.0],
               [10.0, 10.0, 80.0, 2.0],
               [0.0, 30.0, 30.0, 30.0],
               [5.0, 5.0, 5.0, 5.0]])
PRED = np.array([[14.0, 204.0, 50.5, 1.0],
                 [10.0, 12.5, 85.0, 9.0],
                 [99.0, 31.0, 28.0, 33.5],
                 [5.0, 4.0, 5.0, 0.0]])
MASK = np.array([[1, 1, 1, 1],
                 [1, 1, 1, 1],
                 [0, 1, 1, 1],
                 [1, 1, 1, 1]], dtype=float)
# errors on valid pixels, row-major, skipping (2, 0):
# 4, 4, .5, 0 | 0, 2.5, 5, 7 | 1, 2, 3.5 | 0, 1, 0, 5


def test_epe_fixture():
    assert epe(PRED, GT, MASK) == pytest.approx(35.5 / 15, abs=0)
    assert epe(GT, GT, MASK) == 0.0
    assert epe(GT + 1, GT, MASK) == 1.0


def test_bad_pixels_fixture():
    # > 1: 4,4,2.5,5,7,2,3.5,5 = 8 ; > 3: 4,4,5,7,3.5,5 = 6 ; > 5: 7 = 1
    assert bad_pixels(PRED, GT, MASK, 1) == 100.0 * 8 / 15
    assert bad_pixels(PRED, GT, MASK, 3) == 100.0 * 6 / 15
    assert bad_pixels(PRED, GT, MASK, 5) == 100.0 * 1 / 15
    assert bad_pixels(GT + 4, GT, MASK, 3) == 100.0


def test_d1_fixture():
    # > 3 and > 5% gt: (10,14) yes; (200,204) no; (80,85) yes; (2,9) yes; (30,33.5) yes; (5,0) yes
    assert d1(PRED, GT, MASK) == 100.0 * 5 / 15


def test_d1_examples_from_definition():
    one = np.ones((1, 1))
    assert d1(np.array([[14.0]]), np.array([[10.0]]), one) == 100.0
    assert d1(np.array([[204.0]]), np.array([[200.0]]), one) == 0.0


def test_empty_mask_is_fault():
    for fn in (epe, d1):
        with pytest.raises(FormatError):
            fn(PRED, GT, np.zeros_like(MASK))
    with pytest.raises(FormatError):
        bad_pixels(PRED, GT, np.zeros_like(MASK), 3)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_metric_properties(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 100, (6, 7))
    pred = gt + rng.standard_normal((6, 7)) * rng.uniform(0, 10)
    mask = (rng.random((6, 7)) < 0.5).astype(float)
    mask[0, 0] = 1
    bads = [bad_pixels(pred, gt, mask, t) for t in (1, 2, 3, 4, 5)]
    assert all(a >= b for a, b in zip(bads, bads[1:]))
    assert d1(pred, gt, mask) <= bads[2]
    fuzzed = np.where(mask > 0, pred, rng.uniform(-1e3, 1e3, pred.shape))
    fuzz_gt = np.where(mask > 0, gt, rng.uniform(-1e3, 1e3, gt.shape))
    assert epe(fuzzed, fuzz_gt, mask) == epe(pred, gt, mask)
    assert d1(fuzzed, fuzz_gt, mask) == d1(pred, gt, mask)


@dataclass
class _Pyr:
    outs: list

    def at_iteration(self, k):
        return self.outs[k]


class OracleModel:
    """Returns the ground truth plus a fixed per-iteration offset."""

    def __init__(self, offsets):
        self.offsets = offsets
        self.gts = {}

    def __call__(self, left, right, iters):
        gt = self.gts[id(left)]
        return _Pyr([Tensor(gt + o) for o in self.offsets[:iters + 1]])


def _sample(gt, mask, sid, occ=None):
    z = np.zeros((1, 3) + gt.shape)
    return StereoSample(z.copy(), z.copy(), gt[None, None], mask[None, None], sid,
                        None if occ is None else occ[None, None])


def test_evaluate_perfect_predictions_is_zero():
    m = OracleModel([0.0, 0.0, 0.0])
    samples = [_sample(GT, MASK, "a"), _sample(GT * 2, MASK, "b")]
    for s in samples:
        m.gts[id(s.left)] = s.gt
    rep = evaluate_dataset(m, samples, 2)
    assert len(rep.rows) == 3
    for r in rep.rows:
        assert r.all.epe == 0 and r.all.d1_pct == 0 and r.all.bad_pct(1) == 0 and r.noc is None


def test_evaluate_two_sample_weighted_average():
    m = OracleModel([0.0, 1.0])
    a_mask = np.ones((4, 4))
    b_mask = np.zeros((4, 4))
    b_mask[0, :2] = 1
    a = _sample(GT, a_mask, "a")
    b = _sample(GT, b_mask, "b")
    m.gts[id(a.left)], m.gts[id(b.left)] = a.gt, b.gt
    rep = evaluate_dataset(m, [a, b], 1)
    assert rep.rows[1].all.count == 18
    assert rep.rows[1].all.epe == pytest.approx(1.0, abs=1e-12)
    per = [(sid, e, n) for sid, k, e, n in rep.per_sample if k == 1]
    weighted = sum(e * n for _, e, n in per) / sum(n for _, _, n in per)
    assert abs(weighted - rep.rows[1].all.epe) <= 1e-9


def test_evaluate_noc_and_faults():
    m = OracleModel([0.0])
    occ = np.zeros((4, 4))
    occ[0] = 1
    good = _sample(GT, MASK, "good", occ)
    empty = _sample(GT, np.zeros((4, 4)), "empty", occ)
    m.gts[id(good.left)], m.gts[id(empty.left)] = good.gt, empty.gt
    rep = evaluate_dataset(m, [good, empty], 0)
    assert rep.faults and rep.faults[0][0] == "empty"
    assert rep.rows[0].noc.count == 11


def test_report_files(tmp_path):
    m = OracleModel([0.0, 0.5])
    s = _sample(GT, MASK, "a")
    m.gts[id(s.left)] = s.gt
    rep = evaluate_dataset(m, [s], 1)
    kv, tsv = write_report(rep, str(tmp_path / "rep.txt"))
    lines = open(kv).read().splitlines()
    assert "iter1.epe_px=0.500000" in lines and lines == report_lines(rep)
    table = open(tsv).read().splitlines()
    assert len(table) == 3 and table[0].split("\t")[0] == "iter"
    assert table == report_table(rep)
