import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from dosekit.errors import ValidationError
from dosekit.evaluation import (
    D02,
    D95,
    D98,
    DMAX,
    DMEAN,
    DvhCurve,
    EvaluationError,
    MetricsReport,
    dvh_metric,
    evaluate_plan,
    isodose_mse,
    metric_error,
    paired_t_test,
    write_dvh_csv,
)
from dosekit.volume import StructureMask, StructureSet, VoxelGrid

from test_volume import make_mask


# ---- independent oracles -------------------------------------------------

def sort_oracle(values, metric):
    """Order-statistic DVH oracle: sort descending, index d(ceil(q*N))."""
    vs = sorted(values, reverse=True)
    n = len(vs)
    if metric == DMAX:
        return vs[0]
    if metric == DMEAN:
        return float(np.sum(np.asarray(vs, dtype=np.float64)) / n)
    q = int(metric[1:]) / 100.0
    return vs[min(math.ceil(q * n), n) - 1]


def t_pdf(x, df):
    c = math.exp(math.lgamma((df + 1) / 2.0) - math.lgamma(df / 2.0)) / math.sqrt(df * math.pi)
    return c * (1.0 + x * x / df) ** (-(df + 1) / 2.0)


def quad_two_sided_p(t, df):
    tail, _ = quad(t_pdf, abs(t), np.inf, args=(df,))
    return 2.0 * tail


# ---- DvhCurve ------------------------------------------------------------

class TestDvhCurve:
    def test_uniform_dose_is_flat(self):
        c = DvhCurve("s", np.full(17, 0.7, dtype=np.float32))
        for q in (0.01, 0.5, 0.98, 1.0):
            assert c.dose_at_fraction(q) == pytest.approx(0.7)

    def test_order_statistic(self):
        c = DvhCurve("s", np.array([4.0, 3.0, 2.0, 1.0]))
        assert c.dose_at_fraction(0.5) == 3.0

    def test_full_fraction_is_minimum(self):
        c = DvhCurve("s", np.array([4.0, 3.0, 2.0, 1.0]))
        assert c.dose_at_fraction(1.0) == 1.0

    def test_fraction_bounds(self):
        c = DvhCurve("s", np.array([1.0]))
        with pytest.raises(EvaluationError):
            c.dose_at_fraction(0.0)
        with pytest.raises(EvaluationError):
            c.dose_at_fraction(1.5)

    def test_rejects_increasing(self):
        with pytest.raises(EvaluationError):
            DvhCurve("s", np.array([1.0, 2.0]))

    def test_from_dose_requires_nonempty_mask(self):
        dose = VoxelGrid.zeros((2, 2, 2))
        mask = make_mask((2, 2, 2), [])
        with pytest.raises(EvaluationError, match="body"):
            DvhCurve.from_dose(dose, mask)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(3)
        c = DvhCurve("s", np.sort(rng.random(31).astype(np.float32))[::-1])
        qs = rng.uniform(1e-6, 1.0, size=50)
        batch = c.dose_at_fractions(qs)
        for q, v in zip(qs, batch):
            assert v == c.dose_at_fraction(q)


class TestDvhMetric:
    def test_uniform_dose(self):
        c = DvhCurve("s", np.full(9, 0.7, dtype=np.float32))
        for m in (D98, D95, D02, DMEAN, DMAX):
            assert dvh_metric(c, m) == pytest.approx(0.7)

    def test_ten_voxel_hand_case(self):
        doses = np.arange(1.0, 0.05, -0.1)  # 1.0, 0.9, ..., 0.1
        c = DvhCurve("s", doses)
        assert dvh_metric(c, D95) == pytest.approx(0.1)
        assert dvh_metric(c, DMAX) == pytest.approx(1.0)
        assert dvh_metric(c, DMEAN) == pytest.approx(0.55)

    def test_singleton(self):
        c = DvhCurve("s", np.array([0.42], dtype=np.float32))
        for m in (D98, D95, D02, DMEAN, DMAX):
            assert dvh_metric(c, m) == pytest.approx(0.42)

    @settings(max_examples=60)
    @given(st.integers(min_value=0, max_value=2**31 - 1), st.integers(min_value=1, max_value=500))
    def test_matches_sort_oracle_exactly(self, seed, n):
        rng = np.random.default_rng(seed)
        values = rng.random(n).astype(np.float32)
        c = DvhCurve("s", np.sort(values)[::-1])
        for m in (D98, D95, D02, DMEAN, DMAX):
            assert dvh_metric(c, m) == sort_oracle(list(values), m)

    @settings(max_examples=40)
    @given(st.integers(min_value=0, max_value=2**31 - 1), st.integers(min_value=1, max_value=200))
    def test_monotonicity_and_bounds(self, seed, n):
        rng = np.random.default_rng(seed)
        c = DvhCurve("s", np.sort(rng.random(n).astype(np.float32))[::-1])
        d02, d95, d98 = dvh_metric(c, D02), dvh_metric(c, D95), dvh_metric(c, D98)
        assert d02 >= d95 >= d98
        assert dvh_metric(c, DMEAN) <= dvh_metric(c, DMAX)
        assert dvh_metric(c, DMEAN) >= c.dose_at_fraction(1.0)


class TestMetricError:
    def test_identity(self):
        assert metric_error(0.7, 0.7, 1.0) == 0.0

    def test_table2_scale(self):
        assert metric_error(0.7032, 0.7, 1.0) == pytest.approx(0.32)

    def test_highest_prescription_rule(self):
        prescriptions = (1.0, 0.77)
        assert metric_error(0.55, 0.5, max(prescriptions)) == pytest.approx(5.0)

    def test_rejects_nonpositive_prescription(self):
        with pytest.raises(ValidationError):
            metric_error(1.0, 1.0, 0.0)


class TestIsodoseMse:
    def test_identity(self):
        g = VoxelGrid.from_array(np.full((3, 3, 3), 0.5, dtype=np.float32))
        assert isodose_mse(g, g, 1.0) == 0.0

    def test_constant_offset(self):
        gt = VoxelGrid.from_array(np.full((3, 3, 3), 0.5, dtype=np.float32))
        pred = VoxelGrid.from_array(gt.data + np.float32(0.1))
        assert isodose_mse(pred, gt, 1.0) == pytest.approx(0.01, rel=1e-5)

    def test_region_masking(self):
        gt_arr = np.full((4, 4, 4), 0.05, dtype=np.float32)
        gt_arr[:2] = 0.5  # half the voxels above 10% of prescription 1.0
        gt = VoxelGrid.from_array(gt_arr)
        pred_arr = gt_arr.copy()
        pred_arr[:2] += 0.2
        pred_arr[2:] += 100.0  # outside the region, must be ignored
        pred = VoxelGrid.from_array(pred_arr)
        assert isodose_mse(pred, gt, 1.0) == pytest.approx(0.04, rel=1e-5)

    def test_outside_region_invariance(self):
        rng = np.random.default_rng(5)
        gt = VoxelGrid.from_array(rng.uniform(0, 1, size=(4, 4, 4)).astype(np.float32))
        pred = VoxelGrid.from_array(rng.uniform(0, 1, size=(4, 4, 4)).astype(np.float32))
        outside = gt.data < 0.1
        perturbed = pred.data.copy()
        perturbed[outside] += 3.7
        assert isodose_mse(pred, gt, 1.0) == isodose_mse(VoxelGrid.from_array(perturbed), gt, 1.0)

    def test_empty_region(self):
        gt = VoxelGrid.zeros((2, 2, 2))
        with pytest.raises(EvaluationError):
            isodose_mse(gt, gt, 1.0)


class TestPairedTTest:
    def test_symmetric_null(self):
        r = paired_t_test([1.0, -1.0, 0.0], [0.0, 0.0, 0.0])
        assert r.t == 0.0
        assert r.p == 1.0
        assert not r.degenerate

    def test_identical_samples_degenerate(self):
        a = [0.3, 0.5, 0.7, 0.2]
        r = paired_t_test(a, list(a))
        assert r.degenerate
        assert r.p == 1.0
        assert not r.significant

    def test_constant_shift_degenerate(self):
        a = np.array([1.0, 2.0, 3.0])
        r = paired_t_test(a + 0.5, a)
        assert r.degenerate
        assert r.p == 0.0
        assert r.significant

    def test_matches_quadrature_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a = rng.normal(size=10)
            b = a + rng.normal(scale=0.5, size=10)
            r = paired_t_test(a, b)
            if r.degenerate:
                continue
            assert r.p == pytest.approx(quad_two_sided_p(r.t, r.df), abs=1e-9)

    def test_swap_negates_t_keeps_p(self):
        rng = np.random.default_rng(13)
        a = rng.normal(size=8)
        b = rng.normal(size=8)
        r1 = paired_t_test(a, b)
        r2 = paired_t_test(b, a)
        assert r1.t == pytest.approx(-r2.t)
        assert r1.p == pytest.approx(r2.p)

    def test_needs_two_samples(self):
        with pytest.raises(ValidationError):
            paired_t_test([1.0], [2.0])


def _tiny_case(with_oar=True):
    shape = (3, 3, 3)
    body_coords = [(x, y, z) for x in range(3) for y in range(3) for z in range(3)]
    body = make_mask(shape, body_coords)
    ptv = make_mask(shape, [(1, 1, 1), (1, 1, 2)], kind="PTV", name="ptv70", prescription=1.0)
    masks = [body, ptv]
    if with_oar:
        masks.append(make_mask(shape, [(0, 0, 0)], kind="OAR", name="oar01", impact="high"))
    return StructureSet(tuple(masks))


class TestEvaluatePlan:
    def test_identity_gives_zero_errors(self):
        sset = _tiny_case()
        rng = np.random.default_rng(2)
        dose = VoxelGrid.from_array(rng.random((3, 3, 3)).astype(np.float32))
        report = evaluate_plan(dose, dose, sset)
        assert all(r.percent_error == 0.0 for r in report.rows)

    def test_zero_oar_case_has_ptv_and_body_rows(self):
        sset = _tiny_case(with_oar=False)
        dose = VoxelGrid.from_array(np.full((3, 3, 3), 0.5, dtype=np.float32))
        report = evaluate_plan(dose, dose, sset)
        kinds = {r.kind for r in report.rows}
        assert kinds == {"PTV", "BODY"}
        assert len([r for r in report.rows if r.kind == "PTV"]) == 5

    def test_row_count_contract(self):
        sset = _tiny_case()
        dose = VoxelGrid.from_array(np.full((3, 3, 3), 0.5, dtype=np.float32))
        report = evaluate_plan(dose, dose, sset)
        # 5 PTV metrics + 2 OAR metrics + 2 BODY metrics
        assert len(report.rows) == 9
        assert report.rows[0].kind == "PTV"
        assert report.rows[-1].kind == "BODY"

    def test_report_round_trips_to_files(self, tmp_path):
        sset = _tiny_case()
        dose = VoxelGrid.from_array(np.full((3, 3, 3), 0.5, dtype=np.float32))
        report = evaluate_plan(dose, dose, sset)
        report.write_json(tmp_path / "r.json")
        report.write_csv(tmp_path / "r.csv")
        assert (tmp_path / "r.json").stat().st_size > 0
        assert (tmp_path / "r.csv").read_text().count("\n") == len(report.rows) + 1


class TestDvhCsv:
    def test_export(self, tmp_path):
        c = DvhCurve("s", np.array([0.9, 0.5, 0.1], dtype=np.float32))
        write_dvh_csv(c, tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().strip().splitlines()
        assert lines[0] == "dose,volume_fraction"
        assert len(lines) == 4
