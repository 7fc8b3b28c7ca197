import itertools
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cephmark.data import LANDMARKS, LandmarkAnnotation
from cephmark.evaluation import (ANNOTATOR_PAIRWISE, EvalError, EvalReport, PixelSpacing,
                                 build_table, check_printed_means, comparison_table,
                                 decode_heatmap, emit_report, fmt2, interobserver_table,
                                 parse_report_csv, radial_error_cm)

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures" / "paper"
GOLDEN = Path(__file__).resolve().parent / "golden"
UNIT = PixelSpacing(1.0, 1.0)


# --- decoding and distances ---------------------------------------------------------

def test_decode_first_maximum_wins():
    ch = np.zeros((4, 5))
    ch[1, 3] = ch[2, 0] = 1.0
    assert decode_heatmap(ch) == (3, 1)
    with pytest.raises(EvalError):
        decode_heatmap(np.zeros(3))


def test_radial_error_examples():
    assert radial_error_cm((0, 0), (3, 4), (10, 10), (10, 10), UNIT) == 5.0
    # identical point at scale 1 -> 0
    assert radial_error_cm((7, 2), (7, 2), (10, 10), (10, 10), UNIT) == 0.0
    # upscaling stays real-valued: x = 1 * 2000/432
    d = radial_error_cm((1, 0), (0, 0), (512, 432), (2400, 2000), PixelSpacing(0.01, 0.01))
    assert d == pytest.approx(2000 / 432 * 0.01, rel=1e-15)


def test_radial_error_anisotropic_spacing():
    d = radial_error_cm((2, 2), (0, 0), (10, 10), (10, 10), PixelSpacing(0.5, 2.0))
    assert d == pytest.approx(math.hypot(1.0, 4.0))


def test_radial_error_argument_errors():
    with pytest.raises(EvalError):
        radial_error_cm((10, 0), (0, 0), (10, 10), (10, 10), UNIT)
    with pytest.raises(EvalError):
        PixelSpacing(0.0, 1.0)
    with pytest.raises(EvalError):
        radial_error_cm((0, 0), (0, 0), (10, 10), (10, 10), (1.0, 1.0))


# --- aggregation -------------------------------------------------------------------------

def test_build_table_cells_are_fold_means():
    folds = [{"A": [1.0, 3.0], "B": [2.0]}, {"A": [4.0], "B": [0.0, 1.0]}]
    rep = build_table(folds, UNIT)
    assert rep.columns == ["Split 1", "Split 2"]
    assert rep.rows == {"A": [2.0, 4.0], "B": [2.0, 0.5]}
    assert rep.row_mean("A") == 3.0
    assert rep.overall_mean == pytest.approx((3.0 + 1.25) / 2)


def test_build_table_orders_rows_canonically():
    folds = [{"Ba": [1.0], "A": [1.0]}]
    assert list(build_table(folds).rows) == ["A", "Ba"]


def test_build_table_rejects_mismatch_and_negatives():
    with pytest.raises(EvalError, match="differs"):
        build_table([{"A": [1.0]}, {"B": [1.0]}])
    with pytest.raises(EvalError, match="negative"):
        build_table([{"A": [-1.0]}])
    with pytest.raises(EvalError):
        build_table([{"A": []}])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(0, 10), min_size=1, max_size=4), min_size=5, max_size=5))
def test_overall_mean_is_mean_of_fold_means(cells):
    folds = [{"A": c} for c in cells]
    rep = build_table(folds)
    fold_means = [math.fsum(c) / len(c) for c in cells]
    assert rep.overall_mean == pytest.approx(sum(fold_means) / 5, abs=1e-12)


# --- inter-observer -------------------------------------------------------------------

def three(points_by_annotator, name="A", image="im0", hw=(100, 100)):
    return [LandmarkAnnotation(image, a, {name: p}, hw) for a, p in points_by_annotator.items()]


def test_interobserver_zero_five_five_fixture():
    anns = three({"d1": (0, 0), "d2": (0, 0), "d3": (3, 4)})
    rep = interobserver_table(anns, UNIT)
    assert rep.comparison_kind == ANNOTATOR_PAIRWISE
    assert rep.columns == ["Three doctors"] and not rep.with_mean
    assert abs(rep.rows["A"][0] - 10 / 3) <= 1e-9


def test_interobserver_permutation_invariant(rng):
    pts = {f"d{i}": tuple(rng.uniform(0, 99, 2)) for i in range(3)}
    base = interobserver_table(three(pts), UNIT).rows["A"][0]
    for perm in itertools.permutations(pts):
        relabeled = {new: pts[old] for new, old in zip(("x", "y", "z"), perm)}
        assert interobserver_table(three(relabeled), UNIT).rows["A"][0] == pytest.approx(base, abs=1e-12)


def test_interobserver_requires_three_and_full_coverage():
    with pytest.raises(EvalError, match="3 annotators"):
        interobserver_table(three({"d1": (0, 0), "d2": (1, 1)}), UNIT)
    anns = three({"d1": (0, 0), "d2": (0, 0), "d3": (3, 4)})
    anns[2].points = {"B": (1.0, 1.0)}
    with pytest.raises(EvalError, match="coverage"):
        interobserver_table(anns, UNIT, landmarks=["A"])


# --- formatting -----------------------------------------------------------------------------

@pytest.mark.parametrize("v,s", [(2.5, "2.50"), (1.005, "1.01"), (2.675, "2.68"), (0.0, "0.00"),
                                 (3.14159, "3.14"), (-1.005, "-1.01")])
def test_fmt2_round_half_up_on_decimal_repr(v, s):
    assert fmt2(v) == s


def sample_report():
    rows = {"A": [1.0, 2.0], "Ar": [0.125, 0.375]}
    return EvalReport(["Split 1", "Split 2"], rows, spacing=UNIT)


def test_emit_csv_golden():
    assert emit_report(sample_report(), "csv") == (GOLDEN / "report.csv").read_bytes()


def test_emit_markdown_golden():
    assert emit_report(sample_report(), "md") == (GOLDEN / "report.md").read_bytes()


def test_emit_is_deterministic_and_parses_back():
    rep = sample_report()
    blob = emit_report(rep, "csv")
    assert blob == emit_report(rep, "csv")
    back = parse_report_csv(blob)
    assert back.columns == rep.columns
    assert back.printed_means == {"A": 1.5, "Ar": 0.25}
    with pytest.raises(ValueError):
        emit_report(rep, "xlsx")


def test_comparison_table_uses_row_means():
    a = build_table([{"A": [1.0], "B": [2.0]}, {"A": [3.0], "B": [2.0]}])
    b = EvalReport(["Three doctors"], {"A": [0.5], "B": [1.5]}, ANNOTATOR_PAIRWISE, with_mean=False)
    cmp = comparison_table({"U-Net and doctor": a, "Three doctors": b})
    assert cmp.rows == {"A": [2.0, 0.5], "B": [2.0, 1.5]}
    assert cmp.column_means() == [2.0, 1.0]


# --- published tables -----------------------------------------------------------------------

def load_fixture(name):
    return parse_report_csv((FIXTURES / name).read_bytes())


@pytest.mark.parametrize("name,overall", [("table4.csv", 2.50), ("table5.csv", 2.11)])
def test_fixture_overall_mean(name, overall):
    rebuilt, _ = check_printed_means(load_fixture(name))
    assert len(rebuilt.rows) == 27 and list(rebuilt.rows) == list(LANDMARKS)
    assert abs(rebuilt.overall_mean - overall) <= 0.01


@pytest.mark.parametrize("name", ["table4.csv", "table5.csv"])
def test_fixture_means_consistent_with_rounded_inputs(name):
    # five cells each rounded to +-0.005 plus the printed mean's own rounding can
    # separate the recomputed and printed means by at most 0.01
    _, checks = check_printed_means(load_fixture(name))
    assert len(checks) == 27
    assert max(c.delta for c in checks) <= 0.01 + 1e-12


def test_fixture_table1_columns_match_table_means():
    t1 = load_fixture("table1.csv")
    t4, _ = check_printed_means(load_fixture("table4.csv"))
    t5, _ = check_printed_means(load_fixture("table5.csv"))
    for name in LANDMARKS:
        cnn, unet, _doctors = t1.rows[name]
        assert cnn == load_fixture("table4.csv").printed_means[name]
        assert unet == load_fixture("table5.csv").printed_means[name]
    assert t1.printed_overall == [2.50, 2.11, 2.59]
    assert abs(math.fsum(r[2] for r in t1.rows.values()) / 27 - 2.59) <= 0.01
