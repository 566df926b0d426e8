import dataclasses
import json

import numpy as np
import pytest
from oracles import brute_force_confusion, brute_force_metrics

from mpmri_series.evaluation import (METRICS, class_metrics, collapse_dwi, compare_models, comparison_marks,
                                     confusion, confusion_to_text, format_report, largest_off_diagonal,
                                     macro_report, plot_confusion, write_report_json)
from mpmri_series.labels import SeriesLabel


class TestConfusion:
    def test_perfect_is_diagonal(self):
        y = list(range(8)) * 3
        np.testing.assert_array_equal(confusion(y, y), np.diag([3] * 8))

    def test_empty(self):
        cm = confusion([], [])
        assert cm.shape == (8, 8) and cm.sum() == 0

    def test_hand_counted(self):
        true = [0, 0, 1, 2, 2, 2]
        pred = [0, 1, 1, 2, 0, 2]
        expected = np.zeros((8, 8), int)
        expected[0, 0] = 1
        expected[0, 1] = 1
        expected[1, 1] = 1
        expected[2, 2] = 2
        expected[2, 0] = 1
        np.testing.assert_array_equal(confusion(true, pred), expected)

    def test_matches_loop(self, rng):
        t, p = rng.integers(0, 8, 500), rng.integers(0, 8, 500)
        np.testing.assert_array_equal(confusion(t, p), brute_force_confusion(t, p))

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            confusion([0, 1], [0])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            confusion([8], [0])


class TestClassMetrics:
    def test_two_class_example(self):
        m = class_metrics([[8, 2], [1, 9]], 0)
        assert (m.tp, m.fp, m.fn, m.tn) == (8, 1, 2, 9)
        assert m.precision == pytest.approx(8 / 9)
        assert m.sensitivity == pytest.approx(0.8)
        assert m.specificity == pytest.approx(0.9)
        assert m.f1 == pytest.approx(0.8421, abs=1e-4)
        assert m.f1 == pytest.approx(16 / 19)

    def test_diagonal_all_ones(self):
        for m in macro_report(np.diag([4, 1, 2, 3, 5, 6, 7, 8])).per_class:
            assert (m.precision, m.sensitivity, m.specificity, m.f1) == (1, 1, 1, 1)
            assert not m.degenerate

    def test_absent_class_flagged(self):
        cm = np.diag([3, 0, 2, 2, 2, 2, 2, 2])
        m = class_metrics(cm, 1)
        assert (m.precision, m.sensitivity, m.f1) == (0, 0, 0)
        assert m.specificity == 1
        assert set(m.degenerate) == {"precision", "sensitivity", "f1"}

    def test_counts_identities(self, rng):
        cm = rng.integers(0, 50, (8, 8))
        per = macro_report(cm).per_class
        assert sum(m.tp for m in per) == np.trace(cm)
        assert sum(m.tp + m.fn for m in per) == cm.sum()
        for m in per:
            for name in METRICS:
                assert 0 <= getattr(m, name) <= 1


def test_brute_force_oracle(rng):
    for _ in range(100):
        cm = rng.integers(0, 51, (8, 8))
        if rng.random() < 0.2:
            k = rng.integers(8)
            cm[k, :] = 0
            cm[:, k] = 0
        report = macro_report(cm)
        expected = np.array(brute_force_metrics(cm))
        got = np.array([[getattr(m, name) for name in METRICS] for m in report.per_class])
        np.testing.assert_allclose(got, expected, atol=1e-9, rtol=0)
        np.testing.assert_allclose([report.macro[m] for m in METRICS], expected.mean(axis=0), atol=1e-9)


def test_class_permutation(rng):
    cm = rng.integers(0, 30, (8, 8))
    perm = rng.permutation(8)
    a, b = macro_report(cm), macro_report(cm[np.ix_(perm, perm)])
    for new, old in enumerate(perm):
        assert b.per_class[new].as_dict() == pytest.approx(a.per_class[old].as_dict())
    assert b.macro == pytest.approx(a.macro, abs=1e-12)


def test_uniform_random_sensitivity():
    g = np.random.default_rng(2024)
    true = np.repeat(np.arange(8), 1250)
    pred = g.integers(0, 8, true.size)
    assert abs(macro_report(confusion(true, pred)).macro["sensitivity"] - 1 / 8) < 0.03


def test_weighted_average(rng):
    cm = np.diag([10, 10, 10, 10, 10, 10, 10, 10])
    cm[0, 1] = 30
    w = macro_report(cm, weighted=True)
    support = cm.sum(axis=1)
    sens = [m.sensitivity for m in w.per_class]
    assert w.macro["sensitivity"] == pytest.approx(np.dot(support, sens) / support.sum())
    assert w.weighting == "weighted"


def report_with_totals(precision, sensitivity, specificity, f1):
    base = macro_report(np.diag([1] * 8))
    return dataclasses.replace(base, macro=dict(precision=precision, sensitivity=sensitivity,
                                                specificity=specificity, f1=f1))


DENSENET = report_with_totals(0.9660, 0.9659, 0.9962, 0.9659)
RESNET = report_with_totals(0.9586, 0.9586, 0.9953, 0.9585)


class TestRendering:
    def test_total_row_format(self):
        total = format_report(DENSENET).splitlines()[-1].split()
        assert total == ["Total", "96.60", "96.59", "99.62", "96.59"]

    def test_row_order(self):
        lines = format_report(macro_report(np.diag([2] * 8))).splitlines()
        assert [ln.split()[0] for ln in lines[2:10]] == [lab.token for lab in SeriesLabel]
        assert lines[0].split()[:2] == ["Series", "Precision"]

    def test_densenet_marked_best(self):
        table = compare_models(RESNET, DENSENET, ("ResNet-50", "DenseNet-121"))
        assert comparison_marks(table) == [[False] * 4, [True] * 4]
        assert "96.60*" in table and "95.86*" not in table

    def test_mirrored(self):
        ab = compare_models(RESNET, DENSENET, ("R", "D")).splitlines()
        ba = compare_models(DENSENET, RESNET, ("D", "R")).splitlines()
        assert ab[2] == ba[3] and ab[3] == ba[2]

    def test_identical_unmarked(self):
        table = compare_models(DENSENET, DENSENET)
        assert comparison_marks(table) == [[False] * 4, [False] * 4]

    def test_class_order_mismatch(self):
        other = dataclasses.replace(DENSENET, class_names=tuple(reversed(DENSENET.class_names)))
        with pytest.raises(ValueError):
            compare_models(DENSENET, other)

    def test_confusion_text(self):
        text = confusion_to_text(np.eye(8, dtype=int) * 3)
        lines = text.splitlines()
        assert lines[0].split("\t")[1:5] == ["T1w-p", "T1w-a", "T1w-v", "T1w-d"]
        assert lines[1].split("\t") == ["T1w-p", "3", "0", "0", "0", "0", "0", "0", "0"]

    def test_json(self, tmp_path, rng):
        report = macro_report(rng.integers(0, 9, (8, 8)))
        write_report_json(report, tmp_path / "m.json", {"seed": 4})
        d = json.loads((tmp_path / "m.json").read_text())
        assert d["seed"] == 4 and len(d["classes"]) == 8
        assert d["total"]["f1"] == pytest.approx(report.macro["f1"])
        assert d["confusion"] == report.confusion.tolist()

    def test_plot_reproducible(self, tmp_path, rng):
        cm = rng.integers(0, 20, (8, 8))
        plot_confusion(cm, tmp_path / "a.png", "t")
        plot_confusion(cm, tmp_path / "b.png", "t")
        data = (tmp_path / "a.png").read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
        assert data == (tmp_path / "b.png").read_bytes()


def test_largest_off_diagonal():
    cm = np.diag([50] * 8)
    cm[3, 2] = 7
    cm[5, 1] = 4
    assert largest_off_diagonal(cm) == (3, 2)


def test_collapse_dwi_keeps_lowest_b():
    dwi = int(SeriesLabel.DWI)
    true = [0, dwi, dwi, dwi, dwi]
    pred = [0, 7, dwi, dwi, 0]
    studies = ["A", "A", "A", "B", "B"]
    bvals = [None, 800, 50, 1000, 100]
    t, p = collapse_dwi(true, pred, studies, bvals)
    assert t.tolist() == [0, dwi, dwi]
    assert p.tolist() == [0, dwi, 0]
