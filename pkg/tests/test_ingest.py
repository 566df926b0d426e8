import itertools
import shutil

import numpy as np
import pydicom
import pytest
from pydicom.uid import DeflatedExplicitVRLittleEndian, ImplicitVRLittleEndian

from mpmri_series.ingest import (DicomSlice, IngestError, IngestReport, Study, assemble_volume,
                                 classify_dwi_bucket, is_axial, read_labels_manifest, scan_study_tree,
                                 write_labels_manifest)
from mpmri_series.labels import SeriesLabel


def make_slices(n, step=7.8, shape=(4, 5), uid="1.2.3", start=0.0):
    return [
        DicomSlice(patient_id="P", study_uid="S", series_uid=uid, instance_number=k + 1,
                   image_position=(0.0, 0.0, start + k * step), orientation_cosines=(1, 0, 0, 0, 1, 0),
                   pixel_spacing=(1.5, 1.5), slice_spacing=step,
                   pixels=np.full(shape, float(k), dtype=np.float32))
        for k in range(n)
    ]


class TestIsAxial:
    def test_canonical_axial(self):
        assert is_axial((1, 0, 0, 0, 1, 0))

    def test_coronal(self):
        assert not is_axial((1, 0, 0, 0, 0, 1))

    def test_sagittal(self):
        assert not is_axial((0, 1, 0, 0, 0, 1))

    def test_small_tilt(self):
        cos = (0.999, 0.045, 0, -0.045, 0.999, 0)
        normal = np.cross(cos[:3], cos[3:])
        assert abs(normal[2]) == pytest.approx(0.999 ** 2 + 0.045 ** 2)
        assert is_axial(cos)

    def test_threshold_boundary(self):
        # rotate the plane about x by angle t: |normal.z| = cos t
        for t, expected in ((np.arccos(0.91), True), (np.arccos(0.89), False)):
            cos = (1, 0, 0, 0, np.cos(t), np.sin(t))
            assert is_axial(cos) is expected

    def test_non_unit_names_series(self):
        with pytest.raises(IngestError, match="1.2.840.99"):
            is_axial((2, 0, 0, 0, 1, 0), series_uid="1.2.840.99")


class TestDwiBucket:
    @pytest.mark.parametrize("b,bucket", [(0, "low"), (50, "low"), (200, "low"), (200.5, "intermediate"),
                                          (400, "intermediate"), (800, "intermediate"), (800.1, "high"),
                                          (1000, "high"), (1400, "high")])
    def test_ranges(self, b, bucket):
        assert classify_dwi_bucket(b) == bucket

    def test_above_range_warns(self, caplog):
        assert classify_dwi_bucket(2000) == "high"
        assert "above 1400" in caplog.text

    def test_negative(self):
        with pytest.raises(IngestError):
            classify_dwi_bucket(-1)


class TestAssemble:
    def test_regular_stack(self):
        vol = assemble_volume(make_slices(36))
        assert vol.shape == (4, 5, 36)
        assert vol.spacing == (1.5, 1.5, pytest.approx(7.8))
        assert 35 * 7.8 == pytest.approx(273.0)
        assert not vol.warnings

    def test_reverse_order_identical(self):
        slices = make_slices(10)
        a = assemble_volume(slices)
        b = assemble_volume(slices[::-1])
        np.testing.assert_array_equal(a.voxels, b.voxels)
        assert a.spacing == b.spacing

    def test_any_permutation_identical(self, rng):
        slices = make_slices(7, step=3.0)
        ref = assemble_volume(slices)
        for _ in range(20):
            perm = [slices[i] for i in rng.permutation(len(slices))]
            np.testing.assert_array_equal(assemble_volume(perm).voxels, ref.voxels)

    def test_sorted_along_normal(self):
        vol = assemble_volume(make_slices(5)[::-1])
        assert [vol.voxels[0, 0, k] for k in range(5)] == [0, 1, 2, 3, 4]

    def test_duplicate_positions(self):
        s = make_slices(2, step=0.0)
        with pytest.raises(IngestError, match=r"duplicate.*\[1, 2\]"):
            assemble_volume(s)

    def test_inconsistent_shape(self):
        s = make_slices(3)
        s[1].pixels = np.zeros((4, 6), dtype=np.float32)
        with pytest.raises(IngestError, match="in-plane shape"):
            assemble_volume(s)

    def test_too_few(self):
        with pytest.raises(IngestError):
            assemble_volume(make_slices(1))

    def test_gap_flagged(self):
        s = make_slices(10)
        del s[4]
        vol = assemble_volume(s)
        assert vol.shape[2] == 9
        assert vol.spacing[2] == pytest.approx(7.8)
        assert len(vol.warnings) == 1


class TestManifest:
    def test_round_trip(self, tmp_path):
        labels = {"1.2": SeriesLabel.T2, "1.3": SeriesLabel.DWI}
        write_labels_manifest(labels, tmp_path / "l.tsv")
        assert read_labels_manifest(tmp_path / "l.tsv") == labels

    def test_bad_token(self, tmp_path):
        (tmp_path / "l.tsv").write_text("1.2\tT3\n")
        with pytest.raises(IngestError, match="l.tsv:1"):
            read_labels_manifest(tmp_path / "l.tsv")


class TestScan:
    def test_empty_directory(self, tmp_path):
        report = IngestReport()
        assert scan_study_tree(tmp_path, report=report) == []
        assert report.warnings == []

    def test_missing_root(self, tmp_path):
        with pytest.raises(IngestError):
            scan_study_tree(tmp_path / "nope")

    def test_phantom_tree(self, phantom_tree, small_studies):
        labels = read_labels_manifest(phantom_tree / "labels.tsv")
        studies = scan_study_tree(phantom_tree, labels)
        assert len(studies) == 2
        assert [len(s.series) for s in studies] == [10, 10]
        for s in studies:
            assert all(v.label is not None for v in s.series)
            assert all(v.study_uid == s.study_uid and v.patient_id == s.patient_id for v in s.series)
        expected = {s.study_uid: s.body_region for s in small_studies}
        assert {s.study_uid: s.body_region for s in studies} == expected

    def test_dwi_label_for_every_bvalue(self, phantom_tree):
        studies = scan_study_tree(phantom_tree, read_labels_manifest(phantom_tree / "labels.tsv"))
        for s in studies:
            dwi = [v for v in s.series if v.b_value is not None]
            assert len(dwi) == 3
            assert {classify_dwi_bucket(v.b_value) for v in dwi} == {"low", "intermediate", "high"}
            assert all(v.label == SeriesLabel.DWI for v in dwi)

    def test_non_dicom_skipped(self, phantom_tree, tmp_path):
        tree = tmp_path / "t"
        shutil.copytree(phantom_tree, tree)
        (tree / "notes.txt").write_text("not a dicom file")
        report = IngestReport()
        studies = scan_study_tree(tree, report=report)
        assert report.non_dicom_skipped == 2  # notes.txt + labels.tsv
        assert report.warnings == []
        assert sum(len(s.series) for s in studies) == 20

    def test_truncated_file(self, phantom_tree, tmp_path):
        tree = tmp_path / "t"
        shutil.copytree(phantom_tree, tree)
        files = sorted(tree.rglob("*.dcm"))
        victim = files[17]
        data = victim.read_bytes()
        victim.write_bytes(data[: len(data) - 200])
        victim_series = pydicom.dcmread(files[16], stop_before_pixels=True).SeriesInstanceUID
        report = IngestReport()
        studies = scan_study_tree(tree, report=report)
        assert len(report.warnings) == 1
        uids = {v.series_uid for s in studies for v in s.series}
        assert len(uids) == 19 and victim_series not in uids
        assert report.exclusions["unreadable_pixel_data"] == [victim_series]

    def test_non_axial_excluded(self, phantom_tree, tmp_path):
        tree = tmp_path / "t"
        shutil.copytree(phantom_tree, tree)
        series_dir = sorted(p for p in tree.rglob("SERIES_T2") if p.is_dir())[0]
        for f in series_dir.glob("*.dcm"):
            ds = pydicom.dcmread(f)
            ds.ImageOrientationPatient = [1, 0, 0, 0, 0, -1]
            ds.ImagePositionPatient = [0.0, float(ds.InstanceNumber) * 7.8, 0.0]
            ds.save_as(f)
        report = IngestReport()
        studies = scan_study_tree(tree, report=report)
        assert len(report.exclusions["non_axial"]) == 1
        for s in studies:
            for v in s.series:
                assert v.series_uid not in report.exclusions["non_axial"]
        # series count equals the distinct series that passed filtering
        assert sum(len(s.series) for s in studies) == report.series == 19

    @pytest.mark.parametrize("syntax", [ImplicitVRLittleEndian, DeflatedExplicitVRLittleEndian])
    def test_other_transfer_syntaxes(self, phantom_tree, tmp_path, syntax):
        tree = tmp_path / "t"
        shutil.copytree(phantom_tree, tree)
        ref = {v.series_uid: v.voxels for s in scan_study_tree(phantom_tree) for v in s.series}
        for f in tree.rglob("*.dcm"):
            ds = pydicom.dcmread(f)
            ds.file_meta.TransferSyntaxUID = syntax
            ds.save_as(f, enforce_file_format=True)
        got = {v.series_uid: v.voxels for s in scan_study_tree(tree) for v in s.series}
        assert got.keys() == ref.keys()
        for uid in ref:
            np.testing.assert_array_equal(got[uid], ref[uid])


def test_study_rejects_foreign_series():
    vol = assemble_volume(make_slices(3))
    with pytest.raises(IngestError):
        Study(study_uid="other", patient_id="P", series=(vol,))


def test_dwi_bucket_monotone():
    buckets = ["low", "intermediate", "high"]
    values = np.linspace(0, 1400, 2801)
    idx = [buckets.index(classify_dwi_bucket(b)) for b in values]
    assert all(a <= b for a, b in itertools.pairwise(idx))
