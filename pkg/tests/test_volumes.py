import struct

import numpy as np
import pytest

from core.exceptions import LabelError, VolumeFormatError
from core.models import LabelMap, LabelVolume, Subject, Volume
from core.volumes import (
    HEADER, IMAGE_FILE, LABELS_FILE, MAP_FILE, read_dataset, read_label_dir, read_label_map, read_subject,
    read_volume, write_label_map, write_subject, write_volume,
)


def _nifti_bytes(data_xyz: np.ndarray, datatype: int, bitpix: int, pixdim=(1.5, 2.0, 2.5)) -> bytes:
    """Single-file NIfTI-1: 348-byte header, 4-byte extension flag, data at offset 352."""
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    nx, ny, nz = data_xyz.shape
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, datatype)
    struct.pack_into("<h", header, 72, bitpix)
    struct.pack_into("<8f", header, 76, 1.0, *pixdim, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<f", header, 112, 1.0)
    header[344:348] = b"n+1\x00"
    return bytes(header) + b"\x00" * 4 + data_xyz.tobytes(order="F")


class TestNativeFormat:
    def test_image_round_trip(self, tmp_path, rng):
        volume = Volume(rng.standard_normal((3, 4, 5)), spacing=(1.0, 0.5, 2.0))
        path = tmp_path / "image.msegvol"
        write_volume(path, volume)
        back = read_volume(path)
        assert isinstance(back, Volume)
        np.testing.assert_array_equal(back.data, volume.data)
        assert back.spacing == (1.0, 0.5, 2.0)

        again = tmp_path / "again.msegvol"
        write_volume(again, back)
        assert again.read_bytes() == path.read_bytes()

    def test_labels_round_trip(self, tmp_path, rng):
        labels = LabelVolume(rng.integers(0, 300, (4, 4, 2)), num_classes=300)
        path = tmp_path / "labels.msegvol"
        write_volume(path, labels)
        back = read_volume(path, num_classes=300)
        assert isinstance(back, LabelVolume)
        assert back.data.dtype == np.uint16
        np.testing.assert_array_equal(back.data, labels.data)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "v.msegvol"
        write_volume(path, Volume(np.zeros((2, 3, 4))))
        raw = path.read_bytes()
        assert raw[:8] == b"MSEGVOL1"
        assert struct.unpack_from("<3I", raw, 8) == (2, 3, 4)
        assert len(raw) == HEADER.size + 2 * 3 * 4 * 4

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "v.msegvol"
        write_volume(path, Volume(np.zeros((2, 2, 2))))
        path.write_bytes(b"XXXXVOL1" + path.read_bytes()[8:])
        with pytest.raises(VolumeFormatError, match="magic"):
            read_volume(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "v.msegvol"
        write_volume(path, Volume(np.zeros((2, 2, 2))))
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(VolumeFormatError, match="truncated"):
            read_volume(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "v.msegvol"
        write_volume(path, Volume(np.zeros((2, 2, 2))))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(VolumeFormatError, match="trailing"):
            read_volume(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(VolumeFormatError):
            read_volume(tmp_path / "absent.msegvol")


class TestNifti:
    def test_float_image_axes_and_spacing(self, tmp_path):
        data = np.arange(64, dtype=np.float32).reshape((4, 4, 4), order="F")
        path = tmp_path / "scan.nii"
        path.write_bytes(_nifti_bytes(data, datatype=16, bitpix=32))
        volume = read_volume(path)
        assert isinstance(volume, Volume)
        assert volume.dims == (4, 4, 4)
        np.testing.assert_array_equal(volume.data.reshape(-1), np.arange(64, dtype=np.float32))
        assert volume.spacing == (2.5, 2.0, 1.5)

    def test_int16_read_as_labels(self, tmp_path):
        data = np.zeros((4, 2, 2), dtype=np.int16)
        data[3, 1, 0] = 5
        path = tmp_path / "seg.nii"
        path.write_bytes(_nifti_bytes(data, datatype=4, bitpix=16))
        labels = read_volume(path)
        assert isinstance(labels, LabelVolume)
        assert labels.dims == (2, 2, 4)
        assert labels.data[0, 1, 3] == 5
        assert labels.num_classes == 6

    def test_unsupported_datatype(self, tmp_path):
        path = tmp_path / "double.nii"
        path.write_bytes(_nifti_bytes(np.zeros((2, 2, 2), dtype=np.float64), datatype=64, bitpix=64))
        with pytest.raises(VolumeFormatError):
            read_volume(path)

    def test_float_cannot_be_labels(self, tmp_path):
        path = tmp_path / "scan.nii"
        path.write_bytes(_nifti_bytes(np.zeros((2, 2, 2), dtype=np.float32), datatype=16, bitpix=32))
        with pytest.raises(VolumeFormatError):
            read_volume(path, as_labels=True)


class TestLabelMapText:
    def test_round_trip(self, tmp_path):
        label_map = LabelMap({7: 2, 3: 1, 12: 3})
        path = tmp_path / "labels.map"
        write_label_map(path, label_map)
        assert read_label_map(path).mapping == label_map.mapping

    def test_comments_and_blank_lines(self):
        label_map = LabelMap.from_text("# header\n\n4 1  # caudate\n9 2\n")
        assert label_map.mapping == {4: 1, 9: 2}
        assert label_map.num_classes == 3

    def test_duplicate_full_id(self):
        with pytest.raises(LabelError):
            LabelMap.from_text("4 1\n4 2\n")

    def test_partial_ids_must_be_contiguous(self):
        with pytest.raises(LabelError):
            LabelMap.from_text("4 1\n9 3\n")

    def test_background_cannot_be_mapped(self):
        with pytest.raises(LabelError):
            LabelMap({0: 1})

    def test_malformed_line(self):
        with pytest.raises(LabelError, match="line 2"):
            LabelMap.from_text("4 1\nnine 2\n")


class TestSubjectDirectories:
    def _subject(self, rng, name="subject_000"):
        return Subject(name, Volume(rng.standard_normal((4, 4, 4))),
                       labels=LabelVolume(rng.integers(0, 3, (4, 4, 4)), 3),
                       label_map=LabelMap({2: 1}))

    def test_write_then_read(self, tmp_path, rng):
        subject = self._subject(rng)
        written = write_subject(tmp_path / subject.subject_id, subject)
        assert [p.name for p in written] == [IMAGE_FILE, LABELS_FILE, MAP_FILE]
        back = read_subject(tmp_path / subject.subject_id)
        np.testing.assert_array_equal(back.image.data, subject.image.data)
        np.testing.assert_array_equal(back.labels.data, subject.labels.data)
        assert back.partial is None
        assert back.label_map.mapping == {2: 1}

    def test_dataset_is_sorted_by_name(self, tmp_path, rng):
        for name in ("subject_002", "subject_000", "subject_001"):
            write_subject(tmp_path / name, self._subject(rng, name))
        (tmp_path / "notes").mkdir()
        assert [s.subject_id for s in read_dataset(tmp_path)] == ["subject_000", "subject_001", "subject_002"]

    def test_label_dir_accepts_flat_files(self, tmp_path, rng):
        write_subject(tmp_path / "subject_000", self._subject(rng))
        write_volume(tmp_path / "subject_001.msegvol", LabelVolume(np.zeros((4, 4, 4), dtype=np.uint16), 3))
        labels = read_label_dir(tmp_path)
        assert sorted(labels) == ["subject_000", "subject_001"]

    def test_label_dir_rejects_duplicates(self, tmp_path, rng):
        write_subject(tmp_path / "subject_000", self._subject(rng))
        write_volume(tmp_path / "subject_000.msegvol", LabelVolume(np.zeros((4, 4, 4), dtype=np.uint16), 3))
        with pytest.raises(VolumeFormatError):
            read_label_dir(tmp_path)

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_dataset(tmp_path / "absent")
