"""
Volume file formats: the native MSEGVOL1 container, a read-only NIfTI-1 subset,
label-map text files and subject directories.

Native layout (all little-endian)::

    magic   8s      b"MSEGVOL1"
    dims    3 x u32 (D, H, W)
    spacing 3 x f32 mm per voxel along D, H, W
    dtype   u8      0 = f32 image, 1 = u16 labels
    voxels  D*H*W values, W fastest

NIfTI-1 ingestion honours dim[1..3] and pixdim[1..3] only; orientation
matrices are ignored, so volumes must already be aligned. NIfTI x/y/z map to
W/H/D.
"""

import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional, Union

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError

from core.exceptions import LabelError, ShapeError, VolumeFormatError
from core.models import LabelMap, LabelVolume, Subject, Volume

logger = logging.getLogger(__name__)

MAGIC = b"MSEGVOL1"
HEADER = struct.Struct("<8s3I3fB")
DTYPE_IMAGE = 0
DTYPE_LABELS = 1
MAX_VOXELS = 2 ** 31

_NATIVE_DTYPES = {DTYPE_IMAGE: np.dtype("<f4"), DTYPE_LABELS: np.dtype("<u2")}
_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}

IMAGE_FILE = "image.msegvol"
LABELS_FILE = "labels.msegvol"
PARTIAL_FILE = "partial.msegvol"
MAP_FILE = "labels.map"

PathLike = Union[str, Path]
AnyVolume = Union[Volume, LabelVolume]


def write_volume(path: PathLike, volume: AnyVolume):
    """Write an image or label volume in the native format."""
    path = Path(path)
    if isinstance(volume, LabelVolume):
        code = DTYPE_LABELS
    elif isinstance(volume, Volume):
        code = DTYPE_IMAGE
    else:
        raise TypeError(f"cannot write {type(volume).__name__}")
    payload = np.ascontiguousarray(volume.data, dtype=_NATIVE_DTYPES[code])
    d, h, w = volume.dims
    header = HEADER.pack(MAGIC, d, h, w, *volume.spacing, code)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes(order="C"))
    logger.debug(f"Wrote {path} ({'labels' if code else 'image'} {volume.dims})")


def _read_native(raw: bytes, path: Path, num_classes: Optional[int]) -> AnyVolume:
    if len(raw) < HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, d, h, w, sd, sh, sw, code = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if code not in _NATIVE_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported dtype code {code}")
    if min(d, h, w) == 0:
        raise VolumeFormatError(f"{path}: zero extent in dims {(d, h, w)}")
    count = d * h * w
    if count > MAX_VOXELS:
        raise VolumeFormatError(f"{path}: dims {(d, h, w)} overflow the {MAX_VOXELS} voxel limit")
    dtype = _NATIVE_DTYPES[code]
    expected = HEADER.size + count * dtype.itemsize
    if len(raw) < expected:
        raise VolumeFormatError(f"{path}: truncated payload, {len(raw)} of {expected} bytes")
    if len(raw) > expected:
        raise VolumeFormatError(f"{path}: {len(raw) - expected} trailing bytes after payload")

    data = np.frombuffer(raw, dtype=dtype, count=count, offset=HEADER.size).reshape(d, h, w)
    spacing = (float(sd), float(sh), float(sw))
    if code == DTYPE_IMAGE:
        return Volume(data.astype(np.float32), spacing)
    classes = num_classes if num_classes is not None else int(data.max()) + 1
    return LabelVolume(data.astype(np.uint16), classes, spacing)


def _read_nifti(path: Path, as_labels: Optional[bool], num_classes: Optional[int]) -> AnyVolume:
    if path.name.endswith(".gz"):
        raise VolumeFormatError(f"{path}: compressed NIfTI is not supported")
    try:
        img = nib.load(str(path))
        header = img.header
        if int(header["sizeof_hdr"]) != 348:
            raise VolumeFormatError(f"{path}: not a NIfTI-1 header")
        code = int(header["datatype"])
        if code not in _NIFTI_DTYPES:
            raise VolumeFormatError(f"{path}: unsupported NIfTI datatype code {code}")
        dim = [int(n) for n in header["dim"]]
        ndim = dim[0]
        if ndim < 3 or any(n != 1 for n in dim[4:ndim + 1]):
            raise VolumeFormatError(f"{path}: expected a 3D volume, got dim {dim[:ndim + 1]}")
        nx, ny, nz = dim[1:4]
        if nx * ny * nz > MAX_VOXELS:
            raise VolumeFormatError(f"{path}: dims {(nx, ny, nz)} overflow")
        raw = np.asanyarray(img.dataobj.get_unscaled())
    except VolumeFormatError:
        raise
    except (ImageFileError, OSError, EOFError, ValueError) as e:
        raise VolumeFormatError(f"{path}: unreadable NIfTI-1 file: {e}") from e

    data = np.transpose(raw.reshape(nx, ny, nz, order="A"), (2, 1, 0))
    px, py, pz = (float(v) for v in header["pixdim"][1:4])
    if min(px, py, pz) <= 0:
        raise VolumeFormatError(f"{path}: non-positive pixdim {(px, py, pz)}")
    spacing = (pz, py, px)

    labels = as_labels if as_labels is not None else code != 16
    if not labels:
        return Volume(data.astype(np.float32), spacing)
    if code == 16:
        raise VolumeFormatError(f"{path}: float32 NIfTI cannot be read as labels")
    if data.size and int(data.min()) < 0:
        raise LabelError(f"{path}: negative label ids")
    classes = num_classes if num_classes is not None else int(data.max()) + 1
    return LabelVolume(data.astype(np.uint16), classes, spacing)


def read_volume(path: PathLike, num_classes: Optional[int] = None,
                as_labels: Optional[bool] = None) -> AnyVolume:
    """Read a native or NIfTI-1 volume; the format is detected from the content.

    Integer NIfTI datatypes are read as labels unless ``as_labels`` is False.
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError as e:
        raise VolumeFormatError(f"volume not found: {path}") from e

    if raw[:len(MAGIC)] == MAGIC:
        volume = _read_native(raw, path, num_classes)
    elif len(raw) >= 4 and struct.unpack_from("<i", raw, 0)[0] == 348 or path.suffix == ".nii":
        volume = _read_nifti(path, as_labels, num_classes)
    else:
        raise VolumeFormatError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")

    if as_labels is True and isinstance(volume, Volume):
        raise VolumeFormatError(f"{path}: holds an intensity image, not labels")
    return volume


def read_label_map(path: PathLike) -> LabelMap:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise LabelError(f"label map not found: {path}") from e
    return LabelMap.from_text(text)


def write_label_map(path: PathLike, label_map: LabelMap):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(label_map.to_text(), encoding="utf-8")


def write_subject(directory: PathLike, subject: Subject) -> List[Path]:
    """Write a subject as image / labels / partial / map files; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = [directory / IMAGE_FILE]
    write_volume(written[0], subject.image)
    if subject.labels is not None:
        write_volume(directory / LABELS_FILE, subject.labels)
        written.append(directory / LABELS_FILE)
    if subject.partial is not None:
        write_volume(directory / PARTIAL_FILE, subject.partial)
        written.append(directory / PARTIAL_FILE)
    if subject.label_map is not None:
        write_label_map(directory / MAP_FILE, subject.label_map)
        written.append(directory / MAP_FILE)
    return written


def read_subject(directory: PathLike) -> Subject:
    directory = Path(directory)
    image = read_volume(directory / IMAGE_FILE)
    if not isinstance(image, Volume):
        raise VolumeFormatError(f"{directory / IMAGE_FILE} does not hold an intensity image")

    def labels_at(name: str) -> Optional[LabelVolume]:
        path = directory / name
        if not path.exists():
            return None
        labels = read_volume(path, as_labels=True)
        if labels.dims != image.dims:
            raise ShapeError(f"{path}: dims {labels.dims} differ from image {image.dims}")
        return labels

    label_map = read_label_map(directory / MAP_FILE) if (directory / MAP_FILE).exists() else None
    return Subject(subject_id=directory.name, image=image, labels=labels_at(LABELS_FILE),
                   partial=labels_at(PARTIAL_FILE), label_map=label_map)


def list_subject_dirs(root: PathLike) -> List[Path]:
    return list_subject_dirs_with(root, IMAGE_FILE)


def read_dataset(root: PathLike) -> List[Subject]:
    """All subjects under ``root`` in name order."""
    subjects = [read_subject(d) for d in list_subject_dirs(root)]
    logger.info(f"Loaded {len(subjects)} subjects from {root}")
    return subjects


def read_label_dir(root: PathLike, filename: str = LABELS_FILE) -> Dict[str, LabelVolume]:
    """Label volumes keyed by subject.

    Accepts subject directories holding ``filename`` as well as flat
    ``<subject>.msegvol`` / ``<subject>.nii`` files directly under ``root``.
    """
    root = Path(root)
    out: Dict[str, LabelVolume] = {}
    for directory in list_subject_dirs_with(root, filename):
        out[directory.name] = read_volume(directory / filename, as_labels=True)
    for path in sorted(root.iterdir()):
        if path.is_file() and path.suffix in (".msegvol", ".nii"):
            if path.stem in out:
                raise VolumeFormatError(f"subject {path.stem} appears both as a directory and as {path}")
            out[path.stem] = read_volume(path, as_labels=True)
    return out


def list_subject_dirs_with(root: PathLike, filename: str) -> List[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"directory not found: {root}")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / filename).exists())
