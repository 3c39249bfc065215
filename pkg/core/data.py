"""
Synthetic phantoms, normalization, partial-label extraction, patch sampling
and elastic augmentation.

Every randomized function takes an explicit numpy Generator; callers derive
it from the run seed so results are pure functions of (inputs, seed).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from core.exceptions import DataError, PhantomError, ShapeError
from core.models import LabelMap, LabelVolume, PhantomSpec, Subject, Volume
from core.seeding import make_rng

logger = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 1000
INTENSITY_RANGE = (0.2, 0.9)
MIN_INTENSITY_GAP = 0.05
CONTROL_SPACING = 8

Size3 = Tuple[int, int, int]


def _ellipsoid(shape: Size3, center: Sequence[float], radii: Sequence[float]) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return dist <= 1.0


def _intensity_means(count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` values in INTENSITY_RANGE, pairwise at least MIN_INTENSITY_GAP apart."""
    lo, hi = INTENSITY_RANGE
    slack = (hi - lo) - (count - 1) * MIN_INTENSITY_GAP
    if slack < 0:
        raise PhantomError(f"cannot separate {count} intensity levels by {MIN_INTENSITY_GAP}")
    base = np.sort(rng.uniform(0.0, slack, count)) + lo + MIN_INTENSITY_GAP * np.arange(count)
    return rng.permutation(base)


def generate_phantom(spec: PhantomSpec) -> Tuple[Volume, LabelVolume, LabelMap]:
    """Nested-ellipsoid scene with full labels 0..K and a map selecting P of them.

    Label 1 is a large central ellipsoid; labels 2..K are smaller ellipsoids
    placed inside it by rejection sampling, at least two voxels from its
    border and from each other, so every label is one connected component.
    """
    n = spec.size
    shape = (n, n, n)
    k = spec.num_structures
    atlas = spec.seed if spec.atlas_seed is None else spec.atlas_seed
    labels = np.zeros(shape, dtype=np.uint16)

    if k >= 1:
        geometry = make_rng(spec.seed, "phantom", "geometry")
        center = (n // 2,) * 3
        outer = _ellipsoid(shape, center, geometry.uniform(0.36, 0.44, 3) * n)
        labels[outer] = 1

        inside = ndimage.binary_erosion(outer, iterations=2)
        occupied = np.zeros(shape, dtype=bool)
        r_lo = max(1.5, 0.06 * n)
        r_hi = max(r_lo + 0.5, 0.10 * n)
        candidates = np.argwhere(inside)
        if k >= 2 and len(candidates) == 0:
            raise PhantomError(f"no interior room for {k - 1} structures at size {n}")
        nominal = make_rng(atlas, "atlas", "radii").uniform(r_lo, r_hi, (max(k - 1, 0), 3))
        for label in range(2, k + 1):
            for attempt in range(MAX_PLACEMENT_ATTEMPTS):
                radii = np.maximum(nominal[label - 2] * geometry.uniform(0.9, 1.1, 3), 1.0)
                c = candidates[geometry.integers(0, len(candidates))]
                blob = _ellipsoid(shape, c, radii)
                if (blob & ~inside).any():
                    continue
                if (ndimage.binary_dilation(blob, iterations=2) & occupied).any():
                    continue
                occupied |= blob
                labels[blob] = label
                logger.debug(f"Placed structure {label} after {attempt + 1} attempts")
                break
            else:
                raise PhantomError(
                    f"could not place structure {label} of {k} in {MAX_PLACEMENT_ATTEMPTS} attempts "
                    f"(size {n})")

    image = np.zeros(shape, dtype=np.float64)
    if k >= 1:
        means = _intensity_means(k, make_rng(atlas, "atlas", "intensity"))
        image[labels > 0] = means[labels[labels > 0].astype(np.intp) - 1]
    image += make_rng(spec.seed, "phantom", "noise").normal(0.0, spec.noise_sigma, shape)

    interior = list(range(2, k + 1))
    pool = interior if spec.partial_size <= len(interior) else list(range(1, k + 1))
    chosen = sorted(int(i) for i in make_rng(atlas, "atlas", "map").choice(
        pool, spec.partial_size, replace=False)) if spec.partial_size else []
    label_map = LabelMap({full_id: i + 1 for i, full_id in enumerate(chosen)})

    return Volume(image.astype(np.float32)), LabelVolume(labels, k + 1), label_map


def zscore_normalize(volume: Volume) -> Volume:
    """Zero mean, unit population std over all voxels."""
    x = volume.data.astype(np.float64)
    mean = x.mean()
    std = x.std()
    if not np.isfinite(std) or std == 0:
        raise DataError("cannot z-score a constant volume")
    return Volume(((x - mean) / std).astype(np.float32), volume.spacing)


def extract_partial(full: LabelVolume, label_map: LabelMap) -> LabelVolume:
    """Relabel mapped full ids to partial ids; everything else becomes background."""
    top = max([full.num_classes] + [k + 1 for k in label_map.mapping])
    lut = np.zeros(top, dtype=np.uint16)
    for full_id, partial_id in label_map.mapping.items():
        lut[full_id] = partial_id
    return LabelVolume(lut[full.data], label_map.num_classes, full.spacing)


def partial_labels(subject: Subject) -> LabelVolume:
    """Stored partial labels, or ones derived from the full labels and the subject's map."""
    if subject.partial is not None:
        return subject.partial
    if subject.labels is None or subject.label_map is None:
        raise DataError(f"subject {subject.subject_id} has neither partial labels nor full labels + map")
    return extract_partial(subject.labels, subject.label_map)


@dataclass
class PatchSample:
    """Aligned crops of one image and its label volumes."""
    image: Volume
    labels: Tuple[LabelVolume, ...]
    corner: Size3


def _as_size3(size: Union[int, Sequence[int]]) -> Size3:
    if isinstance(size, (int, np.integer)):
        return (int(size),) * 3
    size = tuple(int(s) for s in size)
    if len(size) != 3:
        raise ShapeError(f"patch size must have three extents, got {size}")
    return size


def _crop(volume, corner: Size3, size: Size3):
    region = tuple(slice(c, c + s) for c, s in zip(corner, size))
    if isinstance(volume, LabelVolume):
        return LabelVolume(volume.data[region], volume.num_classes, volume.spacing)
    return Volume(volume.data[region], volume.spacing)


def _check_aligned(image: Volume, labels: Sequence[LabelVolume]):
    for lab in labels:
        if lab.dims != image.dims:
            raise ShapeError(f"label dims {lab.dims} differ from image dims {image.dims}")


def sample_patch(image: Volume, *labels: LabelVolume, size: Union[int, Sequence[int]],
                 rng: np.random.Generator) -> PatchSample:
    """Crop at a uniformly random corner; the same corner cuts every volume."""
    size3 = _as_size3(size)
    _check_aligned(image, labels)
    if any(s > n for s, n in zip(size3, image.dims)) or min(size3) < 1:
        raise DataError(f"patch size {size3} does not fit volume {image.dims}")
    corner = tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(image.dims, size3))
    return PatchSample(_crop(image, corner, size3), tuple(_crop(lab, corner, size3) for lab in labels),
                       corner)


def center_patch(image: Volume, *labels: LabelVolume, size: Union[int, Sequence[int]]) -> PatchSample:
    size3 = _as_size3(size)
    _check_aligned(image, labels)
    if any(s > n for s, n in zip(size3, image.dims)):
        raise DataError(f"patch size {size3} does not fit volume {image.dims}")
    corner = tuple((n - s) // 2 for n, s in zip(image.dims, size3))
    return PatchSample(_crop(image, corner, size3), tuple(_crop(lab, corner, size3) for lab in labels),
                       corner)


def displacement_field(dims: Size3, magnitude: float, rng: np.random.Generator,
                       control_spacing: int = CONTROL_SPACING) -> np.ndarray:
    """Dense [3, D, H, W] field trilinearly interpolated from a uniform random control grid."""
    control_shape = tuple((n - 1) // control_spacing + 2 for n in dims)
    control = rng.uniform(-magnitude, magnitude, (3,) + control_shape)
    coords = np.meshgrid(*[np.arange(n, dtype=np.float64) / control_spacing for n in dims],
                         indexing="ij")
    return np.stack([ndimage.map_coordinates(control[axis], coords, order=1, mode="nearest")
                     for axis in range(3)])


def elastic_deform(image: Volume, *labels: LabelVolume, magnitude: float, rng: np.random.Generator,
                   control_spacing: int = CONTROL_SPACING) -> Tuple[Volume, Tuple[LabelVolume, ...]]:
    """Warp image (trilinear) and labels (nearest) with one random field; both read 0 outside the volume."""
    if magnitude < 0:
        raise DataError(f"deformation magnitude must be >= 0, got {magnitude}")
    _check_aligned(image, labels)
    if magnitude == 0:
        return (Volume(image.data.copy(), image.spacing),
                tuple(LabelVolume(lab.data.copy(), lab.num_classes, lab.spacing) for lab in labels))

    field = displacement_field(image.dims, magnitude, rng, control_spacing)
    coords = np.indices(image.dims, dtype=np.float64) + field
    warped = ndimage.map_coordinates(image.data, coords, order=1, mode="constant", cval=0.0)
    warped_labels = tuple(
        LabelVolume(ndimage.map_coordinates(lab.data, coords, order=0, mode="constant", cval=0),
                    lab.num_classes, lab.spacing)
        for lab in labels)
    return Volume(warped, image.spacing), warped_labels


@dataclass
class TrainingPatch:
    """One draw of the training stream: a [1, D, H, W] image and its integer targets."""
    index: int
    subject_id: str
    image: np.ndarray
    targets: Tuple[np.ndarray, ...]


@dataclass
class StreamItem:
    subject_id: str
    image: Volume
    labels: Tuple[LabelVolume, ...]


class PatchStream:
    """Deterministic sequence of augmented training patches.

    Draw ``i`` uses the RNG stream (seed, stage, "draw", i) and visits subjects
    in a per-epoch seeded permutation, so the sequence is independent of how
    many workers prefetch it.
    """

    def __init__(self, items: List[StreamItem], patch_size: int, seed: int, stage: str,
                 steps_per_epoch: int, augment_magnitude: float = 0.0, workers: int = 0):
        if not items:
            raise DataError("patch stream needs at least one subject")
        self.items = items
        self.patch_size = patch_size
        self.seed = seed
        self.stage = stage
        self.steps_per_epoch = max(1, steps_per_epoch)
        self.augment_magnitude = augment_magnitude
        self.workers = workers

    def _subject_index(self, index: int) -> int:
        epoch, offset = divmod(index, self.steps_per_epoch)
        order = make_rng(self.seed, self.stage, "order", epoch).permutation(len(self.items))
        return int(order[offset % len(self.items)])

    def draw(self, index: int) -> TrainingPatch:
        item = self.items[self._subject_index(index)]
        rng = make_rng(self.seed, self.stage, "draw", index)
        sample = sample_patch(item.image, *item.labels, size=self.patch_size, rng=rng)
        image, labels = sample.image, sample.labels
        if self.augment_magnitude > 0:
            image, labels = elastic_deform(image, *labels, magnitude=self.augment_magnitude, rng=rng)
        return TrainingPatch(index=index, subject_id=item.subject_id, image=image.data[None],
                             targets=tuple(lab.data.astype(np.intp) for lab in labels))

    def iterate(self, start: int, stop: int) -> Iterator[TrainingPatch]:
        if self.workers <= 0:
            for index in range(start, stop):
                yield self.draw(index)
            return
        chunk = self.workers * 4
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            for begin in range(start, stop, chunk):
                yield from executor.map(self.draw, range(begin, min(begin + chunk, stop)))


def phantom_subject(subject_id: str, spec: PhantomSpec, partial_only: bool = False) -> Subject:
    """Wrap a generated phantom as a subject with full or partial-only labels."""
    image, full, label_map = generate_phantom(spec)
    if partial_only:
        return Subject(subject_id, image, labels=None, partial=extract_partial(full, label_map),
                       label_map=label_map)
    return Subject(subject_id, image, labels=full, label_map=label_map)
