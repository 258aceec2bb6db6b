"""Datasets and vertical feature partitioning.

Covers the data plumbing for split training: IDX file ingestion (the
classic big-endian ubyte format, gzipped or raw), a seeded synthetic
image corpus for offline runs, rectangular feature partitions that
assign each client a disjoint slice of every image, the auxiliary
labeled subset available to adversaries, and deterministic minibatch
scheduling.

Images are float arrays shaped (N, C, H, W) with values in [0, 1].
Labels live next to the images in RawDataset but are deliberately kept
off the per-client views produced by partition_features: in split
training only the server holds labels.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ConfigError, FormatError, ScarcityError, SchemeError
from .utils import rng_for

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class RawDataset:
    """Centralized dataset before partitioning: images plus labels."""

    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise AlignmentError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise AlignmentError(
                f"label count {self.labels.shape} does not match {len(self.images)} images"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise AlignmentError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: np.ndarray) -> "RawDataset":
        return RawDataset(self.images[indices], self.labels[indices], self.num_classes)


def _open_maybe_gzip(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx(images_path, labels_path, num_classes: int | None = None) -> RawDataset:
    """Load an IDX image/label file pair into a RawDataset.

    Accepts gzipped or raw files. Image payloads are uint8 and get
    normalized to [0, 1] float32 with a channel axis added.

    Raises:
        FormatError: wrong magic number or truncated payload.
        AlignmentError: image and label counts disagree.
    """
    with _open_maybe_gzip(images_path) as f:
        header = f.read(16)
        if len(header) != 16:
            raise FormatError(f"{images_path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"{images_path}: bad image magic 0x{magic:08x}")
        payload = f.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise FormatError(f"{images_path}: truncated image payload")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)

    with _open_maybe_gzip(labels_path) as f:
        header = f.read(8)
        if len(header) != 8:
            raise FormatError(f"{labels_path}: truncated IDX header")
        magic, label_count = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"{labels_path}: bad label magic 0x{magic:08x}")
        payload = f.read(label_count)
        if len(payload) != label_count:
            raise FormatError(f"{labels_path}: truncated label payload")
        labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)

    if count != label_count:
        raise AlignmentError(f"{count} images but {label_count} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if label_count else 0
    return RawDataset(images.astype(np.float32) / 255.0, labels, num_classes)


def save_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write an IDX image/label pair (gzipped iff the path ends in .gz)."""
    arr = np.clip(np.round(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 4:
        arr = arr[:, 0]
    n, rows, cols = arr.shape
    labels = np.asarray(labels).astype(np.uint8)
    if len(labels) != n:
        raise AlignmentError(f"{n} images but {len(labels)} labels")

    def _writer(path):
        return gzip.open(path, "wb") if str(path).endswith(".gz") else open(path, "wb")

    with _writer(images_path) as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(arr.tobytes())
    with _writer(labels_path) as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(labels.tobytes())


def _smooth_field(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    # Low-frequency field: coarse noise blown up by nearest-neighbor repeat,
    # then box-blurred once. Gives each class a faint global texture.
    coarse_h, coarse_w = max(2, height // 4), max(2, width // 4)
    coarse = rng.uniform(0.0, 1.0, size=(coarse_h, coarse_w))
    fy = math.ceil(height / coarse_h)
    fx = math.ceil(width / coarse_w)
    up = np.repeat(np.repeat(coarse, fy, axis=0), fx, axis=1)[:height, :width]
    padded = np.pad(up, 1, mode="edge")
    out = np.zeros_like(up)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += padded[dy : dy + height, dx : dx + width]
    return out / 9.0


def _glyph_geometry(cls: int, num_classes: int, height: int, width: int):
    # Deterministic glyph windows: classes spread across two bands so that a
    # narrow vertical slice sees only some classes' glyphs. Class 0 lands at
    # the left, which keeps the default target label inferable from the
    # left-most client slices.
    size = max(3, int(round(min(height, width) * 0.32)))
    per_band = (num_classes + 1) // 2
    band = 0 if cls < per_band else 1
    pos = cls if band == 0 else cls - per_band
    denom = max(1, per_band - 1)
    col_c = size // 2 + pos * (width - size) // denom
    row_c = height // 4 if band == 0 else (3 * height) // 4
    top = min(max(0, row_c - size // 2), height - size)
    left = min(max(0, col_c - size // 2), width - size)
    return top, left, size


def make_synthetic(
    num_train: int,
    num_test: int,
    num_classes: int = 10,
    image_shape: tuple[int, int, int] = (1, 28, 28),
    seed: int = 0,
    noise: float = 0.08,
) -> tuple[RawDataset, RawDataset]:
    """Generate a seeded synthetic image classification corpus.

    Every image shares one faint smooth background field; class identity
    lives in a windowed glyph plus a thin index stripe on the right edge.
    Classes within a band share the glyph pattern and differ only by
    window position, glyph cells drop out per sample, and samples add
    vertical jitter, brightness scaling, and pixel noise.

    Classes 0 and 1 are an overlapping pair with no glyph and no stripe;
    their identity lives entirely in sparse marks on the left feature
    columns. Both classes light one two-pixel beacon per left strip at a
    random column inside a small zone, present per strip with high
    probability; class 1 additionally lights one fixed two-pixel extra
    mark per strip, and each extra mark vanishes as a unit per sample.
    A class 1 row whose extra marks all vanish is genuinely
    indistinguishable from class 0, so a narrow slice confuses the pair
    at exactly the rate its local extra marks drop out, which is the
    regime split-training label inference lives in. The other classes
    occasionally emit a ghost row (glyph and stripe fully suppressed),
    so a row with empty left columns is evidence against the pair, not
    weak evidence for it.
    """
    channels, height, width = image_shape
    if channels != 1:
        raise ConfigError("synthetic generator produces single-channel images")
    proto_rng = rng_for(seed, "synthetic", "prototypes")
    background = _smooth_field(proto_rng, height, width) * 0.35
    stripes = np.zeros((num_classes, height, width))
    windows: list[tuple[int, int, int, int, np.ndarray]] = []
    per_band = (num_classes + 1) // 2
    # right-edge index stripe: keeps the full image linearly separable even
    # where neighboring glyphs collide under jitter, while staying invisible
    # to clients that only hold left-side feature slices
    stripe_w = max(1, width // 14)
    stripe_h = max(3, height // 5)
    stripe_col = width - stripe_w - 2
    stripe_span = max(1, height - stripe_h - 4)
    # the overlapping pair only exists on canvases large enough to carry
    # the marks clear of the glyph bands; tiny toy shapes skip it
    marked_pair = num_classes >= 4 and height >= 20 and width >= 20
    mid = height // 2
    lower = (3 * height) // 4 - 2
    # one beacon zone and one extra-mark column per left strip, kept clear
    # of the glyph bands, the stripe column, and each other; beacons float
    # over three candidate columns so their exact position is per-sample
    beacon_zones = (
        (5, int(width * 0.04)),
        (2, int(width * 0.22)),
        (lower, int(width * 0.36)),
    )
    extra_blocks = (
        ((mid, int(width * 0.08)), (mid + 2, int(width * 0.08))),
        ((lower, int(width * 0.26)), (lower + 2, int(width * 0.26))),
        ((mid, int(width * 0.47)), (mid + 2, int(width * 0.47))),
    )
    pattern = np.zeros((1, 1))
    for cls in range(num_classes):
        top, left, size = _glyph_geometry(cls, num_classes, height, width)
        cells = max(2, size // 3)
        if cls % per_band == 0:
            pattern = (proto_rng.uniform(size=(cells, cells)) > 0.45).astype(float)
        # classes within a band share one pattern and differ only by window
        # position; windows are wider than their spacing, so a narrow slice
        # sees overlapping fragments of neighboring classes
        if marked_pair and cls <= 1:
            # the pair carries no glyph and no stripe; both identities
            # live entirely in the per-sample marks painted below
            windows.append((0, 0, 0, cells, pattern))
            continue
        windows.append((top, left, size, cells, pattern))
        srow = 2 + int(round(cls * stripe_span / max(1, num_classes - 1)))
        srow = min(srow, height - stripe_h - 2)
        stripes[cls, srow : srow + stripe_h, stripe_col : stripe_col + stripe_w] = 0.45

    def _split(count: int, tag: str) -> RawDataset:
        rng = rng_for(seed, "synthetic", tag)
        labels = rng.integers(0, num_classes, size=count)
        images = np.empty((count, 1, height, width), dtype=np.float32)
        shifts = rng.integers(-2, 3, size=count)
        brightness = rng.uniform(0.8, 1.1, size=count)
        pixel_noise = rng.normal(0.0, noise, size=(count, height, width))
        mark_draws = rng.uniform(size=(count, 6))
        beacon_cols = rng.integers(0, 3, size=(count, 3))
        ghost_draws = rng.uniform(size=count)
        for i in range(count):
            cls = labels[i]
            top, left, size, cells, pat = windows[cls]
            # per-sample cell dropout: intra-class appearance is multimodal,
            # and losing edge cells shifts the glyph's apparent position
            keep = rng.uniform(size=(cells, cells)) > 0.3
            rep = math.ceil(size / cells)
            tile = np.repeat(np.repeat(pat * keep, rep, axis=0), rep, axis=1)[:size, :size]
            # rare ghost rows suppress glyph and stripe together, so an
            # empty canvas argues for a ghosting class, not for the pair
            ghost = marked_pair and cls >= 2 and ghost_draws[i] < 0.02
            canvas = background.copy() if ghost else background + stripes[cls] * brightness[i]
            if size and not ghost:
                canvas[top : top + size, left : left + size] += tile * 0.85 * brightness[i]
            if marked_pair and cls <= 1:
                for j, (zr, zc) in enumerate(beacon_zones):
                    if mark_draws[i, j] > 0.2:
                        c = zc + int(beacon_cols[i, j])
                        canvas[zr, c] += 0.55 * brightness[i]
                        canvas[zr + 1, c] += 0.55 * brightness[i]
                if cls == 1:
                    # extra marks vanish per strip as a unit, so in-slice
                    # evidence for class 1 is present-or-absent, not graded
                    for j, block in enumerate(extra_blocks):
                        if mark_draws[i, 3 + j] > 0.5:
                            for r, c in block:
                                canvas[r, c] += 0.6 * brightness[i]
            # jitter stays vertical so every mark keeps its column, and with
            # it the client strip it belongs to
            canvas = np.roll(canvas, int(shifts[i]), axis=0)
            images[i, 0] = np.clip(canvas + pixel_noise[i], 0.0, 1.0)
        return RawDataset(images, labels.astype(np.int64), num_classes)

    return _split(num_train, "train"), _split(num_test, "test")


@dataclass(frozen=True)
class PartitionScheme:
    """Rectangular, disjoint, covering assignment of pixels to clients.

    rects[k] = (top, left, height, width) in image coordinates; channel
    dimensions are never split.
    """

    image_shape: tuple[int, int, int]
    rects: tuple[tuple[int, int, int, int], ...]

    def __post_init__(self):
        _, height, width = self.image_shape
        owner = np.full((height, width), -1, dtype=np.int64)
        for k, (top, left, h, w) in enumerate(self.rects):
            if h <= 0 or w <= 0:
                raise SchemeError(f"client {k}: empty rectangle {(top, left, h, w)}")
            if top < 0 or left < 0 or top + h > height or left + w > width:
                raise SchemeError(f"client {k}: rectangle {(top, left, h, w)} out of bounds")
            window = owner[top : top + h, left : left + w]
            if (window != -1).any():
                other = int(window[window != -1].flat[0])
                raise SchemeError(f"clients {other} and {k} overlap")
            window[:] = k
        if (owner == -1).any():
            raise SchemeError("partition leaves uncovered pixels")

    @property
    def num_clients(self) -> int:
        return len(self.rects)

    def owner_of(self, row: int, col: int) -> int:
        for k, (top, left, h, w) in enumerate(self.rects):
            if top <= row < top + h and left <= col < left + w:
                return k
        raise SchemeError(f"pixel ({row}, {col}) outside image")

    @staticmethod
    def strips(image_shape: tuple[int, int, int], num_clients: int) -> "PartitionScheme":
        """Vertical strips with widths as even as possible (left strips wider)."""
        _, height, width = image_shape
        if not 1 <= num_clients <= width:
            raise SchemeError(f"cannot cut {width} columns into {num_clients} strips")
        base, extra = divmod(width, num_clients)
        rects, left = [], 0
        for k in range(num_clients):
            w = base + (1 if k < extra else 0)
            rects.append((0, left, height, w))
            left += w
        return PartitionScheme(image_shape, tuple(rects))

    @staticmethod
    def grid(image_shape: tuple[int, int, int], rows: int, cols: int) -> "PartitionScheme":
        """rows x cols block grid; quadrants are grid(shape, 2, 2)."""
        _, height, width = image_shape
        row_edges = [round(r * height / rows) for r in range(rows + 1)]
        col_edges = [round(c * width / cols) for c in range(cols + 1)]
        rects = []
        for r in range(rows):
            for c in range(cols):
                rects.append(
                    (
                        row_edges[r],
                        col_edges[c],
                        row_edges[r + 1] - row_edges[r],
                        col_edges[c + 1] - col_edges[c],
                    )
                )
        return PartitionScheme(image_shape, tuple(rects))


@dataclass
class VerticalDataset:
    """Per-client feature slices plus server-held labels.

    Client code must only ever touch client_view(k); labels is the
    server's copy and never appears in any per-client structure.
    """

    scheme: PartitionScheme
    slices: dict[int, np.ndarray] = field(repr=False)  # k -> (N, C, h_k, w_k)
    labels: np.ndarray = field(repr=False)  # server side only
    num_classes: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def client_view(self, client: int) -> np.ndarray:
        """The one structure handed to client k: features, no labels."""
        return self.slices[client]

    def slice_shape(self, client: int) -> tuple[int, int, int]:
        return tuple(self.slices[client].shape[1:])


def partition_features(dataset: RawDataset, scheme: PartitionScheme) -> VerticalDataset:
    """Split every image into per-client rectangular slices.

    Raises:
        SchemeError: scheme geometry does not match the dataset images.
    """
    if tuple(dataset.image_shape) != tuple(scheme.image_shape):
        raise SchemeError(
            f"scheme built for {scheme.image_shape}, dataset has {dataset.image_shape}"
        )
    slices = {}
    for k, (top, left, h, w) in enumerate(scheme.rects):
        slices[k] = dataset.images[:, :, top : top + h, left : left + w].copy()
    return VerticalDataset(scheme, slices, dataset.labels.copy(), dataset.num_classes)


def reassemble(vdataset: VerticalDataset) -> np.ndarray:
    """Stitch client slices back into full images (exact inverse of partition)."""
    n = len(vdataset)
    channels, height, width = vdataset.scheme.image_shape
    out = np.zeros((n, channels, height, width), dtype=next(iter(vdataset.slices.values())).dtype)
    for k, (top, left, h, w) in enumerate(vdataset.scheme.rects):
        out[:, :, top : top + h, left : left + w] = vdataset.slices[k]
    return out


@dataclass(frozen=True)
class AuxiliarySet:
    """The small labeled subset adversaries are assumed to hold.

    indices are positions into the train split, sorted ascending;
    target_indices is the subset whose label equals target_label.
    """

    indices: np.ndarray
    labels: np.ndarray
    target_label: int

    @property
    def target_indices(self) -> np.ndarray:
        return self.indices[self.labels == self.target_label]

    @property
    def nontarget_indices(self) -> np.ndarray:
        return self.indices[self.labels != self.target_label]

    def __len__(self) -> int:
        return len(self.indices)


def sample_auxiliary(
    labels: np.ndarray,
    count: int,
    target_label: int,
    target_fraction: float,
    seed: int,
) -> AuxiliarySet:
    """Draw the adversaries' labeled auxiliary subset.

    Exactly round(count * target_fraction) entries carry the target label;
    the remainder is drawn uniformly from the other classes. Deterministic
    under (labels, seed).

    Raises:
        ScarcityError: either pool is too small for its quota.
        ConfigError: count exceeds the dataset or fraction outside [0, 1].
    """
    labels = np.asarray(labels)
    if not 0 <= target_fraction <= 1:
        raise ConfigError(f"target_fraction {target_fraction} outside [0, 1]")
    if not 0 < count <= len(labels):
        raise ConfigError(f"auxiliary count {count} not in [1, {len(labels)}]")
    num_target = int(round(count * target_fraction))
    num_other = count - num_target
    target_pool = np.flatnonzero(labels == target_label)
    other_pool = np.flatnonzero(labels != target_label)
    if len(target_pool) < num_target:
        raise ScarcityError(
            f"need {num_target} samples of label {target_label}, dataset has {len(target_pool)}"
        )
    if len(other_pool) < num_other:
        raise ScarcityError(f"need {num_other} non-target samples, dataset has {len(other_pool)}")
    rng = rng_for(seed, "auxiliary")
    chosen_t = rng.choice(target_pool, size=num_target, replace=False)
    chosen_o = rng.choice(other_pool, size=num_other, replace=False)
    indices = np.sort(np.concatenate([chosen_t, chosen_o])).astype(np.int64)
    return AuxiliarySet(indices, labels[indices], target_label)


def minibatch_indices(num_samples: int, batch_size: int, round_index: int, seed: int) -> np.ndarray:
    """Indices of the minibatch used at a given training round.

    Rounds walk through a per-epoch permutation, so the batches of one
    epoch are disjoint and cover all samples exactly once (the final
    batch of an epoch may be short).
    """
    if not 1 <= batch_size <= num_samples:
        raise ConfigError(f"batch_size {batch_size} not in [1, {num_samples}]")
    if round_index < 0:
        raise ConfigError("round_index must be >= 0")
    rounds_per_epoch = math.ceil(num_samples / batch_size)
    epoch, slot = divmod(round_index, rounds_per_epoch)
    perm = rng_for(seed, "minibatch", epoch).permutation(num_samples)
    return perm[slot * batch_size : (slot + 1) * batch_size].astype(np.int64)
