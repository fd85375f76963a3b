"""Datasets, client partitions and backdoor poisoning."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from orthounlearn.errors import ConfigurationError, IngestionError
from orthounlearn.nn_core import Batch

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
TRAIN_FRACTION = 0.8
PAT_PERCENTS = (10, 20, 50)

ImageShape = tuple[int, int]


class Corner(str, Enum):
    """Image corner a trigger patch is stamped into."""

    BOTTOM_RIGHT = "bottom_right"
    BOTTOM_LEFT = "bottom_left"
    TOP_RIGHT = "top_right"
    TOP_LEFT = "top_left"


class PartitionScheme(str, Enum):
    """How training rows are spread across clients."""

    PAT = "pat"
    IID = "iid"


@dataclass(frozen=True, eq=False)
class FullDataset:
    """Train and test splits before partitioning.

    Attributes:
        train: Training rows.
        test: Held-out rows.
        n_classes: Number of classes C.
        image_shape: (rows, cols) when features are flattened images.
    """

    train: Batch
    test: Batch
    n_classes: int
    image_shape: ImageShape | None = None

    def __post_init__(self) -> None:
        """Check label ranges against the class count."""
        if self.n_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.n_classes}")
        for name, batch in (("train", self.train), ("test", self.test)):
            if len(batch) and int(batch.labels.max()) >= self.n_classes:
                raise ConfigurationError(
                    f"{name} label {int(batch.labels.max())} out of range for "
                    f"{self.n_classes} classes"
                )
        if self.train.dim != self.test.dim:
            raise ConfigurationError("train and test feature widths differ")


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """One client's local data."""

    client_id: int
    train: Batch
    test: Batch
    poisoned_mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        """Default and validate the poisoning mask."""
        mask = self.poisoned_mask
        if mask is None:
            mask = np.zeros(len(self.train), dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (len(self.train),):
            raise ConfigurationError(
                f"poisoned mask has shape {mask.shape}, expected ({len(self.train)},)"
            )
        object.__setattr__(self, "poisoned_mask", mask)

    @property
    def n_poisoned(self) -> int:
        """Number of poisoned training rows."""
        return int(self.poisoned_mask.sum())


@dataclass(frozen=True)
class PartitionSpec:
    """Client partition settings.

    Attributes:
        scheme: Pathological label skew or IID.
        clients: Client count m.
        percent: Share of classes per client for the pathological scheme.
    """

    scheme: PartitionScheme
    clients: int
    percent: int | None = None

    def __post_init__(self) -> None:
        """Validate client count and class share."""
        if self.clients < 2:
            raise ConfigurationError(f"need at least 2 clients, got {self.clients}")
        if self.scheme is PartitionScheme.PAT and self.percent not in PAT_PERCENTS:
            raise ConfigurationError(
                f"pathological percent must be one of {PAT_PERCENTS}, got {self.percent}"
            )

    def classes_per_client(self, n_classes: int) -> int:
        """Classes each client holds under the pathological scheme."""
        if self.percent is None:
            return n_classes
        return math.ceil(self.percent * n_classes / 100)


@dataclass(frozen=True)
class TriggerSpec:
    """Backdoor patch geometry and label flip."""

    patch_size: int = 3
    patch_value: float = 1.0
    corner: Corner = Corner.BOTTOM_RIGHT
    label_shift: int = 5

    def __post_init__(self) -> None:
        """Validate patch size and label shift."""
        if self.patch_size < 1:
            raise ConfigurationError(f"patch size must be >= 1, got {self.patch_size}")
        if self.label_shift < 1:
            raise ConfigurationError(f"label shift must be >= 1, got {self.label_shift}")

    def flip(self, labels: np.ndarray, n_classes: int) -> np.ndarray:
        """Shifted labels ``(label + label_shift) mod C``."""
        if self.label_shift % n_classes == 0:
            raise ConfigurationError(
                f"label shift {self.label_shift} is a multiple of {n_classes} classes"
            )
        return (labels + self.label_shift) % n_classes


def _split_per_class(
    features: np.ndarray, labels: np.ndarray, n_classes: int, train_fraction: float
) -> tuple[Batch, Batch]:
    train_rows: list[np.ndarray] = []
    test_rows: list[np.ndarray] = []
    for cls in range(n_classes):
        rows = np.flatnonzero(labels == cls)
        n_train = int(np.floor(train_fraction * rows.size))
        n_train = max(1, min(rows.size - 1, n_train)) if rows.size > 1 else rows.size
        train_rows.append(rows[:n_train])
        test_rows.append(rows[n_train:])
    train_idx = np.concatenate(train_rows)
    test_idx = np.concatenate(test_rows)
    return (
        Batch(features=features[train_idx], labels=labels[train_idx]),
        Batch(features=features[test_idx], labels=labels[test_idx]),
    )


def _square_shape(dim: int) -> ImageShape | None:
    side = math.isqrt(dim)
    return (side, side) if side * side == dim else None


def generate_blobs(
    n_classes: int,
    per_class: int,
    dim: int,
    spread: float,
    rng: np.random.Generator,
    center_scale: float = 0.5,
) -> FullDataset:
    """Gaussian blobs, one fixed center per class, split 80/20 per class.

    Centers are drawn uniformly from ``[0, center_scale]^dim`` before any
    sample, so the same generator state always yields the same centers.

    Args:
        n_classes: Number of classes C.
        per_class: Samples per class n.
        dim: Feature width d.
        spread: Standard deviation around each center.
        rng: Generator for centers and noise.
        center_scale: Upper bound of center coordinates.

    Returns:
        Dataset with ``C * n`` rows; square widths are exposed as images.
    """
    if n_classes < 2 or per_class < 2:
        raise ConfigurationError(
            f"blobs need >= 2 classes and >= 2 samples per class, got {n_classes}, {per_class}"
        )
    if dim < 1 or spread < 0:
        raise ConfigurationError(f"invalid blob geometry: dim={dim}, spread={spread}")

    centers = rng.uniform(0.0, center_scale, size=(n_classes, dim))
    features = np.repeat(centers, per_class, axis=0)
    features = features + spread * rng.standard_normal(features.shape)
    labels = np.repeat(np.arange(n_classes), per_class)
    train, test = _split_per_class(features, labels, n_classes, TRAIN_FRACTION)
    logger.debug("generated %d blob rows (%d classes, dim %d)", labels.size, n_classes, dim)
    return FullDataset(train=train, test=test, n_classes=n_classes, image_shape=_square_shape(dim))


@dataclass(frozen=True, eq=False)
class LabeledImages:
    """Images parsed from an IDX pair, flattened row-wise."""

    batch: Batch
    image_shape: ImageShape


def _read(path: Path, field_name: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise IngestionError(f"cannot read {path}: {e}", field_name) from e


def _header(data: bytes, count: int, field_name: str) -> tuple[int, ...]:
    size = 4 * (count + 1)
    if len(data) < size:
        raise IngestionError(f"file is {len(data)} bytes, header needs {size}", field_name)
    return struct.unpack(f">{count + 1}i", data[:size])


def load_idx(images_path: Path, labels_path: Path) -> LabeledImages:
    """Parse an IDX image file and its label file.

    Args:
        images_path: File with magic 0x803 and dims (n, rows, cols).
        labels_path: File with magic 0x801 and dim (n).

    Returns:
        Pixels scaled to [0, 1] with integer labels.

    Raises:
        IngestionError: On a wrong magic number, truncation or count mismatch.
    """
    image_bytes = _read(images_path, "images")
    magic, count, rows, cols = _header(image_bytes, 3, "images.header")
    if magic != IDX_IMAGES_MAGIC:
        raise IngestionError(f"expected 0x{IDX_IMAGES_MAGIC:08x}, got 0x{magic:08x}", "images.magic")
    if count < 0 or rows < 1 or cols < 1:
        raise IngestionError(f"invalid dimensions ({count}, {rows}, {cols})", "images.dims")
    n_pixels = count * rows * cols
    if len(image_bytes) - 16 != n_pixels:
        raise IngestionError(
            f"expected {n_pixels} pixel bytes, found {len(image_bytes) - 16}", "images.pixels"
        )

    label_bytes = _read(labels_path, "labels")
    magic, n_labels = _header(label_bytes, 1, "labels.header")
    if magic != IDX_LABELS_MAGIC:
        raise IngestionError(f"expected 0x{IDX_LABELS_MAGIC:08x}, got 0x{magic:08x}", "labels.magic")
    if len(label_bytes) - 8 != n_labels:
        raise IngestionError(
            f"expected {n_labels} label bytes, found {len(label_bytes) - 8}", "labels.values"
        )
    if n_labels != count:
        raise IngestionError(f"{count} images but {n_labels} labels", "labels.count")

    pixels = np.frombuffer(image_bytes, dtype=np.uint8, count=n_pixels, offset=16)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, count=n_labels, offset=8)
    return LabeledImages(
        batch=Batch(
            features=pixels.reshape(count, rows * cols) / 255.0,
            labels=labels.astype(np.int64),
        ),
        image_shape=(rows, cols),
    )


def load_idx_dataset(
    train_images: Path,
    train_labels: Path,
    n_classes: int,
    rng: np.random.Generator,
    test_images: Path | None = None,
    test_labels: Path | None = None,
) -> FullDataset:
    """Build a dataset from IDX files, splitting 80/20 per class without a test pair."""
    train = load_idx(train_images, train_labels)
    if test_images is not None and test_labels is not None:
        test = load_idx(test_images, test_labels)
        if test.image_shape != train.image_shape:
            raise IngestionError(
                f"test images are {test.image_shape}, train images {train.image_shape}",
                "test_images.dims",
            )
        return FullDataset(train.batch, test.batch, n_classes, train.image_shape)

    order = rng.permutation(len(train.batch))
    shuffled = train.batch.subset(order)
    train_split, test_split = _split_per_class(
        shuffled.features, shuffled.labels, n_classes, TRAIN_FRACTION
    )
    return FullDataset(train_split, test_split, n_classes, train.image_shape)


def _pat_shards(
    labels: np.ndarray, n_classes: int, per_class: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Shards in class-major order, each cut from a single class's shuffled rows."""
    shards: list[np.ndarray] = []
    for cls in range(n_classes):
        rows = rng.permutation(np.flatnonzero(labels == cls))
        shards.extend(np.array_split(rows, per_class))
    return shards


def partition(
    dataset: FullDataset, spec: PartitionSpec, rng: np.random.Generator
) -> list[ClientDataset]:
    """Split train and test rows across clients.

    The pathological scheme cuts each class's rows into
    ``clients * ceil(percent * C / 100) / C`` shards, lists them class by
    class and deals shard ``s`` to client ``s mod clients``, so each client
    sees ``ceil(percent * C / 100)`` classes whatever the class sizes. The
    test split is dealt the same way so each client's test rows share its
    classes.

    Args:
        dataset: Source dataset.
        spec: Partition settings.
        rng: Generator for within-class and IID shuffles.

    Returns:
        One ClientDataset per client, ordered by client id.

    Raises:
        ConfigurationError: If the class slots cannot be covered evenly.
    """
    m = spec.clients
    if spec.scheme is PartitionScheme.IID:
        train_parts = np.array_split(rng.permutation(len(dataset.train)), m)
        test_parts = np.array_split(rng.permutation(len(dataset.test)), m)
    else:
        n_classes = dataset.n_classes
        per_client = spec.classes_per_client(n_classes)
        n_shards = m * per_client
        if n_shards % n_classes != 0:
            raise ConfigurationError(
                f"{m} clients x {per_client} classes cannot cover {n_classes} classes evenly",
                "partition.clients",
            )
        if spec.percent == 10 and m != n_classes:
            raise ConfigurationError(
                f"10% partition needs one client per class ({n_classes}), got {m}",
                "partition.clients",
            )
        shards_per_class = n_shards // n_classes
        train_shards = _pat_shards(dataset.train.labels, n_classes, shards_per_class, rng)
        test_shards = _pat_shards(dataset.test.labels, n_classes, shards_per_class, rng)
        train_parts = [np.sort(np.concatenate(train_shards[c::m])) for c in range(m)]
        test_parts = [np.sort(np.concatenate(test_shards[c::m])) for c in range(m)]

    clients = []
    for client_id, (train_idx, test_idx) in enumerate(zip(train_parts, test_parts)):
        if train_idx.size == 0:
            raise ConfigurationError(f"client {client_id} received no training rows")
        clients.append(
            ClientDataset(
                client_id=client_id,
                train=dataset.train.subset(train_idx),
                test=dataset.test.subset(test_idx),
            )
        )
    logger.debug(
        "partitioned %d rows over %d clients (%s)", len(dataset.train), m, spec.scheme.value
    )
    return clients


def trigger_columns(trig: TriggerSpec, dim: int, image_shape: ImageShape | None) -> np.ndarray:
    """Flat feature indices covered by the trigger patch.

    Without an image shape, the patch covers the last ``patch_size**2`` features.

    Raises:
        ConfigurationError: If the patch does not fit.
    """
    k = trig.patch_size
    if image_shape is None:
        if k * k > dim:
            raise ConfigurationError(f"{k}x{k} patch does not fit {dim} features", "trigger")
        return np.arange(dim - k * k, dim)

    rows, cols = image_shape
    if rows * cols != dim:
        raise ConfigurationError(f"image shape {image_shape} does not match {dim} features")
    if k > rows or k > cols:
        raise ConfigurationError(f"{k}x{k} patch does not fit {rows}x{cols} images", "trigger")
    top = rows - k if trig.corner in (Corner.BOTTOM_RIGHT, Corner.BOTTOM_LEFT) else 0
    left = cols - k if trig.corner in (Corner.BOTTOM_RIGHT, Corner.TOP_RIGHT) else 0
    r, c = np.meshgrid(np.arange(top, top + k), np.arange(left, left + k), indexing="ij")
    return (r * cols + c).ravel()


def stamp(batch: Batch, trig: TriggerSpec, n_classes: int, image_shape: ImageShape | None) -> Batch:
    """Copy of ``batch`` with the patch on every row and labels shifted."""
    columns = trigger_columns(trig, batch.dim, image_shape)
    features = batch.features.copy()
    features[:, columns] = trig.patch_value
    return Batch(features=features, labels=trig.flip(batch.labels, n_classes))


def poison(
    client: ClientDataset,
    trig: TriggerSpec,
    fraction: float,
    rng: np.random.Generator,
    *,
    n_classes: int,
    image_shape: ImageShape | None,
) -> tuple[ClientDataset, Batch]:
    """Stamp the trigger into a fraction of a client's training rows.

    Args:
        client: Client to poison.
        trig: Patch geometry and label shift.
        fraction: Share of training rows to poison, in (0, 1].
        rng: Generator choosing which rows.
        n_classes: Number of classes C.
        image_shape: Image geometry, or None for the trailing-feature patch.

    Returns:
        Tuple of (poisoned client, trigger test set built from its test rows).

    Raises:
        ConfigurationError: If the fraction is out of range or the patch does not fit.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"poison fraction must be in (0, 1], got {fraction}", "trigger.fraction")
    n_rows = len(client.train)
    n_poison = int(np.floor(fraction * n_rows))
    chosen = np.sort(rng.choice(n_rows, size=n_poison, replace=False))

    stamped = stamp(client.train.subset(chosen), trig, n_classes, image_shape)
    features = client.train.features.copy()
    labels = client.train.labels.copy()
    features[chosen] = stamped.features
    labels[chosen] = stamped.labels
    mask = np.zeros(n_rows, dtype=bool)
    mask[chosen] = True

    poisoned = ClientDataset(
        client_id=client.client_id,
        train=Batch(features=features, labels=labels),
        test=client.test,
        poisoned_mask=mask,
    )
    trigger_set = stamp(client.test, trig, n_classes, image_shape)
    logger.debug("poisoned %d of %d rows on client %d", n_poison, n_rows, client.client_id)
    return poisoned, trigger_set
