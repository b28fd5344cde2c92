"""Dataset container, splits, file formats and the synthetic desk-scale sets.

Two generated datasets stand in for benchmark data: ``synth_dataset`` makes
stripe-orientation patterns whose labels survive moderate augmentation (used
by the property and search-direction tests), and ``digits_dataset`` renders
a 5x7 bitmap font with randomized pose/intensity/noise, MNIST-like enough to
exercise the full pipeline through the IDX codec.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageops import Image
from .rng import spawn_stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """A file failed to parse; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable labeled image collection with a fixed shape and class count."""

    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) int64
    class_count: int
    name: str = ""

    def __post_init__(self):
        imgs = np.asarray(self.images)
        labels = np.asarray(self.labels, dtype=np.int64)
        if imgs.ndim != 4 or imgs.dtype != np.uint8 or imgs.shape[3] not in (1, 3):
            raise ValueError(
                f"images must be (N, H, W, C) uint8 with C in {{1, 3}}, got "
                f"{imgs.shape} {imgs.dtype}"
            )
        if len(imgs) == 0:
            raise ValueError("dataset must be non-empty")
        if labels.shape != (len(imgs),):
            raise ValueError("labels must be one int per image")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ValueError(
                f"labels must be in [0, {self.class_count}), got range "
                f"[{labels.min()}, {labels.max()}]"
            )
        object.__setattr__(self, "images", imgs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Image:
        return Image(self.images[i], int(self.labels[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, indices, name: str = "") -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, name or self.name)

    @classmethod
    def from_images(cls, images, class_count: int, name: str = "") -> "Dataset":
        return cls(
            images=np.stack([im.pixels for im in images]),
            labels=np.asarray([im.label for im in images], dtype=np.int64),
            class_count=class_count,
            name=name,
        )

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(struct.pack("<IIII", *self.images.shape))
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class FoldSplit:
    """One fold's partition into a model-training half and an exploration half."""

    d_m: Dataset
    d_a: Dataset
    fold_index: int


def stratified_kfold_split(
    dataset: Dataset, k: int, seed: int, split_ratio: float = 0.5
) -> list[FoldSplit]:
    """K independent stratified shuffles of the dataset into (d_m, d_a) pairs.

    Each fold is a fresh seeded permutation (shuffle-split semantics, not a
    K-way partition). Per-class counts in d_m deviate from exact
    proportionality by at most one sample (largest-remainder apportionment).
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if not 0.0 < split_ratio < 1.0:
        raise ValueError(f"split_ratio must be in (0, 1), got {split_ratio}")
    counts = np.bincount(dataset.labels, minlength=dataset.class_count)
    for cls, cnt in enumerate(counts):
        if cnt < k:
            raise ValueError(f"class {cls} has only {cnt} samples, fewer than k={k}")

    n = len(dataset)
    target_m = int(math.floor(n * split_ratio + 0.5))
    base = np.floor(counts * split_ratio).astype(np.int64)
    remainders = counts * split_ratio - base
    extra = target_m - int(base.sum())
    # hand out the rounding slack to the largest remainders, ties by class index
    order = np.lexsort((np.arange(len(counts)), -remainders))
    take = base.copy()
    for cls in order[:max(0, extra)]:
        take[cls] += 1

    by_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.class_count)]
    folds = []
    for fold in range(k):
        rng = spawn_stream(seed, "fold-split", fold)
        m_parts, a_parts = [], []
        for c, idx in enumerate(by_class):
            perm = idx[rng.permutation(len(idx))]
            m_parts.append(perm[: take[c]])
            a_parts.append(perm[take[c] :])
        m_idx = rng.permutation(np.concatenate(m_parts))
        a_idx = rng.permutation(np.concatenate(a_parts))
        folds.append(
            FoldSplit(
                d_m=dataset.subset(m_idx, f"{dataset.name}/fold{fold}/dm"),
                d_a=dataset.subset(a_idx, f"{dataset.name}/fold{fold}/da"),
                fold_index=fold,
            )
        )
    return folds


# --- IDX format --------------------------------------------------------------


def _read_exact(fh, count: int, what: str, offset: int) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise DataFormatError(f"truncated file while reading {what}", offset + len(buf))
    return buf


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file into (N, rows, cols) uint8."""
    with open(path, "rb") as fh:
        header = _read_exact(fh, 16, "image header", 0)
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(
                f"bad IDX image magic 0x{magic:08X}, expected 0x{IDX_IMAGES_MAGIC:08X}", 0
            )
        data = _read_exact(fh, n * rows * cols, "image data", 16)
        if fh.read(1):
            raise DataFormatError("trailing bytes after image data", 16 + n * rows * cols)
    return np.frombuffer(data, dtype=np.uint8).reshape(n, rows, cols)


def load_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = _read_exact(fh, 8, "label header", 0)
        magic, n = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(
                f"bad IDX label magic 0x{magic:08X}, expected 0x{IDX_LABELS_MAGIC:08X}", 0
            )
        data = _read_exact(fh, n, "label data", 8)
        if fh.read(1):
            raise DataFormatError("trailing bytes after label data", 8 + n)
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def load_idx_pair(images_path, labels_path, class_count: int | None = None, name: str = "") -> Dataset:
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise DataFormatError(
            f"image/label count mismatch: {len(images)} images vs {len(labels)} labels"
        )
    return Dataset(
        images=images[:, :, :, None],
        labels=labels,
        class_count=class_count or int(labels.max()) + 1,
        name=name or Path(images_path).stem,
    )


def save_idx_pair(dataset: Dataset, images_path, labels_path) -> None:
    if dataset.image_shape[2] != 1:
        raise ValueError("IDX image files hold single-channel images")
    n, rows, cols, _ = dataset.images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(dataset.images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def _find_idx_pair(root: Path) -> tuple[Path, Path]:
    images_file = labels_file = None
    for p in sorted(root.iterdir()):
        if not p.is_file():
            continue
        with open(p, "rb") as fh:
            head = fh.read(4)
        if len(head) < 4:
            continue
        magic = struct.unpack(">I", head)[0]
        if magic == IDX_IMAGES_MAGIC and images_file is None:
            images_file = p
        elif magic == IDX_LABELS_MAGIC and labels_file is None:
            labels_file = p
    if images_file is None or labels_file is None:
        raise DataFormatError(f"no IDX image/label pair found under {root}")
    return images_file, labels_file


# --- raw-dir fixture format ---------------------------------------------------

_BIN_HEADER = struct.Struct("<IIII")  # H, W, C, label


def save_image_bin(img: Image, path) -> None:
    """Fixture buffer: 16-byte little-endian header (H, W, C, label) + pixels."""
    with open(path, "wb") as fh:
        fh.write(_BIN_HEADER.pack(img.height, img.width, img.channels, img.label))
        fh.write(img.pixels.tobytes())


def load_image_bin(path) -> Image:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise DataFormatError("truncated fixture header", len(header))
        h, w, c, label = _BIN_HEADER.unpack(header)
        data = fh.read(h * w * c)
        if len(data) != h * w * c:
            raise DataFormatError(
                f"fixture pixel buffer is {len(data)} bytes, expected {h * w * c}",
                16 + len(data),
            )
        if fh.read(1):
            raise DataFormatError("trailing bytes after pixel buffer", 16 + h * w * c)
    try:
        return Image(np.frombuffer(data, dtype=np.uint8).reshape(h, w, c).copy(), label)
    except ValueError as exc:
        raise DataFormatError(f"invalid fixture image: {exc}") from exc


def save_raw_dir(dataset: Dataset, root) -> None:
    root = Path(root)
    width = len(str(len(dataset) - 1))
    for i, img in enumerate(dataset):
        class_dir = root / str(img.label)
        class_dir.mkdir(parents=True, exist_ok=True)
        save_image_bin(img, class_dir / f"{i:0{width}d}.bin")


def load_raw_dir(root, name: str = "") -> Dataset:
    root = Path(root)
    class_dirs = sorted(
        (p for p in root.iterdir() if p.is_dir() and p.name.isdigit()),
        key=lambda p: int(p.name),
    )
    if not class_dirs:
        raise DataFormatError(f"no class subdirectories under {root}")
    images = []
    for class_dir in class_dirs:
        cls = int(class_dir.name)
        for p in sorted(class_dir.glob("*.bin")):
            img = load_image_bin(p)
            if img.label != cls:
                raise DataFormatError(
                    f"{p}: header label {img.label} disagrees with directory {cls}"
                )
            images.append(img)
    if not images:
        raise DataFormatError(f"no .bin fixtures under {root}")
    return Dataset.from_images(images, class_count=len(class_dirs), name=name or root.name)


def load_dataset(path, format: str) -> Dataset:
    """Load from disk; ``format`` is "idx" (directory with an IDX pair) or "raw-dir"."""
    root = Path(path)
    if not root.exists():
        raise FileNotFoundError(f"dataset path does not exist: {root}")
    if format == "idx":
        images_file, labels_file = _find_idx_pair(root)
        return load_idx_pair(images_file, labels_file, name=root.name)
    if format == "raw-dir":
        return load_raw_dir(root)
    raise ValueError(f"unknown dataset format: {format!r} (expected 'idx' or 'raw-dir')")


# --- synthetic datasets -------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Parameters for the stripe-pattern generator."""

    classes: int = 2
    per_class: int = 100
    height: int = 16
    width: int = 16
    channels: int = 1
    noise: float = 0.05
    cycles: float = 3.0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.per_class < 1:
            raise ValueError("per_class must be positive")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")


def synth_dataset(spec: SynthSpec, seed: int) -> Dataset:
    """Stripe-orientation classes: class c = binary stripes at angle c*pi/classes.

    The orientation (hence the label) survives the augmentation operations at
    moderate magnitudes; pixel noise is the only per-image variation, so a
    nearest-centroid classifier separates classes almost perfectly.
    """
    rng = spawn_stream(seed, "synth", spec.classes, spec.per_class)
    ys, xs = np.indices((spec.height, spec.width))
    scale = 2.0 * math.pi * spec.cycles / max(spec.height, spec.width)
    images = np.empty(
        (spec.classes * spec.per_class, spec.height, spec.width, spec.channels), dtype=np.uint8
    )
    labels = np.empty(spec.classes * spec.per_class, dtype=np.int64)
    i = 0
    for c in range(spec.classes):
        theta = math.pi * c / spec.classes
        phase = (xs * math.cos(theta) + ys * math.sin(theta)) * scale
        base = np.where(np.sin(phase + 0.5) >= 0.0, 192.0, 64.0)
        for _ in range(spec.per_class):
            plane = base + rng.normal(0.0, spec.noise * 255.0, size=base.shape)
            px = np.clip(np.floor(plane + 0.5), 0, 255).astype(np.uint8)
            images[i] = np.repeat(px[:, :, None], spec.channels, axis=2)
            labels[i] = c
            i += 1
    order = spawn_stream(seed, "synth-order", spec.classes, spec.per_class).permutation(i)
    return Dataset(images[order], labels[order], spec.classes, name=f"synth{spec.classes}")


_DIGIT_FONT = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def _glyph_array(digit: int) -> np.ndarray:
    rows = _DIGIT_FONT[digit]
    return np.array([[float(ch) for ch in row] for row in rows])


def _render_digit(digit: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    glyph = _glyph_array(digit)
    gh, gw = glyph.shape
    scale_y = rng.uniform(0.093, 0.121) * h  # glyph height ~0.65-0.85 of canvas
    scale_x = scale_y * rng.uniform(0.80, 1.10)
    angle = math.radians(rng.uniform(-14.0, 14.0))
    shear = rng.uniform(-0.18, 0.18)
    dx = rng.uniform(-0.09, 0.09) * w
    dy = rng.uniform(-0.09, 0.09) * h
    fg = rng.uniform(170.0, 255.0)
    bg = rng.uniform(0.0, 30.0)
    sigma = rng.uniform(4.0, 14.0)

    cos_t, sin_t = math.cos(angle), math.sin(angle)
    ys, xs = np.indices((h, w))
    # map canvas coords back into glyph coords (inverse of scale+shear+rotate)
    u = xs - (w - 1) / 2.0 - dx
    v = ys - (h - 1) / 2.0 - dy
    rx = cos_t * u + sin_t * v
    ry = -sin_t * u + cos_t * v
    gx = (rx - shear * ry) / scale_x + (gw - 1) / 2.0
    gy = ry / scale_y + (gh - 1) / 2.0

    # bilinear sample of the padded glyph for soft edges
    padded = np.zeros((gh + 2, gw + 2))
    padded[1:-1, 1:-1] = glyph
    gx = np.clip(gx + 1.0, 0.0, gw + 1.0)
    gy = np.clip(gy + 1.0, 0.0, gh + 1.0)
    x0 = np.clip(np.floor(gx).astype(int), 0, gw)
    y0 = np.clip(np.floor(gy).astype(int), 0, gh)
    fx = gx - x0
    fy = gy - y0
    val = (
        padded[y0, x0] * (1 - fx) * (1 - fy)
        + padded[y0, x0 + 1] * fx * (1 - fy)
        + padded[y0 + 1, x0] * (1 - fx) * fy
        + padded[y0 + 1, x0 + 1] * fx * fy
    )
    plane = bg + (fg - bg) * val + rng.normal(0.0, sigma, size=val.shape)
    return np.clip(np.floor(plane + 0.5), 0, 255).astype(np.uint8)


def digits_dataset(n: int, seed: int, height: int = 28, width: int = 28) -> Dataset:
    """Rendered-digit classification set with randomized pose and intensity.

    The stream key includes n, so sets of different sizes drawn from the same
    seed do not overlap sample-for-sample.
    """
    if n < 10:
        raise ValueError("need at least one sample per digit class")
    rng = spawn_stream(seed, "digits", n, height, width)
    labels = np.array([i % 10 for i in range(n)], dtype=np.int64)
    labels = labels[rng.permutation(n)]
    images = np.empty((n, height, width, 1), dtype=np.uint8)
    for i in range(n):
        images[i, :, :, 0] = _render_digit(int(labels[i]), height, width, rng)
    return Dataset(images, labels, class_count=10, name=f"digits{n}")
