"""The probe classifier: a small conv net written directly in NumPy.

conv3x3(16) -> relu -> maxpool2 -> conv3x3(32) -> relu -> maxpool2 ->
dense(hidden) -> relu -> dense(classes), float32 weights with float64
accumulators for loss means. The output layer starts at zero so an untrained
model predicts the uniform distribution exactly (loss ln(C)).

Training is plain SGD with momentum. Everything is deterministic given the
config seed: weight init, epoch shuffles and augmentation draws come from
separate derived streams, so enabling an identity augmentation reproduces the
unaugmented run bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .data import Dataset
from .imageops import Image
from .policy import PolicySet, SubPolicy, apply_sub_policy
from .rng import spawn_stream

CHECKPOINT_MAGIC = b"FAAM"
CHECKPOINT_VERSION = 1

_EVAL_BATCH = 512


class TrainingDivergedError(RuntimeError):
    """Loss became NaN/Inf during training; reports the offending step."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step


@dataclass(frozen=True)
class Architecture:
    """Shape descriptor for the probe net."""

    in_h: int
    in_w: int
    in_c: int
    classes: int
    conv_channels: tuple[int, int] = (16, 32)
    kernel: int = 3
    hidden: int = 64

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd")
        if self.pooled_h < 1 or self.pooled_w < 1:
            raise ValueError(f"input {self.in_h}x{self.in_w} too small for two pooling stages")

    @property
    def pooled_h(self) -> int:
        return self.in_h // 2 // 2

    @property
    def pooled_w(self) -> int:
        return self.in_w // 2 // 2

    @property
    def flat_features(self) -> int:
        return self.pooled_h * self.pooled_w * self.conv_channels[1]

    def to_json(self) -> dict:
        return {
            "in_h": self.in_h,
            "in_w": self.in_w,
            "in_c": self.in_c,
            "classes": self.classes,
            "conv_channels": list(self.conv_channels),
            "kernel": self.kernel,
            "hidden": self.hidden,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Architecture":
        return cls(
            in_h=obj["in_h"],
            in_w=obj["in_w"],
            in_c=obj["in_c"],
            classes=obj["classes"],
            conv_channels=tuple(obj["conv_channels"]),
            kernel=obj["kernel"],
            hidden=obj["hidden"],
        )

    @classmethod
    def for_dataset(cls, dataset: Dataset) -> "Architecture":
        h, w, c = dataset.image_shape
        return cls(in_h=h, in_w=w, in_c=c, classes=dataset.class_count)


_TENSOR_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")


@dataclass(frozen=True, eq=False)
class ModelParams:
    arch: Architecture
    tensors: dict[str, np.ndarray]
    step: int = 0

    def __post_init__(self):
        missing = [k for k in _TENSOR_ORDER if k not in self.tensors]
        if missing:
            raise ValueError(f"missing tensors: {missing}")
        for k, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"tensor {k} contains non-finite values")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    augmentation: PolicySet | tuple[SubPolicy, ...] | None = None
    baseline_aug: bool = False  # flip + pad-crop during fold training

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def init_params(arch: Architecture, rng: np.random.Generator) -> ModelParams:
    """He-style scaled uniform init; the output layer starts at zero."""

    def he_uniform(shape, fan_in):
        limit = math.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape).astype(np.float32)

    k = arch.kernel
    c1, c2 = arch.conv_channels
    tensors = {
        "conv1_w": he_uniform((k, k, arch.in_c, c1), k * k * arch.in_c),
        "conv1_b": np.zeros(c1, dtype=np.float32),
        "conv2_w": he_uniform((k, k, c1, c2), k * k * c1),
        "conv2_b": np.zeros(c2, dtype=np.float32),
        "fc1_w": he_uniform((arch.flat_features, arch.hidden), arch.flat_features),
        "fc1_b": np.zeros(arch.hidden, dtype=np.float32),
        "fc2_w": np.zeros((arch.hidden, arch.classes), dtype=np.float32),
        "fc2_b": np.zeros(arch.classes, dtype=np.float32),
    }
    return ModelParams(arch, tensors, step=0)


def normalize_images(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 pixels -> centered floats in [-0.5, 0.5]."""
    return images.astype(dtype) / dtype(255.0) - dtype(0.5)


# --- forward / backward -------------------------------------------------------


def _conv_patches(x: np.ndarray, k: int) -> np.ndarray:
    """'Same'-padded k x k patches, shape (B, H, W, k, k, C)."""
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # sliding_window_view appends window axes last: (B, H, W, C, k, k)
    return np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3))


def _conv_forward(x, w, b):
    B, H, W, _ = x.shape
    k = w.shape[0]
    patches = _conv_patches(x, k)
    cols = patches.reshape(B * H * W, -1)
    out = cols @ w.reshape(-1, w.shape[3]) + b
    return out.reshape(B, H, W, w.shape[3]), cols


def _conv_backward(d_out, cols, x_shape, w):
    B, H, W, C = x_shape
    k = w.shape[0]
    d_flat = d_out.reshape(B * H * W, -1)
    dw = (cols.T @ d_flat).reshape(w.shape)
    db = d_flat.sum(axis=0)
    d_cols = d_flat @ w.reshape(-1, w.shape[3]).T
    d_patches = d_cols.reshape(B, H, W, k, k, C)
    pad = k // 2
    d_xp = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=d_out.dtype)
    for ky in range(k):
        for kx in range(k):
            d_xp[:, ky : ky + H, kx : kx + W, :] += d_patches[:, :, :, ky, kx, :]
    return d_xp[:, pad : pad + H, pad : pad + W, :], dw, db


def _pool_forward(x):
    B, H, W, C = x.shape
    h2, w2 = H // 2, W // 2
    xc = x[:, : h2 * 2, : w2 * 2, :]
    windows = xc.reshape(B, h2, 2, w2, 2, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, h2, w2, 4, C)
    arg = windows.argmax(axis=3)
    out = np.take_along_axis(windows, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, arg


def _pool_backward(d_out, arg, x_shape):
    B, H, W, C = x_shape
    h2, w2 = H // 2, W // 2
    d_windows = np.zeros((B, h2, w2, 4, C), dtype=d_out.dtype)
    np.put_along_axis(d_windows, arg[:, :, :, None, :], d_out[:, :, :, None, :], axis=3)
    d_xc = d_windows.reshape(B, h2, w2, 2, 2, C).transpose(0, 1, 3, 2, 4, 5).reshape(
        B, h2 * 2, w2 * 2, C
    )
    if h2 * 2 == H and w2 * 2 == W:
        return d_xc
    d_x = np.zeros(x_shape, dtype=d_out.dtype)
    d_x[:, : h2 * 2, : w2 * 2, :] = d_xc
    return d_x


def _forward(tensors, x, want_cache: bool):
    cache = {}
    a1, cols1 = _conv_forward(x, tensors["conv1_w"], tensors["conv1_b"])
    r1 = np.maximum(a1, 0)
    p1, arg1 = _pool_forward(r1)
    a2, cols2 = _conv_forward(p1, tensors["conv2_w"], tensors["conv2_b"])
    r2 = np.maximum(a2, 0)
    p2, arg2 = _pool_forward(r2)
    flat = p2.reshape(len(x), -1)
    h = flat @ tensors["fc1_w"] + tensors["fc1_b"]
    rh = np.maximum(h, 0)
    logits = rh @ tensors["fc2_w"] + tensors["fc2_b"]
    if want_cache:
        cache = dict(
            x=x, a1=a1, cols1=cols1, r1=r1, arg1=arg1, p1=p1,
            a2=a2, cols2=cols2, r2=r2, arg2=arg2, p2=p2,
            flat=flat, h=h, rh=rh,
        )
    return logits, cache


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward_logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    logits, _ = _forward(params.tensors, x, want_cache=False)
    return logits


def loss_and_grads(params: ModelParams, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch and gradients w.r.t. every tensor.

    Runs in the dtype of the parameter tensors (float32 in training, float64
    for the finite-difference checks).
    """
    t = params.tensors
    dtype = t["conv1_w"].dtype
    x = x.astype(dtype, copy=False)
    B = len(x)
    logits, cache = _forward(t, x, want_cache=True)
    log_p = _log_softmax(logits)
    loss = float(-log_p[np.arange(B), y].mean())

    d_logits = (np.exp(log_p) - np.eye(log_p.shape[1])[y]).astype(dtype) / dtype(B)
    grads = {}
    grads["fc2_w"] = cache["rh"].T @ d_logits
    grads["fc2_b"] = d_logits.sum(axis=0)
    d_rh = d_logits @ t["fc2_w"].T
    d_h = d_rh * (cache["h"] > 0)
    grads["fc1_w"] = cache["flat"].T @ d_h
    grads["fc1_b"] = d_h.sum(axis=0)
    d_flat = d_h @ t["fc1_w"].T
    d_p2 = d_flat.reshape(cache["p2"].shape)
    d_r2 = _pool_backward(d_p2, cache["arg2"], cache["r2"].shape)
    d_a2 = d_r2 * (cache["a2"] > 0)
    d_p1, grads["conv2_w"], grads["conv2_b"] = _conv_backward(
        d_a2, cache["cols2"], cache["p1"].shape, t["conv2_w"]
    )
    d_r1 = _pool_backward(d_p1, cache["arg1"], cache["r1"].shape)
    d_a1 = d_r1 * (cache["a1"] > 0)
    _, grads["conv1_w"], grads["conv1_b"] = _conv_backward(
        d_a1, cache["cols1"], cache["x"].shape, t["conv1_w"]
    )
    return loss, grads


# --- training -----------------------------------------------------------------


def _augmentation_pool(aug) -> tuple[SubPolicy, ...] | None:
    if aug is None:
        return None
    if isinstance(aug, PolicySet):
        return aug.sub_policy_pool()
    pool = tuple(aug)
    if not all(isinstance(sp, SubPolicy) for sp in pool):
        raise ValueError("augmentation must be a PolicySet or a sequence of SubPolicy")
    return pool or None


def _baseline_augment(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Default flip + pad-and-crop augmentation (opt-in for fold training)."""
    out = pixels
    if rng.random() < 0.5:
        out = out[:, ::-1, :]
    pad = 2
    padded = np.pad(out, ((pad, pad), (pad, pad), (0, 0)))
    dy = int(rng.integers(2 * pad + 1))
    dx = int(rng.integers(2 * pad + 1))
    return padded[dy : dy + pixels.shape[0], dx : dx + pixels.shape[1], :]


def train(init: ModelParams, dataset: Dataset, cfg: TrainConfig) -> ModelParams:
    """SGD with momentum from ``init``; deterministic given cfg.seed.

    Shuffling, weight decay and the optional per-image augmentation (one
    sub-policy drawn uniformly per image per epoch) each use their own stream
    derived from cfg.seed, so identity augmentation reproduces the plain run.
    """
    arch = init.arch
    if dataset.image_shape != (arch.in_h, arch.in_w, arch.in_c):
        raise ValueError(
            f"dataset shape {dataset.image_shape} does not match architecture "
            f"({arch.in_h}, {arch.in_w}, {arch.in_c})"
        )
    if dataset.class_count != arch.classes:
        raise ValueError("dataset class count does not match architecture")

    shuffle_rng = spawn_stream(cfg.seed, "train-shuffle")
    aug_rng = spawn_stream(cfg.seed, "train-aug")
    pool = _augmentation_pool(cfg.augmentation)

    tensors = {k: v.copy() for k, v in init.tensors.items()}
    velocity = {k: np.zeros_like(v) for k, v in tensors.items()}
    lr = np.float32(cfg.learning_rate)
    mom = np.float32(cfg.momentum)
    wd = np.float32(cfg.weight_decay)
    step = init.step
    n = len(dataset)

    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = dataset.images[idx]
            if pool is not None or cfg.baseline_aug:
                batch = batch.copy()
                for j, gi in enumerate(idx):
                    if pool is not None:
                        sp = pool[int(aug_rng.integers(len(pool)))]
                        img = apply_sub_policy(
                            Image(batch[j], int(dataset.labels[gi])),
                            sp,
                            aug_rng,
                            pair_pool=dataset,
                            self_index=int(gi),
                        )
                        batch[j] = img.pixels
                    if cfg.baseline_aug:
                        batch[j] = _baseline_augment(batch[j], aug_rng)
            x = normalize_images(batch)
            y = dataset.labels[idx]
            probe = ModelParams(arch, tensors, step)
            loss, grads = loss_and_grads(probe, x, y)
            if not math.isfinite(loss):
                raise TrainingDivergedError(step, loss)
            for k in tensors:
                g = grads[k] + wd * tensors[k]
                velocity[k] = mom * velocity[k] - lr * g
                tensors[k] = tensors[k] + velocity[k]
            step += 1
    return ModelParams(arch, tensors, step)


def fit(dataset: Dataset, cfg: TrainConfig) -> ModelParams:
    """Initialize from cfg.seed and train on the dataset."""
    arch = Architecture.for_dataset(dataset)
    init = init_params(arch, spawn_stream(cfg.seed, "init"))
    return train(init, dataset, cfg)


# --- evaluation ----------------------------------------------------------------


def _as_batches(data) -> Iterable[tuple[np.ndarray, np.ndarray]]:
    if isinstance(data, Dataset):
        for start in range(0, len(data), _EVAL_BATCH):
            yield data.images[start : start + _EVAL_BATCH], data.labels[start : start + _EVAL_BATCH]
    elif isinstance(data, tuple) and len(data) == 2:
        images, labels = data
        for start in range(0, len(images), _EVAL_BATCH):
            yield images[start : start + _EVAL_BATCH], labels[start : start + _EVAL_BATCH]
    else:
        yield from data  # already an iterable of (images, labels) batches


def loss(params: ModelParams, data) -> float:
    """Mean cross-entropy over the data; pure, float64 accumulation."""
    total = 0.0
    count = 0
    for images, labels in _as_batches(data):
        logits = forward_logits(params, normalize_images(np.asarray(images)))
        log_p = _log_softmax(logits)
        total += float(-log_p[np.arange(len(labels)), np.asarray(labels)].sum())
        count += len(labels)
    if count == 0:
        raise ValueError("cannot compute loss on empty data")
    return total / count


def accuracy(params: ModelParams, data) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class index."""
    correct = 0
    count = 0
    for images, labels in _as_batches(data):
        logits = forward_logits(params, normalize_images(np.asarray(images)))
        correct += int((logits.argmax(axis=1) == np.asarray(labels)).sum())
        count += len(labels)
    if count == 0:
        raise ValueError("cannot compute accuracy on empty data")
    return correct / count


def predict(params: ModelParams, img: Image) -> np.ndarray:
    """Softmax class probabilities for a single image."""
    if img.pixels.shape != (params.arch.in_h, params.arch.in_w, params.arch.in_c):
        raise ValueError(
            f"image shape {img.pixels.shape} does not match architecture input"
        )
    logits = forward_logits(params, normalize_images(img.pixels[None]))
    return np.exp(_log_softmax(logits))[0]


def param_hash(params: ModelParams) -> str:
    """SHA-256 over the weight bytes in fixed tensor order."""
    h = hashlib.sha256()
    for name in _TENSOR_ORDER:
        t = params.tensors[name]
        h.update(name.encode())
        h.update(str(t.shape).encode())
        h.update(np.ascontiguousarray(t).tobytes())
    return h.hexdigest()


# --- checkpoint format ----------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    """Versioned binary: magic, version, arch JSON, float32 blobs with length prefixes."""
    arch_json = json.dumps({"arch": params.arch.to_json(), "step": params.step}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(arch_json)))
        fh.write(arch_json)
        fh.write(struct.pack("<I", len(_TENSOR_ORDER)))
        for name in _TENSOR_ORDER:
            t = np.ascontiguousarray(params.tensors[name], dtype="<f4")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(struct.pack("<I", t.size))
            fh.write(t.tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a model checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode())
        arch = Architecture.from_json(meta["arch"])
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            (size,) = struct.unpack("<I", fh.read(4))
            data = fh.read(4 * size)
            if len(data) != 4 * size:
                raise ValueError(f"truncated checkpoint tensor {name}")
            tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return ModelParams(arch, tensors, step=meta["step"])
