"""Pixel-level implementations of the 16 augmentation operations.

Everything here is a deterministic pure function over uint8 images: whether
an operation fires, where a cutout patch lands and which partner image gets
paired are all decided one layer up (``augsearch.policy``) and passed in as
arguments. Magnitudes are normalized to [0, 1] and mapped to concrete
per-operation parameters by :func:`magnitude_map`; the midpoint or zero of
each range is an exact identity, which the tests pin down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

GRAY_FILL = 128  # fill byte for out-of-bounds pixels and cutout patches

SHEAR_MAX = 0.3
TRANSLATE_MAX_FRACTION = 0.3125
ROTATE_MAX_DEGREES = 30.0
ENHANCE_SPAN = 0.9
CUTOUT_MAX_FRACTION = 0.5
PAIRING_MAX_WEIGHT = 0.4

_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])  # ITU-R 601
_SMOOTH_KERNEL = np.array([[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]]) / 13.0


class OpKind(Enum):
    """The closed set of augmentation operations; values are the wire names."""

    ShearX = "ShearX"
    ShearY = "ShearY"
    TranslateX = "TranslateX"
    TranslateY = "TranslateY"
    Rotate = "Rotate"
    AutoContrast = "AutoContrast"
    Invert = "Invert"
    Equalize = "Equalize"
    Solarize = "Solarize"
    Posterize = "Posterize"
    Contrast = "Contrast"
    Color = "Color"
    Brightness = "Brightness"
    Sharpness = "Sharpness"
    Cutout = "Cutout"
    SamplePairing = "SamplePairing"

    @property
    def uses_magnitude(self) -> bool:
        return self not in _MAGNITUDE_FREE


_MAGNITUDE_FREE = frozenset({OpKind.AutoContrast, OpKind.Invert, OpKind.Equalize})

_ENHANCE_OPS = frozenset({OpKind.Contrast, OpKind.Color, OpKind.Brightness, OpKind.Sharpness})


@dataclass(frozen=True, eq=False)
class Image:
    """A fixed-size H x W x C byte image with an integer class label."""

    pixels: np.ndarray
    label: int = 0

    def __post_init__(self):
        px = self.pixels
        if not isinstance(px, np.ndarray) or px.dtype != np.uint8:
            raise ValueError("pixels must be a uint8 ndarray")
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"pixels must have shape (H, W, C) with C in {{1, 3}}, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if self.label < 0:
            raise ValueError(f"label must be >= 0, got {self.label}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def _round_half_up(x: np.ndarray) -> np.ndarray:
    # np.rint rounds half-to-even; golden tests assume conventional rounding
    return np.floor(x + 0.5)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(_round_half_up(x), 0, 255).astype(np.uint8)


def magnitude_map(kind: OpKind, lam: float, size: int | None = None):
    """Map a normalized magnitude lam in [0, 1] to the op's concrete parameter.

    ``size`` supplies the pixel dimension for size-dependent ops (image width
    or height for TranslateX/Y, min(H, W) for Cutout); without it those return
    the dimensionless fraction. Magnitude-free ops return None.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"magnitude must be in [0, 1], got {lam}")
    signed = 2.0 * lam - 1.0
    if kind in (OpKind.ShearX, OpKind.ShearY):
        return signed * SHEAR_MAX
    if kind in (OpKind.TranslateX, OpKind.TranslateY):
        frac = signed * TRANSLATE_MAX_FRACTION
        return frac * size if size is not None else frac
    if kind is OpKind.Rotate:
        return signed * ROTATE_MAX_DEGREES
    if kind is OpKind.Solarize:
        return int(round(256 * (1.0 - lam)))
    if kind is OpKind.Posterize:
        return int(min(8, max(4, round(8 - 4 * lam))))
    if kind in _ENHANCE_OPS:
        return 1.0 + ENHANCE_SPAN * signed
    if kind is OpKind.Cutout:
        frac = CUTOUT_MAX_FRACTION * lam
        return int(round(frac * size)) if size is not None else frac
    if kind is OpKind.SamplePairing:
        return PAIRING_MAX_WEIGHT * lam
    return None


def affine_transform(img: Image, matrix, fill=GRAY_FILL) -> Image:
    """Apply a forward affine map to the pixel grid.

    ``matrix`` is 2x3, mapping source (x, y) column/row coordinates to
    destination: [x', y'] = A @ [x, y] + t. Destination pixels are resolved by
    inverse mapping with nearest-neighbor lookup; source coordinates falling
    outside the image take ``fill`` (a byte, or one byte per channel).
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (2, 3):
        raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
    a, b, tx = m[0]
    c, d, ty = m[1]
    det = a * d - b * c
    if abs(det) < 1e-12:
        raise np.linalg.LinAlgError("affine linear part is singular")

    h, w, ch = img.pixels.shape
    ys, xs = np.indices((h, w))
    rx = xs.ravel() - tx
    ry = ys.ravel() - ty
    src_x = (d * rx - b * ry) / det
    src_y = (-c * rx + a * ry) / det
    sx = np.floor(src_x + 0.5).astype(np.int64)
    sy = np.floor(src_y + 0.5).astype(np.int64)
    inside = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)

    fill_arr = np.broadcast_to(np.asarray(fill, dtype=np.uint8).ravel()[:ch], (ch,))
    out = np.empty((h * w, ch), dtype=np.uint8)
    out[:] = fill_arr
    out[inside] = img.pixels[sy[inside], sx[inside], :]
    return Image(out.reshape(h, w, ch), img.label)


def blend(img_a: Image, img_b: Image, w: float) -> Image:
    """Per-pixel mix round((1-w)*a + w*b), clamped to [0, 255]; keeps a's label.

    w in [0, 1] interpolates between the two images; the enhancement ops pass
    w above 1 to extrapolate away from their degenerate image.
    """
    if img_a.pixels.shape != img_b.pixels.shape:
        raise ValueError(
            f"blend needs identical shapes, got {img_a.pixels.shape} vs {img_b.pixels.shape}"
        )
    if not math.isfinite(w):
        raise ValueError(f"blend weight must be finite, got {w}")
    if w == 0.0:
        return Image(img_a.pixels.copy(), img_a.label)
    if w == 1.0:
        return Image(img_b.pixels.copy(), img_a.label)
    mixed = (1.0 - w) * img_a.pixels.astype(np.float64) + w * img_b.pixels.astype(np.float64)
    return Image(_to_u8(mixed), img_a.label)


def _grayscale(px: np.ndarray) -> np.ndarray:
    """Luma plane as float64, shape (H, W)."""
    if px.shape[2] == 1:
        return px[:, :, 0].astype(np.float64)
    return px.astype(np.float64) @ _LUMA_WEIGHTS


def _autocontrast(px: np.ndarray) -> np.ndarray:
    out = np.empty_like(px)
    for c in range(px.shape[2]):
        plane = px[:, :, c]
        lo = int(plane.min())
        hi = int(plane.max())
        if hi <= lo:
            out[:, :, c] = plane
        else:
            out[:, :, c] = _to_u8((plane.astype(np.float64) - lo) * (255.0 / (hi - lo)))
    return out


def _equalize(px: np.ndarray) -> np.ndarray:
    out = np.empty_like(px)
    n = px.shape[0] * px.shape[1]
    for c in range(px.shape[2]):
        plane = px[:, :, c]
        hist = np.bincount(plane.ravel(), minlength=256)
        cdf = np.cumsum(hist)
        cdf_min = int(cdf[np.nonzero(hist)[0][0]])
        if cdf_min == n:  # single gray level
            out[:, :, c] = plane
            continue
        lut = _to_u8((cdf - cdf_min) * (255.0 / (n - cdf_min)))
        out[:, :, c] = lut[plane]
    return out


def _smooth(px: np.ndarray) -> np.ndarray:
    """3x3 weighted smoothing on the interior; border rows/cols untouched."""
    h, w, _ = px.shape
    if h < 3 or w < 3:
        return px.copy()
    acc = np.zeros((h - 2, w - 2, px.shape[2]), dtype=np.float64)
    for ky in range(3):
        for kx in range(3):
            acc += _SMOOTH_KERNEL[ky, kx] * px[ky : ky + h - 2, kx : kx + w - 2, :]
    out = px.copy()
    out[1 : h - 1, 1 : w - 1, :] = _to_u8(acc)
    return out


def _enhance_degenerate(img: Image, kind: OpKind) -> Image:
    px = img.pixels
    if kind is OpKind.Brightness:
        return Image(np.zeros_like(px), img.label)
    if kind is OpKind.Sharpness:
        return Image(_smooth(px), img.label)
    gray = _grayscale(px)
    if kind is OpKind.Contrast:
        level = np.uint8(min(255, int(math.floor(gray.mean() + 0.5))))
        return Image(np.full_like(px, level), img.label)
    if kind is OpKind.Color:
        if px.shape[2] == 1:  # saturation is undefined for grayscale
            return Image(px.copy(), img.label)
        return Image(np.repeat(_to_u8(gray)[:, :, None], 3, axis=2), img.label)
    raise ValueError(f"{kind} is not an enhancement op")


def _cutout(img: Image, side: int, center: tuple[int, int]) -> Image:
    if side <= 0:
        return Image(img.pixels.copy(), img.label)
    cx, cy = center
    h, w, ch = img.pixels.shape
    x0 = cx - side // 2
    y0 = cy - side // 2
    x1 = max(0, min(w, x0 + side))
    y1 = max(0, min(h, y0 + side))
    x0 = max(0, min(w, x0))
    y0 = max(0, min(h, y0))
    out = img.pixels.copy()
    out[y0:y1, x0:x1, :] = GRAY_FILL
    return Image(out, img.label)


def _center(img: Image) -> tuple[float, float]:
    return (img.width - 1) / 2.0, (img.height - 1) / 2.0


def apply_op(
    img: Image,
    kind: OpKind,
    lam: float,
    pair: Image | None = None,
    cutout_center: tuple[int, int] | None = None,
) -> Image:
    """Apply one operation at normalized magnitude ``lam``; pure and total.

    ``pair`` must be supplied exactly for SamplePairing. ``cutout_center`` is
    the (x, y) patch center for Cutout and defaults to the image center.
    """
    if kind is OpKind.SamplePairing:
        if pair is None:
            raise ValueError("SamplePairing requires a pair image")
    elif pair is not None:
        raise ValueError(f"pair is only accepted for SamplePairing, not {kind.value}")

    px = img.pixels
    if kind is OpKind.ShearX:
        s = magnitude_map(kind, lam)
        _, cy = _center(img)
        return affine_transform(img, [[1.0, s, -s * cy], [0.0, 1.0, 0.0]])
    if kind is OpKind.ShearY:
        s = magnitude_map(kind, lam)
        cx, _ = _center(img)
        return affine_transform(img, [[1.0, 0.0, 0.0], [s, 1.0, -s * cx]])
    if kind is OpKind.TranslateX:
        dx = magnitude_map(kind, lam, size=img.width)
        return affine_transform(img, [[1.0, 0.0, dx], [0.0, 1.0, 0.0]])
    if kind is OpKind.TranslateY:
        dy = magnitude_map(kind, lam, size=img.height)
        return affine_transform(img, [[1.0, 0.0, 0.0], [0.0, 1.0, dy]])
    if kind is OpKind.Rotate:
        theta = math.radians(magnitude_map(kind, lam))
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        cx, cy = _center(img)
        # rotate about the image center: t = c - A @ c
        return affine_transform(
            img,
            [
                [cos_t, -sin_t, cx - cos_t * cx + sin_t * cy],
                [sin_t, cos_t, cy - sin_t * cx - cos_t * cy],
            ],
        )
    if kind is OpKind.AutoContrast:
        magnitude_map(kind, lam)  # still validates lam
        return Image(_autocontrast(px), img.label)
    if kind is OpKind.Invert:
        magnitude_map(kind, lam)
        return Image(255 - px, img.label)
    if kind is OpKind.Equalize:
        magnitude_map(kind, lam)
        return Image(_equalize(px), img.label)
    if kind is OpKind.Solarize:
        threshold = magnitude_map(kind, lam)
        out = px.copy()
        mask = px >= threshold
        out[mask] = 255 - px[mask]
        return Image(out, img.label)
    if kind is OpKind.Posterize:
        bits = magnitude_map(kind, lam)
        mask = np.uint8((0xFF << (8 - bits)) & 0xFF)
        return Image(px & mask, img.label)
    if kind in _ENHANCE_OPS:
        factor = magnitude_map(kind, lam)
        if factor == 1.0:
            return Image(px.copy(), img.label)
        return blend(_enhance_degenerate(img, kind), img, factor)
    if kind is OpKind.Cutout:
        side = magnitude_map(kind, lam, size=min(img.height, img.width))
        if cutout_center is None:
            cutout_center = (img.width // 2, img.height // 2)
        return _cutout(img, side, cutout_center)
    if kind is OpKind.SamplePairing:
        return blend(img, pair, magnitude_map(kind, lam))
    raise ValueError(f"unknown operation kind: {kind!r}")
