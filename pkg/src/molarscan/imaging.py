"""Pixel-level primitives for panoramic radiographs.

Images are float64 rasters in [0, 1] with an explicit channel axis, shape
``(height, width, channels)``. Every resampling step in the package goes
through :func:`resample_bilinear` / :func:`sample_bilinear`, which use
half-pixel-center alignment with edge replication.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .boxes import BBox
from .errors import InputError

PAD_VALUE = 114.0 / 255.0  # detector-training letterbox gray, ~0.447
DETECTOR_SIZE = 832
ROI_SIZE = 224
LUMA = np.array([0.299, 0.587, 0.114])

# (t, r, g, b) control points of the heatmap colormap
COLORMAP_POINTS = np.array(
    [
        [0.00, 0.0, 0.0, 0.5],
        [0.25, 0.0, 0.5, 1.0],
        [0.50, 0.0, 1.0, 0.5],
        [0.75, 1.0, 1.0, 0.0],
        [1.00, 1.0, 0.0, 0.0],
    ]
)


@dataclass(frozen=True, eq=False)
class RadiographImage:
    """Immutable normalized raster, shape ``(height, width, channels)``."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise InputError(f"expected a 2-D or 3-D raster, got shape {arr.shape}")
        h, w, c = arr.shape
        if h == 0 or w == 0:
            raise InputError(f"zero-dimension image {w}x{h}")
        if c not in (1, 3):
            raise InputError(f"unsupported channel count {c}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise InputError("pixel values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    @property
    def plane(self):
        """The single channel as a 2-D array (grayscale images only)."""
        if self.channels != 1:
            raise InputError("plane is only defined for single-channel images")
        return self.pixels[:, :, 0]


@dataclass(frozen=True)
class LetterboxTransform:
    """Coordinate bookkeeping for an aspect-preserving square resize.

    ``pad_x``/``pad_y`` are the left/top borders; when the total padding is
    odd, the extra pixel goes to the right/bottom.
    """

    scale: float
    pad_x: int
    pad_y: int
    orig_width: int
    orig_height: int
    target: int

    @classmethod
    def identity(cls, width, height=None):
        height = width if height is None else height
        return cls(1.0, 0, 0, width, height, max(width, height))

    @property
    def content_size(self):
        """Width and height of the resized image inside the padding."""
        size = lambda v: min(self.target, max(1, _round_half_up(v * self.scale)))
        return size(self.orig_width), size(self.orig_height)

    def forward_box(self, box):
        return BBox(
            box.x1 * self.scale + self.pad_x,
            box.y1 * self.scale + self.pad_y,
            box.x2 * self.scale + self.pad_x,
            box.y2 * self.scale + self.pad_y,
        )

    def invert_box(self, box):
        return invert_box(box, self)


@dataclass(frozen=True)
class RoiTransform:
    """Maps ROI patch coordinates back to the source image.

    ``x_orig = origin_x + u / scale`` and likewise for y.
    """

    scale: float
    origin_x: float
    origin_y: float

    def to_original(self, u, v):
        return self.origin_x + u / self.scale, self.origin_y + v / self.scale


@dataclass(frozen=True, eq=False)
class RoiPatch:
    pixels: np.ndarray
    source_box: BBox
    crop_transform: RoiTransform = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float64)
        if arr.shape != (ROI_SIZE, ROI_SIZE):
            raise InputError(f"ROI patch must be {ROI_SIZE}x{ROI_SIZE}, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    def as_image(self):
        return RadiographImage(self.pixels)


def _as_image(img):
    return img if isinstance(img, RadiographImage) else RadiographImage(img)


def _interp_axis(coords, size):
    """Lower index, upper index and upper weight for clamped linear sampling."""
    coords = np.clip(np.asarray(coords, dtype=np.float64), 0.0, size - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, coords - lo


def sample_bilinear(arr, ys, xs):
    """Sample ``arr`` on the separable grid ``ys x xs`` (pixel-index units).

    Coordinates outside the raster are clamped to the border pixels.
    """
    arr = np.asarray(arr, dtype=np.float64)
    y0, y1, fy = _interp_axis(ys, arr.shape[0])
    x0, x1, fx = _interp_axis(xs, arr.shape[1])
    extra = (None,) * (arr.ndim - 2)
    fy = fy[(slice(None), None, *extra)]
    rows = arr[y0] * (1.0 - fy) + arr[y1] * fy
    fx = fx[(None, slice(None), *extra)]
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


def resample_bilinear(arr, out_h, out_w):
    """Resize a 2-D or ``(h, w, c)`` array with half-pixel-center alignment."""
    arr = np.asarray(arr, dtype=np.float64)
    in_h, in_w = arr.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return arr.copy()
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    return sample_bilinear(arr, ys, xs)


def to_grayscale(img):
    img = _as_image(img)
    if img.channels == 1:
        return img
    gray = np.clip(img.pixels @ LUMA, 0.0, 1.0)
    return RadiographImage(gray)


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def letterbox_transform(width, height, target=DETECTOR_SIZE):
    """Scale and padding that fit a ``width x height`` image into ``target``."""
    if target <= 0:
        raise InputError(f"letterbox target must be positive, got {target}")
    if width <= 0 or height <= 0:
        raise InputError(f"image size must be positive, got {width}x{height}")
    scale = target / max(width, height)
    t = LetterboxTransform(scale, 0, 0, width, height, target)
    new_w, new_h = t.content_size
    return LetterboxTransform(scale, (target - new_w + 1) // 2, (target - new_h + 1) // 2, width, height, target)


def letterbox_resize(img, target=DETECTOR_SIZE):
    """Resize to ``target x target`` keeping the aspect ratio, padding with gray."""
    img = _as_image(img)
    t = letterbox_transform(img.width, img.height, target)
    new_w, new_h = t.content_size
    canvas = np.full((target, target, img.channels), PAD_VALUE)
    canvas[t.pad_y:t.pad_y + new_h, t.pad_x:t.pad_x + new_w] = resample_bilinear(img.pixels, new_h, new_w)
    return RadiographImage(np.clip(canvas, 0.0, 1.0)), t


def invert_box(box, t):
    """Map a letterboxed box back to original-image coordinates, clamped."""
    def inv(v, pad, limit):
        return min(max((v - pad) / t.scale, 0.0), float(limit))

    return BBox(
        inv(box.x1, t.pad_x, t.orig_width),
        inv(box.y1, t.pad_y, t.orig_height),
        inv(box.x2, t.pad_x, t.orig_width),
        inv(box.y2, t.pad_y, t.orig_height),
    )


def crop_roi(img, box, size=ROI_SIZE):
    """Cut ``box`` out of a grayscale image as a ``size x size`` patch.

    The clamped box is scaled so its shorter side becomes ``size``, then
    center-cropped along the longer side. No context margin is added.
    """
    img = to_grayscale(img)
    clipped = box.clip(img.width, img.height)
    if clipped.is_empty:
        raise InputError(f"box {box.to_list()} lies outside the {img.width}x{img.height} image")
    s = size / min(clipped.width, clipped.height)
    off_x = (clipped.width * s - size) / 2.0
    off_y = (clipped.height * s - size) / 2.0
    origin_x = clipped.x1 + off_x / s
    origin_y = clipped.y1 + off_y / s
    # patch pixel centers, expressed as source pixel indices
    xs = origin_x + (np.arange(size) + 0.5) / s - 0.5
    ys = origin_y + (np.arange(size) + 0.5) / s - 0.5
    pixels = sample_bilinear(img.plane, ys, xs)
    return RoiPatch(np.clip(pixels, 0.0, 1.0), clipped, RoiTransform(s, origin_x, origin_y))


def colormap(t):
    """Blue-cyan-yellow-red map; returns ``t.shape + (3,)``."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    knots = COLORMAP_POINTS[:, 0]
    return np.stack([np.interp(t, knots, COLORMAP_POINTS[:, k]) for k in (1, 2, 3)], axis=-1)


def render_overlay(img, heatmap, alpha=0.5):
    """Blend a heatmap over the image; always returns a 3-channel image."""
    img = _as_image(img)
    values = np.asarray(getattr(heatmap, "values", heatmap), dtype=np.float64)
    if values.shape != (img.height, img.width):
        raise InputError(
            f"heatmap shape {values.shape} does not match image {(img.height, img.width)}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must lie in [0, 1], got {alpha}")
    gray = to_grayscale(img).pixels
    base = np.repeat(gray, 3, axis=2)
    out = (1.0 - alpha) * base + alpha * colormap(values)
    return RadiographImage(np.clip(out, 0.0, 1.0))


# -- augmentations -------------------------------------------------------------
# Brightness and contrast jitter is intentionally not offered.


def hflip(img, boxes=()):
    img = _as_image(img)
    w = img.width
    flipped = [BBox(w - b.x2, b.y1, w - b.x1, b.y2) for b in boxes]
    return RadiographImage(img.pixels[:, ::-1]), flipped


def rotate(img, boxes=(), degrees=90):
    """Rotate counter-clockwise by a multiple of 90 degrees."""
    img = _as_image(img)
    if degrees not in (90, 180, 270):
        raise InputError(f"unsupported rotation angle {degrees}")
    w, h = img.width, img.height
    if degrees == 90:
        out = [BBox(b.y1, w - b.x2, b.y2, w - b.x1) for b in boxes]
    elif degrees == 180:
        out = [BBox(w - b.x2, h - b.y2, w - b.x1, h - b.y1) for b in boxes]
    else:
        out = [BBox(h - b.y2, b.x1, h - b.y1, b.x2) for b in boxes]
    return RadiographImage(np.rot90(img.pixels, k=degrees // 90, axes=(0, 1))), out


def mosaic(images, boxes, seed, min_area_fraction=0.25):
    """Tile four equally sized images around a seeded split point.

    The canvas is twice the tile size in each direction. Returns the canvas,
    the surviving boxes and, for each, its ``(tile, index)`` origin so the
    caller can carry labels along.
    """
    if len(images) != 4 or len(boxes) != 4:
        raise InputError("mosaic needs exactly four images and four box lists")
    images = [_as_image(im) for im in images]
    h, w, c = images[0].pixels.shape
    if any(im.pixels.shape != (h, w, c) for im in images):
        raise InputError("mosaic inputs must share one size and channel count")

    rng = np.random.default_rng(seed)
    xc = int(rng.integers(w // 2, w + w // 2 + 1))
    yc = int(rng.integers(h // 2, h + h // 2 + 1))
    canvas = np.full((2 * h, 2 * w, c), PAD_VALUE)
    # top-left corner of each tile on the canvas
    offsets = [(xc - w, yc - h), (xc, yc - h), (xc - w, yc), (xc, yc)]

    kept, origins = [], []
    for tile, (im, tile_boxes, (ox, oy)) in enumerate(zip(images, boxes, offsets)):
        cx1, cy1 = max(ox, 0), max(oy, 0)
        cx2, cy2 = min(ox + w, 2 * w), min(oy + h, 2 * h)
        if cx2 <= cx1 or cy2 <= cy1:
            continue
        canvas[cy1:cy2, cx1:cx2] = im.pixels[cy1 - oy:cy2 - oy, cx1 - ox:cx2 - ox]
        visible = BBox(cx1, cy1, cx2, cy2)
        for i, b in enumerate(tile_boxes):
            moved = BBox(b.x1 + ox, b.y1 + oy, b.x2 + ox, b.y2 + oy)
            x1, y1 = max(moved.x1, visible.x1), max(moved.y1, visible.y1)
            x2, y2 = min(moved.x2, visible.x2), min(moved.y2, visible.y2)
            if x2 <= x1 or y2 <= y1:
                continue
            clipped = BBox(x1, y1, x2, y2)
            if clipped.area >= min_area_fraction * b.area:
                kept.append(clipped)
                origins.append((tile, i))
    return RadiographImage(canvas), kept, origins


# -- file I/O ------------------------------------------------------------------


def load_image(path):
    """Read an 8/16-bit grayscale or 8-bit RGB PNG into [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("RGBA", "LA"):
                im = im.convert(mode[:-1])
                mode = im.mode
            arr = np.array(im)
    except FileNotFoundError:
        raise InputError(f"image not found: {path}") from None
    except OSError as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from None

    if mode in ("L", "RGB"):
        return RadiographImage(arr.astype(np.float64) / 255.0)
    if mode.startswith("I;16") or mode == "I":
        return RadiographImage(arr.astype(np.float64) / 65535.0)
    raise InputError(f"unsupported image mode {mode!r} in {path}")


def save_image(path, img):
    """Write an image as an 8-bit grayscale or RGB PNG."""
    img = _as_image(img)
    data = np.round(img.pixels * 255.0).astype(np.uint8)
    if img.channels == 1:
        data = data[:, :, 0]
    Image.fromarray(data).save(path, format="PNG")


def save_png16(path, values):
    """Write a 2-D [0, 1] array as a 16-bit grayscale PNG."""
    values = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    data = np.round(values * 65535.0).astype(np.uint16)
    Image.fromarray(data).save(path, format="PNG")


def load_png16(path):
    with Image.open(path) as im:
        if not (im.mode.startswith("I;16") or im.mode == "I"):
            raise InputError(f"{path} is not a 16-bit grayscale PNG (mode {im.mode})")
        return np.array(im).astype(np.float64) / 65535.0
