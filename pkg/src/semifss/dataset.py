"""Class-organized segmentation datasets: loading, splitting and a synthetic shapes corpus.

On-disk layout (one directory per class, masks share the image stem)::

    <root>/<class_name>/<stem>.png
    <root>/<class_name>/<stem>_mask.png

Images are scaled to [0, 1] float32; masks are binarized to {0, 1} uint8 after resizing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    CorruptImage,
    DegenerateSplit,
    EmptyClass,
    MissingMask,
    UnsupportedClassCount,
)

MASK_SUFFIX = "_mask"
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class ClassDataset:
    root_path: Path
    classes: tuple[str, ...]
    entries: dict[str, tuple[tuple[Path, Path], ...]]
    image_size: tuple[int, int]
    channels: int
    images: dict[str, np.ndarray] = field(repr=False)  # class -> (n, H, W, Ch) float32
    masks: dict[str, np.ndarray] = field(repr=False)  # class -> (n, H, W) uint8

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class identifiers must be unique")
        for arr in list(self.images.values()) + list(self.masks.values()):
            arr.setflags(write=False)

    def __len__(self):
        return sum(len(v) for v in self.entries.values())

    def n_entries(self, class_id: str) -> int:
        return len(self.entries[class_id])

    def image(self, class_id: str, index: int) -> np.ndarray:
        return self.images[class_id][index]

    def mask(self, class_id: str, index: int) -> np.ndarray:
        return self.masks[class_id][index]

    def stem(self, class_id: str, index: int) -> str:
        return self.entries[class_id][index][0].stem

    def subset(self, classes) -> ClassDataset:
        """View restricted to ``classes`` (order follows this dataset)."""
        keep = tuple(c for c in self.classes if c in set(classes))
        return ClassDataset(
            root_path=self.root_path,
            classes=keep,
            entries={c: self.entries[c] for c in keep},
            image_size=self.image_size,
            channels=self.channels,
            images={c: self.images[c] for c in keep},
            masks={c: self.masks[c] for c in keep},
        )


@dataclass(frozen=True)
class DatasetSplit:
    train_classes: frozenset[str]
    test_classes: frozenset[str]

    def __post_init__(self):
        if self.train_classes & self.test_classes:
            raise DegenerateSplit("train and test classes overlap")


def _mode_for(channels):
    return {1: "L", 3: "RGB"}[channels]


def read_image(path, target_size, channels=3) -> np.ndarray:
    """Decode ``path``, resize bilinearly to ``target_size`` (H, W), return H×W×Ch in [0, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert(_mode_for(channels))
            h, w = target_size
            if im.size != (w, h):
                im = im.resize((w, h), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImage(f"cannot decode {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def read_mask(path, target_size) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            h, w = target_size
            if im.size != (w, h):
                im = im.resize((w, h), Image.NEAREST)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImage(f"cannot decode {path}: {exc}") from exc
    return (arr >= 0.5).astype(np.uint8)


def _image_files(directory: Path):
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS and not p.stem.endswith(MASK_SUFFIX)
    )


def _find_mask(image_path: Path):
    for ext in (image_path.suffix,) + IMAGE_EXTENSIONS:
        candidate = image_path.with_name(image_path.stem + MASK_SUFFIX + ext)
        if candidate.exists():
            return candidate
    return None


def load_class_dataset(root, target_size, channels=3) -> ClassDataset:
    """Load every ``<class>/<stem>.<ext>`` + ``<stem>_mask.<ext>`` pair under ``root``.

    Raises MissingMask for an image without a mask, EmptyClass for a class directory
    with no pairs, CorruptImage for undecodable files.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    target_size = (int(target_size[0]), int(target_size[1]))
    classes, entries, images, masks = [], {}, {}, {}
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        pairs = []
        for img_path in _image_files(class_dir):
            mask_path = _find_mask(img_path)
            if mask_path is None:
                raise MissingMask(class_dir.name, img_path.stem)
            pairs.append((img_path, mask_path))
        if not pairs:
            raise EmptyClass(f"class directory {class_dir} contains no image/mask pairs")
        name = class_dir.name
        classes.append(name)
        entries[name] = tuple(pairs)
        images[name] = np.stack([read_image(i, target_size, channels) for i, _ in pairs])
        masks[name] = np.stack([read_mask(m, target_size) for _, m in pairs])
    if not classes:
        raise EmptyClass(f"no class directories under {root}")
    return ClassDataset(
        root_path=root,
        classes=tuple(classes),
        entries=entries,
        image_size=target_size,
        channels=channels,
        images=images,
        masks=masks,
    )


def load_image_pool(directory, target_size, channels=3) -> list[np.ndarray]:
    """Load every image below ``directory`` (recursively), ignoring mask files."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"unlabeled pool {directory} does not exist")
    files = sorted(
        p for p in directory.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS and not p.stem.endswith(MASK_SUFFIX)
    )
    return [read_image(p, target_size, channels) for p in files]


def split_classes(dataset: ClassDataset, test_fraction: float, seed: int) -> DatasetSplit:
    """Seeded disjoint class partition; each side receives at least one class."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    classes = sorted(dataset.classes)
    n = len(classes)
    if n < 2:
        raise DegenerateSplit(f"cannot split {n} class(es) into two non-empty parts")
    n_test = min(max(math.floor(n * test_fraction + 1e-9), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    test = frozenset(classes[i] for i in order[:n_test])
    train = frozenset(classes[i] for i in order[n_test:])
    return DatasetSplit(train_classes=train, test_classes=test)


# ---------------------------------------------------------------------------
# synthetic shapes corpus

SHAPE_FAMILIES = ("disk", "square", "triangle", "ring", "cross", "diamond", "hexagon", "star")
STYLES = ("solid", "stripes", "checker", "dots")
DEFAULT_DISTRACTORS = 0


def _polygon_mask(yy, xx, vertices):
    """Even-odd point-in-polygon test on pixel centers."""
    inside = np.zeros(yy.shape, dtype=bool)
    n = len(vertices)
    for i in range(n):
        y1, x1 = vertices[i]
        y2, x2 = vertices[(i + 1) % n]
        crosses = (y1 > yy) != (y2 > yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (x2 - x1) * (yy - y1) / (y2 - y1) + x1
        inside ^= crosses & (xx < x_at)
    return inside


def _regular_polygon(cy, cx, r, n, angle):
    t = angle + 2 * np.pi * np.arange(n) / n
    return list(zip(cy + r * np.sin(t), cx + r * np.cos(t)))


def rasterize_shape(family, size, cy, cx, r, angle) -> np.ndarray:
    """Boolean support of one shape instance on an ``size`` grid (pixel centers)."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    # rotated local coordinates
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    if family == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if family == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if family == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if family == "diamond":
        return np.abs(u) + np.abs(v) <= r
    if family == "cross":
        arm = 0.35 * r
        return ((np.abs(u) <= r) & (np.abs(v) <= arm)) | ((np.abs(v) <= r) & (np.abs(u) <= arm))
    if family == "triangle":
        return _polygon_mask(yy, xx, _regular_polygon(cy, cx, r, 3, angle))
    if family == "hexagon":
        return _polygon_mask(yy, xx, _regular_polygon(cy, cx, r, 6, angle))
    if family == "star":
        outer = _regular_polygon(cy, cx, r, 5, angle)
        inner = _regular_polygon(cy, cx, 0.45 * r, 5, angle + np.pi / 5)
        verts = [p for pair in zip(outer, inner) for p in pair]
        return _polygon_mask(yy, xx, verts)
    raise ValueError(f"unknown shape family {family!r}")


def class_names(n_classes: int) -> list[str]:
    capacity = len(SHAPE_FAMILIES) * len(STYLES)
    if n_classes > capacity:
        raise UnsupportedClassCount(
            f"{n_classes} classes requested but only {capacity} shape/style combinations exist"
        )
    return [
        f"{SHAPE_FAMILIES[i % len(SHAPE_FAMILIES)]}_{STYLES[i // len(SHAPE_FAMILIES)]}"
        for i in range(n_classes)
    ]


def _class_color(index):
    # golden-ratio hue walk keeps neighbouring class colours far apart
    hue = (index * 0.618033988749895) % 1.0
    return np.array(_hsv_to_rgb(hue, 0.85, 0.95))


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _style_pattern(style, size, rng):
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    period = max(2, round(min(h, w) / 10))
    phase = rng.integers(0, period)
    if style == "solid":
        return np.ones(size)
    if style == "stripes":
        return np.where(((yy + phase) // period) % 2 == 0, 1.0, 0.55)
    if style == "checker":
        return np.where((((yy + phase) // period) + (xx // period)) % 2 == 0, 1.0, 0.55)
    if style == "dots":
        return np.where(((yy + phase) % (2 * period) < period) & ((xx + phase) % (2 * period) < period), 0.55, 1.0)
    raise ValueError(style)


def _background(size, channels, rng):
    """Smooth random colour field plus pixel noise."""
    h, w = size
    coarse = rng.uniform(0.0, 1.0, size=(4, 4, channels))
    im = Image.fromarray((coarse * 255).astype(np.uint8).squeeze())
    smooth = np.asarray(im.resize((w, h), Image.BICUBIC), dtype=np.float64) / 255.0
    if smooth.ndim == 2:
        smooth = smooth[..., None]
    return np.clip(smooth + rng.normal(0.0, 0.06, size=(h, w, channels)), 0.0, 1.0)


def _place(size, rng, lo, hi):
    h, w = size
    r = rng.uniform(lo, hi) * min(h, w)
    return rng.uniform(r, h - r), rng.uniform(r, w - r), r, rng.uniform(0, 2 * np.pi)


def _class_look(class_index):
    family = SHAPE_FAMILIES[class_index % len(SHAPE_FAMILIES)]
    style = STYLES[(class_index // len(SHAPE_FAMILIES)) % len(STYLES)]
    return family, style, _class_color(class_index)


def _overlaps(a, b, margin=1.0):
    (ya, xa, ra, _), (yb, xb, rb, _) = a, b
    # 1.15 r bounds every family's extent (square corners reach 0.8 * sqrt(2) r)
    return (ya - yb) ** 2 + (xa - xb) ** 2 < (1.15 * (ra + rb) + margin) ** 2


def render_sample(class_index, size, rng, channels=3, distractors=0):
    """One (image, mask) pair for class ``class_index``: H×W×Ch float64 and H×W uint8.

    ``distractors`` clutter shapes (hue at least 0.1 away from the class hue; half of
    them copy the class shape and fill, the rest are random) are drawn from the same size range as the target and placed
    without overlapping it, so the mask is exactly the target's rasterized support.
    """
    family, style, color = _class_look(class_index)
    class_hue = (class_index * 0.618033988749895) % 1.0
    image = _background(size, channels, rng)
    placed = [_place(size, rng, 0.15, 0.27)]
    for _ in range(distractors):
        for _attempt in range(50):
            cand = _place(size, rng, 0.15, 0.27)
            if not any(_overlaps(cand, p) for p in placed):
                placed.append(cand)
                break
    # rejection sampling favours small, off-centre later shapes; pick the target slot
    # at random so position and size carry no hint of which shape is the target
    target = placed.pop(int(rng.integers(len(placed))))
    for cand in placed:
        hue = rng.uniform()
        while _hue_distance(hue, class_hue) < 0.1:
            hue = rng.uniform()
        if rng.random() < 0.5:  # look-alike: same shape and fill, only the colour differs
            d_family, d_style = family, style
        else:
            d_family = SHAPE_FAMILIES[rng.integers(len(SHAPE_FAMILIES))]
            d_style = STYLES[rng.integers(len(STYLES))]
        _paint(image, rasterize_shape(d_family, size, *cand), np.array(_hsv_to_rgb(hue, 0.85, 0.95)),
               d_style, rng, channels)
    support = rasterize_shape(family, size, *target)
    if not support.any():  # degenerate rasterization, force centre pixel
        support[int(target[0]), int(target[1])] = True
    _paint(image, support, np.clip(color + rng.normal(0, 0.03, 3), 0, 1), style, rng, channels)
    return image, support.astype(np.uint8)


def _hue_distance(a, b):
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)


def _paint(image, support, color, style, rng, channels):
    if channels == 1:
        color = color.mean(keepdims=True)
    fg = _style_pattern(style, support.shape, rng)[..., None] * color
    fg = np.clip(fg + rng.normal(0.0, 0.03, size=fg.shape), 0.0, 1.0)
    image[support] = fg[support]


def generate_shapes_dataset(n_classes, per_class, size, seed, out_root, channels=3,
                            distractors=DEFAULT_DISTRACTORS) -> ClassDataset:
    """Write a deterministic synthetic corpus and return it loaded.

    Each class is one (shape family, fill style, colour) combination; each image holds
    a single randomly placed, scaled and rotated instance of its class on a textured
    background, plus ``distractors`` non-overlapping clutter shapes of random
    appearance that are not part of the mask.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    size = (int(size[0]), int(size[1]))
    names = class_names(n_classes)
    out_root = Path(out_root)
    for ci, name in enumerate(names):
        class_dir = out_root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        for j in range(per_class):
            rng = np.random.default_rng([seed, ci, j])
            image, mask = render_sample(ci, size, rng, channels, distractors)
            pixels = np.round(image * 255).astype(np.uint8).squeeze()
            Image.fromarray(pixels).save(class_dir / f"{j:04d}.png")
            Image.fromarray(mask * 255).save(class_dir / f"{j:04d}{MASK_SUFFIX}.png")
    return load_class_dataset(out_root, size, channels)


def generate_unlabeled_pool(class_indices, per_class, size, seed, out_dir, channels=3,
                            distractors=DEFAULT_DISTRACTORS) -> list[Path]:
    """Write mask-free images of the given classes (for the denoising pool)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for ci in class_indices:
        for j in range(per_class):
            rng = np.random.default_rng([seed, 1_000_003, ci, j])
            image, _ = render_sample(ci, size, rng, channels, distractors)
            path = out_dir / f"c{ci:02d}_{j:04d}.png"
            Image.fromarray(np.round(image * 255).astype(np.uint8).squeeze()).save(path)
            written.append(path)
    return written
