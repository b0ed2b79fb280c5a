"""Deterministic synthetic scenes for five stand-in traffic classes.

Each class has a distinct silhouette and colour family so a very small
detector becomes accurate after a short training run:

    person        -> tall blue ellipse
    car           -> wide red rectangle
    truck         -> longer, higher green rectangle
    stop sign     -> orange octagon
    traffic light -> dark housing with three stacked discs

Images are float64 H x W x 3 arrays on the [0, 255] intensity scale whose
values are already integers, so PNG serialization is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError

DEFAULT_CLASS_NAMES = ("person", "car", "truck", "stop sign", "traffic light")

# Distinct images per category in the COCO 2017 training split.  The five
# entries matching DEFAULT_CLASS_NAMES double as realistic frequency weights.
COCO_CATEGORY_IMAGE_COUNTS = {
    "person": 64115,
    "bicycle": 3252,
    "car": 12251,
    "truck": 6127,
    "bus": 3952,
    "motorcycle": 3502,
    "traffic light": 4139,
    "stop sign": 1734,
}


@dataclass(frozen=True)
class ClassId:
    id: int
    name: str


DEFAULT_CLASSES = tuple(ClassId(i, n) for i, n in enumerate(DEFAULT_CLASS_NAMES))


def coco_class_weights() -> tuple[float, ...]:
    """Per-class sampling weights proportional to COCO image counts."""
    return tuple(float(COCO_CATEGORY_IMAGE_COUNTS[n]) for n in DEFAULT_CLASS_NAMES)


@dataclass(frozen=True)
class GroundTruthObject:
    class_id: int
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 in pixels

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise UsageError(f"degenerate ground-truth box {self.box}")


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple[int, int] = (64, 64)  # H, W
    objects_per_image: tuple[int, int] = (1, 3)  # inclusive range
    class_frequency: tuple[float, ...] | None = None  # None -> uniform
    noise_level: float = 6.0
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h < 32 or w < 32:
            raise UsageError(f"image_size must be at least 32x32, got {h}x{w}")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise UsageError(f"bad objects_per_image range ({lo}, {hi})")
        # Larger counts cannot be placed with the minimum centre separation.
        capacity = max(1, (h // 16) * (w // 16))
        if hi > capacity:
            raise UsageError(
                f"objects_per_image upper bound {hi} does not fit a {h}x{w} image "
                f"(capacity {capacity})"
            )
        if self.class_frequency is not None:
            freq = np.asarray(self.class_frequency, dtype=float)
            if len(freq) != len(DEFAULT_CLASSES):
                raise UsageError(
                    f"class_frequency needs {len(DEFAULT_CLASSES)} weights, got {len(freq)}"
                )
            if (freq < 0).any() or freq.sum() <= 0:
                raise UsageError("class_frequency weights must be nonnegative with positive sum")
        if self.noise_level < 0:
            raise UsageError("noise_level must be nonnegative")
        if self.seed < 0:
            raise UsageError("seed must be nonnegative")

    def weights(self) -> np.ndarray:
        if self.class_frequency is None:
            return np.full(len(DEFAULT_CLASSES), 1.0 / len(DEFAULT_CLASSES))
        w = np.asarray(self.class_frequency, dtype=float)
        return w / w.sum()


@dataclass
class Dataset:
    images: list[np.ndarray]
    ground_truth: list[list[GroundTruthObject]]
    classes: tuple[ClassId, ...] = DEFAULT_CLASSES

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images[0].shape[0], self.images[0].shape[1]

    def class_named(self, name: str) -> ClassId:
        for c in self.classes:
            if c.name == name:
                return c
        raise UsageError(f"unknown class name {name!r}; have {[c.name for c in self.classes]}")


def _image_rng(spec: SceneSpec, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, index])


def _object_count(spec: SceneSpec, index: int) -> int:
    lo, hi = spec.objects_per_image
    # First draw of the per-image stream, so it can be recomputed cheaply
    # without rendering (render_scene must stay a pure function of index).
    return int(_image_rng(spec, index).integers(lo, hi + 1))


def _class_sequence(weights: np.ndarray, n_objects: int) -> list[int]:
    """Assign classes to a stream of objects by greedy proportional quota.

    Keeps every prefix of the stream within one object of the ideal
    weights * prefix_length allocation, so even rare classes appear at the
    requested rate in small datasets.  Ties go to the lowest class id.
    """
    counts = np.zeros(len(weights))
    out = []
    for j in range(n_objects):
        k = int(np.argmax(weights * (j + 1) - counts))
        out.append(k)
        counts[k] += 1
    return out


def _scene_classes(spec: SceneSpec, index: int, count: int) -> list[int]:
    offset = sum(_object_count(spec, i) for i in range(index))
    return _class_sequence(spec.weights(), offset + count)[offset:]


def _octagon_mask(dx: np.ndarray, dy: np.ndarray, t: float) -> np.ndarray:
    return (np.maximum(np.abs(dx), np.abs(dy)) <= t) & (np.abs(dx) + np.abs(dy) <= 1.35 * t)


# Muted per-class tints around a shared gray: classes are told apart by
# silhouette plus a subtle colour cast, not by saturated colour blocks, so a
# trained detector has to rely on fine contrasts (keeps it in the regime
# where small-budget perturbations are meaningful).
_CLASS_TINTS = {
    "person": (111, 120, 150),
    "car": (150, 108, 105),
    "truck": (108, 141, 114),
    "stop sign": (159, 132, 102),
    "light_housing": (105, 105, 106),
    "light_red": (156, 105, 102),
    "light_amber": (162, 150, 105),
    "light_green": (108, 150, 111),
}


def _draw_object(img: np.ndarray, class_id: int, cx: float, cy: float, s: float,
                 rng: np.random.Generator) -> tuple[float, float, float, float]:
    """Rasterize one object in place; returns its bounding box."""
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy

    def paint(mask, key):
        color = np.clip(np.asarray(_CLASS_TINTS[key], float) + rng.uniform(-8, 8, size=3),
                        0, 255)
        img[mask] = color

    if class_id == 0:  # person: tall ellipse
        rx, ry = 0.18 * s, 0.42 * s
        paint((dx / rx) ** 2 + (dy / ry) ** 2 <= 1.0, "person")
        hx, hy = rx, ry
    elif class_id == 1:  # car: wide rectangle
        hx, hy = 0.42 * s, 0.18 * s
        paint((np.abs(dx) <= hx) & (np.abs(dy) <= hy), "car")
    elif class_id == 2:  # truck: longer, higher rectangle
        hx, hy = 0.46 * s, 0.30 * s
        paint((np.abs(dx) <= hx) & (np.abs(dy) <= hy), "truck")
    elif class_id == 3:  # stop sign: octagon
        t = 0.40 * s
        paint(_octagon_mask(dx, dy, t), "stop sign")
        hx = hy = t
    elif class_id == 4:  # traffic light: housing + three discs
        hx, hy = 0.15 * s, 0.40 * s
        paint((np.abs(dx) <= hx) & (np.abs(dy) <= hy), "light_housing")
        r = 0.10 * s
        for off, key in ((-0.26 * s, "light_red"), (0.0, "light_amber"),
                         (0.26 * s, "light_green")):
            paint(dx ** 2 + (dy - off) ** 2 <= r ** 2, key)
    else:
        raise UsageError(f"no renderer for class id {class_id}")

    box = (max(0.0, cx - hx), max(0.0, cy - hy), min(float(w), cx + hx), min(float(h), cy + hy))
    return box


def render_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, list[GroundTruthObject]]:
    """Render one scene; deterministic pure function of (spec, index)."""
    if index < 0:
        raise UsageError("index must be nonnegative")
    h, w = spec.image_size
    rng = _image_rng(spec, index)
    lo, hi = spec.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    class_ids = _scene_classes(spec, index, count)

    img = np.empty((h, w, 3), dtype=float)
    img[:] = rng.uniform(40, 92, size=3)  # darker than the object tint band
    if spec.noise_level > 0:
        img += rng.normal(0.0, spec.noise_level, size=img.shape)

    objects = []
    centers: list[tuple[float, float]] = []
    min_sep = 14.0  # > cell diagonal of the default detector grid
    for class_id in class_ids:
        s = rng.uniform(0.20, 0.32) * min(h, w)
        margin = 0.5 * s + 2.0
        for _ in range(30):
            cx = rng.uniform(margin, w - margin)
            cy = rng.uniform(margin, h - margin)
            if all((cx - px) ** 2 + (cy - py) ** 2 >= min_sep ** 2 for px, py in centers):
                break
        centers.append((cx, cy))
        box = _draw_object(img, class_id, cx, cy, s, rng)
        objects.append(GroundTruthObject(class_id=class_id, box=box))

    img = np.clip(np.rint(img), 0, 255)
    return img, objects


def generate_dataset(spec: SceneSpec, n_images: int) -> Dataset:
    if n_images < 1:
        raise UsageError("n_images must be >= 1")
    images, gts = [], []
    for i in range(n_images):
        img, objs = render_scene(spec, i)
        images.append(img)
        gts.append(objs)
    return Dataset(images=images, ground_truth=gts, classes=DEFAULT_CLASSES)
