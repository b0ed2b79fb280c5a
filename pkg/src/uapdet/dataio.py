"""Dataset directory serialization.

A dataset directory holds lossless PNG images plus one COCO-style
``annotations.json``, so synthetic and external datasets share one format:

    <dir>/annotations.json
    <dir>/images/img_000000.png, ...

Category ids in the JSON are 1-based; in memory classes are dense 0-based
ids ordered by category id.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from . import ingest, ioutil
from .errors import DataError
from .scenes import ClassId, Dataset, GroundTruthObject


def save_dataset(dataset: Dataset, out_dir) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    images_meta, annotations = [], []
    ann_id = 1
    for i, (img, objs) in enumerate(zip(dataset.images, dataset.ground_truth)):
        h, w = img.shape[0], img.shape[1]
        file_name = f"images/img_{i:06d}.png"
        arr = np.asarray(img)
        if arr.min() < 0 or arr.max() > 255:
            raise DataError(f"image {i} has values outside [0, 255]")
        Image.fromarray(arr.astype(np.uint8)).save(out_dir / file_name, format="PNG")
        images_meta.append({"id": i, "file_name": file_name, "width": w, "height": h})
        for o in objs:
            x1, y1, x2, y2 = o.box
            annotations.append({
                "id": ann_id, "image_id": i, "category_id": o.class_id + 1,
                "bbox": [x1, y1, x2 - x1, y2 - y1],
                "area": (x2 - x1) * (y2 - y1), "iscrowd": 0,
            })
            ann_id += 1

    doc = {
        "images": images_meta,
        "annotations": annotations,
        "categories": [{"id": c.id + 1, "name": c.name} for c in dataset.classes],
    }
    ioutil.write_json_atomic(out_dir / "annotations.json", doc)
    return out_dir


def load_dataset(path, image_size: tuple[int, int] | None = None) -> Dataset:
    """Load a dataset directory (or annotation file plus sibling images).

    When image_size is given and differs from a stored image, the image is
    resized bilinearly and its boxes are rescaled to match.
    """
    path = Path(path)
    ann_path = path / "annotations.json" if path.is_dir() else path
    root = ann_path.parent
    annset = ingest.load_annotations(ann_path)

    cat_ids = sorted(annset.categories)
    classes = tuple(ClassId(i, annset.categories[cid]) for i, cid in enumerate(cat_ids))
    dense = {cid: i for i, cid in enumerate(cat_ids)}

    by_image: dict[int, list] = {i: [] for i in annset.images}
    for ann in annset.annotations:
        by_image[ann.image_id].append(ann)

    images, gts = [], []
    for img_id in sorted(annset.images):
        info = annset.images[img_id]
        if not info.file_name:
            raise DataError(f"image {img_id} has no file_name; cannot load pixels")
        img_path = root / info.file_name
        if not img_path.exists():
            raise DataError(f"image file missing: {img_path}")
        with Image.open(img_path) as im:
            im = im.convert("RGB")
            sx = sy = 1.0
            if image_size is not None and (im.height, im.width) != tuple(image_size):
                sy = image_size[0] / im.height
                sx = image_size[1] / im.width
                im = im.resize((image_size[1], image_size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64)
        images.append(arr)

        objs = []
        for ann in by_image[img_id]:
            x, y, w, h = ann.bbox
            box = (x * sx, y * sy, (x + w) * sx, (y + h) * sy)
            if not (box[0] < box[2] and box[1] < box[3]):
                raise DataError(f"annotation {ann.id}: degenerate box {ann.bbox}")
            objs.append(GroundTruthObject(class_id=dense[ann.category_id], box=box))
        gts.append(objs)

    return Dataset(images=images, ground_truth=gts, classes=classes)
