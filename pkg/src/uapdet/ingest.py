"""COCO-style annotation ingestion and the file-based detector adapter.

Annotation files follow the standard COCO JSON shape (images / annotations /
categories arrays with xywh boxes), so real COCO files work unmodified.
External detection dumps let the blind-degree metrics run on detections
produced by any detector outside this package:

    {"format_version": 1, "kind": "uapdet-detections",
     "detections": {"<image_id>": [{"bbox": [x1, y1, x2, y2],
                                    "category_id": 3,
                                    "score": 0.93}, ...], ...}}

Each entry may carry a scalar "score" or a "class_probs" vector (its max is
then the score).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import ioutil
from .errors import DataError
from .metrics import BlindDegreeReport

DUMP_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageInfo:
    id: int
    file_name: str | None
    width: int | None
    height: int | None


@dataclass(frozen=True)
class AnnotationRec:
    id: int
    image_id: int
    category_id: int
    bbox: tuple[float, float, float, float]  # x, y, w, h (COCO convention)


@dataclass
class AnnotationSet:
    images: dict[int, ImageInfo]
    annotations: list[AnnotationRec]
    categories: dict[int, str]

    @property
    def name_to_id(self) -> dict[str, int]:
        return {n: i for i, n in self.categories.items()}

    def resolve_category(self, category) -> int:
        if isinstance(category, str):
            mapping = self.name_to_id
            if category not in mapping:
                raise DataError(f"unknown category name {category!r}")
            return mapping[category]
        cid = int(category)
        if cid not in self.categories:
            raise DataError(f"unknown category id {cid}")
        return cid


def _need(record: dict, key: str, where: str):
    if key not in record:
        raise DataError(f"{where}: missing required key {key!r}")
    return record[key]


def load_annotations(path) -> AnnotationSet:
    """Parse and validate a COCO-style annotation file.

    Schema violations and dangling references are fatal, with diagnostics
    naming the offending record.
    """
    try:
        doc = ioutil.read_json(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read annotations {path}: {e}") from e
    if not isinstance(doc, dict):
        raise DataError(f"{path}: top level must be a JSON object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise DataError(f"{path}: missing or non-list {key!r} section")

    images: dict[int, ImageInfo] = {}
    for i, rec in enumerate(doc["images"]):
        where = f"images[{i}]"
        img_id = int(_need(rec, "id", where))
        if img_id in images:
            raise DataError(f"{where}: duplicate image id {img_id}")
        images[img_id] = ImageInfo(
            id=img_id, file_name=rec.get("file_name"),
            width=rec.get("width"), height=rec.get("height"))

    categories: dict[int, str] = {}
    for i, rec in enumerate(doc["categories"]):
        where = f"categories[{i}]"
        cid = int(_need(rec, "id", where))
        name = str(_need(rec, "name", where))
        if cid in categories:
            raise DataError(f"{where}: duplicate category id {cid}")
        categories[cid] = name
    if len(set(categories.values())) != len(categories):
        raise DataError(f"{path}: duplicate category names")

    annotations: list[AnnotationRec] = []
    for i, rec in enumerate(doc["annotations"]):
        where = f"annotations[{i}]"
        img_id = int(_need(rec, "image_id", where))
        cid = int(_need(rec, "category_id", where))
        bbox = _need(rec, "bbox", where)
        if img_id not in images:
            raise DataError(f"{where}: image_id {img_id} not in images")
        if cid not in categories:
            raise DataError(f"{where}: category_id {cid} not in categories")
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise DataError(f"{where}: bbox must be a 4-element [x, y, w, h] list")
        annotations.append(AnnotationRec(
            id=int(rec.get("id", i)), image_id=img_id, category_id=cid,
            bbox=tuple(float(b) for b in bbox)))

    return AnnotationSet(images=images, annotations=annotations, categories=categories)


def count_category_images(annset: AnnotationSet, categories) -> dict[str, int]:
    """Distinct images containing >= 1 annotation of each named category."""
    ids = {name: annset.resolve_category(name) for name in categories}
    seen: dict[int, set[int]] = {cid: set() for cid in ids.values()}
    for ann in annset.annotations:
        if ann.category_id in seen:
            seen[ann.category_id].add(ann.image_id)
    return {name: len(seen[cid]) for name, cid in ids.items()}


# ---------------------------------------------------------------------------
# External detection dumps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DumpDetection:
    box: tuple[float, float, float, float]  # x1, y1, x2, y2
    category_id: int
    score: float


@dataclass
class ExternalDetectionDump:
    detections: dict[int, list[DumpDetection]]

    @property
    def image_ids(self) -> set[int]:
        return set(self.detections)


def load_detection_dump(path) -> ExternalDetectionDump:
    try:
        doc = ioutil.read_json(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read detection dump {path}: {e}") from e
    if doc.get("kind") != "uapdet-detections":
        raise DataError(f"{path} is not a detection dump")
    dets_by_image: dict[int, list[DumpDetection]] = {}
    for key, rows in _need(doc, "detections", str(path)).items():
        img_id = int(key)
        dets = []
        for j, rec in enumerate(rows):
            where = f"detections[{key}][{j}]"
            bbox = _need(rec, "bbox", where)
            if not isinstance(bbox, list) or len(bbox) != 4:
                raise DataError(f"{where}: bbox must be a 4-element list")
            if "score" in rec:
                score = float(rec["score"])
            elif "class_probs" in rec:
                probs = rec["class_probs"]
                if not isinstance(probs, list) or not probs:
                    raise DataError(f"{where}: class_probs must be a nonempty list")
                score = float(max(probs))
            else:
                raise DataError(f"{where}: needs a score or class_probs")
            dets.append(DumpDetection(box=tuple(float(b) for b in bbox),
                                      category_id=int(_need(rec, "category_id", where)),
                                      score=score))
        dets_by_image[img_id] = dets
    return ExternalDetectionDump(detections=dets_by_image)


def save_detection_dump(dump: ExternalDetectionDump, path) -> None:
    doc = {
        "format_version": DUMP_FORMAT_VERSION,
        "kind": "uapdet-detections",
        "detections": {
            str(img_id): [{"bbox": list(d.box), "category_id": d.category_id,
                           "score": d.score} for d in dets]
            for img_id, dets in sorted(dump.detections.items())
        },
    }
    ioutil.write_json_atomic(path, doc)


def _dump_count(dets: list[DumpDetection], theta: float, target: int) -> int:
    return sum(1 for d in dets if d.score > theta and d.category_id == target)


def evaluate_external(annset: AnnotationSet, dump: ExternalDetectionDump,
                      clean_dump: ExternalDetectionDump, target_class,
                      theta: float) -> tuple[BlindDegreeReport, BlindDegreeReport]:
    """Blind degrees for externally produced detections.

    Curation comes from the clean dump (images with >= 1 target detection
    above theta); both reports are computed over that curated subset, so the
    baseline report always shows an image-level blind degree of 1.0.
    Returns (baseline_report, perturbed_report).
    """
    target = annset.resolve_category(target_class)
    if not 0.0 < theta <= 1.0:
        raise DataError(f"theta must be in (0, 1], got {theta}")
    if dump.image_ids != clean_dump.image_ids:
        diff = sorted(dump.image_ids.symmetric_difference(clean_dump.image_ids))
        raise DataError(f"dump coverage mismatch; differing image ids {diff[:10]}")
    unknown = sorted(i for i in dump.image_ids if i not in annset.images)
    if unknown:
        raise DataError(f"dump references image ids not in annotations: {unknown[:10]}")

    curated = [i for i in sorted(clean_dump.image_ids)
               if _dump_count(clean_dump.detections[i], theta, target) > 0]
    if not curated:
        raise DataError("curation kept no images: the clean dump never detects "
                        f"category {target} above theta={theta}")

    name = annset.categories[target]

    def report(d: ExternalDetectionDump) -> BlindDegreeReport:
        counts = [_dump_count(d.detections[i], theta, target) for i in curated]
        return BlindDegreeReport(
            class_id=target, class_name=name,
            b_img=sum(1 for c in counts if c > 0) / len(curated),
            b_ins=sum(counts) / len(curated),
            theta=theta, n=len(curated), v_linf=None)

    return report(clean_dump), report(dump)
