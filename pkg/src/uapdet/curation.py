"""Pre-attack dataset curation.

An image is kept for a target class only if the clean detector already finds
at least one instance of that class above the score threshold.  This keeps
detector misses out of the attack evaluation: with zero perturbation the
image-level blind degree over a curated set is exactly 1.0.

The rule is detector-based, not ground-truth-based: a confident false
positive of the target class also retains the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import detector as det
from . import ioutil
from .errors import UsageError
from .scenes import ClassId, Dataset, GroundTruthObject


@dataclass(eq=False)
class CuratedEntry:
    image_id: int
    image: np.ndarray
    ground_truth: list[GroundTruthObject]
    baseline: list[det.Detection]  # clean detections, cached at curation time


@dataclass(eq=False)
class CuratedDataset:
    target_class: int
    theta: float
    max_imgs: int
    entries: list[CuratedEntry]
    rejected_ids: list[int]
    classes: tuple[ClassId, ...]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def retained_ids(self) -> list[int]:
        return [e.image_id for e in self.entries]

    def as_dataset(self) -> Dataset:
        return Dataset(images=[e.image for e in self.entries],
                       ground_truth=[e.ground_truth for e in self.entries],
                       classes=self.classes)


def curate(dataset: Dataset, weights: det.DetectorWeights, target_class: int,
           theta: float, max_imgs: int = 500) -> CuratedDataset:
    """Keep images whose clean detections contain the target class above theta.

    Retained entries preserve dataset order, truncated to the first max_imgs
    qualifying images.  An empty result is legal; rejected ids double as the
    diagnostic count.
    """
    if not 0.0 < theta <= 1.0:
        raise UsageError(f"theta must be in (0, 1], got {theta}")
    if max_imgs < 1:
        raise UsageError("max_imgs must be >= 1")
    if not any(c.id == target_class for c in dataset.classes):
        raise UsageError(f"target class id {target_class} not in dataset classes")

    entries: list[CuratedEntry] = []
    rejected: list[int] = []
    for i, (image, gt) in enumerate(zip(dataset.images, dataset.ground_truth)):
        dets = det.detect(weights, image, theta)
        if any(d.class_id == target_class for d in dets):
            if len(entries) < max_imgs:
                entries.append(CuratedEntry(image_id=i, image=image,
                                            ground_truth=gt, baseline=dets))
        else:
            rejected.append(i)
    return CuratedDataset(target_class=target_class, theta=theta, max_imgs=max_imgs,
                          entries=entries, rejected_ids=rejected, classes=dataset.classes)


def manifest(curated: CuratedDataset, weights: det.DetectorWeights) -> dict:
    name = next(c.name for c in curated.classes if c.id == curated.target_class)
    return {
        "format_version": 1,
        "kind": "uapdet-curation-manifest",
        "target_class_id": curated.target_class,
        "target_class_name": name,
        "theta": curated.theta,
        "max_imgs": curated.max_imgs,
        "retained_ids": curated.retained_ids,
        "rejected_ids": curated.rejected_ids,
        "detector_digest": det.weights_digest(weights),
    }


def write_manifest(curated: CuratedDataset, weights: det.DetectorWeights, path) -> None:
    ioutil.write_json_atomic(path, manifest(curated, weights))
