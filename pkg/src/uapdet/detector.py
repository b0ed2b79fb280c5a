"""Tiny differentiable single-shot grid detector.

Three 3x3 convolutions with two max-pool stages map an H x W x 3 image
(intensity scale [0, 255]) onto a dense (H/4) x (W/4) grid; a 1x1 head
predicts per cell an objectness logit, K foreground class logits, and four
box distances (left/top/right/bottom from the cell centre, so every cell
inside an object can regress its box).  Cells whose centre falls inside a
ground-truth box train as positives, which makes objects fire a cluster of
proposals the way dense one-stage detectors do; NMS collapses the cluster at
detection time.

A cell is a proposal when its objectness probability exceeds 0.5; its
confidence is the maximum foreground softmax probability, so thresholding at
theta=1.0 always yields an empty detection set.

Everything runs in float64 on CPU: forward, detection, training, and exact
input gradients for the perturbation optimizer.  All computations are
deterministic for fixed seeds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import boxes as boxutil
from . import ioutil
from .errors import DataError, NumericalError, UsageError
from .scenes import Dataset

log = logging.getLogger(__name__)

WEIGHTS_FORMAT_VERSION = 1
OBJECTNESS_THRESHOLD = 0.5  # proposal existence gate on sigmoid(objectness)
NMS_IOU_THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# Architecture and weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectorArch:
    image_size: tuple[int, int] = (64, 64)  # H, W
    channels: tuple[int, int, int] = (16, 32, 64)
    num_classes: int = 5
    activation: str = "gelu"  # "gelu" | "linear" (linear is for diagnostics)

    def __post_init__(self):
        h, w = self.image_size
        if h % 4 or w % 4 or h < 32 or w < 32:
            raise UsageError(f"image_size must be multiples of 4 and >= 32, got {h}x{w}")
        if self.num_classes < 2:
            raise UsageError("need at least 2 foreground classes")
        if self.activation not in ("gelu", "linear"):
            raise UsageError(f"unknown activation {self.activation!r}")

    @property
    def grid_size(self) -> tuple[int, int]:
        return self.image_size[0] // 4, self.image_size[1] // 4

    @property
    def out_channels(self) -> int:
        return 1 + self.num_classes + 4

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "channels": list(self.channels),
            "num_classes": self.num_classes,
            "activation": self.activation,
        }

    @staticmethod
    def from_dict(d: dict) -> "DetectorArch":
        return DetectorArch(
            image_size=tuple(d["image_size"]),
            channels=tuple(d["channels"]),
            num_classes=int(d["num_classes"]),
            activation=d.get("activation", "gelu"),
        )


class _GridNet(nn.Module):
    def __init__(self, arch: DetectorArch):
        super().__init__()
        c1, c2, c3 = arch.channels
        kw = dict(kernel_size=3, padding=1, dtype=torch.float64)
        act = nn.GELU() if arch.activation == "gelu" else nn.Identity()
        self.body = nn.Sequential(
            nn.Conv2d(3, c1, **kw), act, nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, **kw), act, nn.MaxPool2d(2),
            nn.Conv2d(c2, c3, **kw), act,
            nn.Conv2d(c3, arch.out_channels, kernel_size=1, dtype=torch.float64),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (N, 3, H, W) raw intensities.  Clamp to the valid range with a
        # straight-through gradient, then rescale to roughly [-1, 1].
        x = x + (x.clamp(0.0, 255.0) - x).detach()
        return self.body(x / 127.5 - 1.0)


@dataclass(eq=False)
class DetectorWeights:
    arch: DetectorArch
    params: dict[str, np.ndarray]
    _net: nn.Module | None = field(default=None, repr=False)

    def net(self) -> nn.Module:
        """Torch module with these parameters; cached (weights are immutable)."""
        if self._net is None:
            net = _GridNet(self.arch)
            state = {k: torch.from_numpy(v) for k, v in self.params.items()}
            net.load_state_dict(state)
            net.eval()
            for p in net.parameters():
                p.requires_grad_(False)
            self._net = net
        return self._net

    @staticmethod
    def from_net(arch: DetectorArch, net: nn.Module) -> "DetectorWeights":
        params = {k: v.detach().numpy().copy() for k, v in net.state_dict().items()}
        return DetectorWeights(arch=arch, params=params)


def random_weights(arch: DetectorArch, seed: int = 0) -> DetectorWeights:
    torch.manual_seed(seed)
    return DetectorWeights.from_net(arch, _GridNet(arch))


# ---------------------------------------------------------------------------
# Forward pass and detection decoding
# ---------------------------------------------------------------------------

@dataclass
class GridOutputs:
    """Raw per-cell predictions for one image (torch float64 tensors)."""
    obj_logits: torch.Tensor    # (G_h, G_w)
    class_logits: torch.Tensor  # (G_h, G_w, K)
    box_params: torch.Tensor    # (G_h, G_w, 4)

    def objectness(self) -> torch.Tensor:
        return torch.sigmoid(self.obj_logits)

    def class_probs(self) -> torch.Tensor:
        return torch.softmax(self.class_logits, dim=-1)


def _check_image(weights: DetectorWeights, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    expected = weights.arch.image_size + (3,)
    if image.shape != expected:
        raise UsageError(f"image shape {image.shape} does not match architecture {expected}")
    return image


def _run_net(net: nn.Module, arch: DetectorArch, x_hwc: torch.Tensor) -> GridOutputs:
    raw = net(x_hwc.permute(2, 0, 1).unsqueeze(0))[0]  # (C_out, G_h, G_w)
    k = arch.num_classes
    return GridOutputs(
        obj_logits=raw[0],
        class_logits=raw[1:1 + k].permute(1, 2, 0),
        box_params=raw[1 + k:].permute(1, 2, 0),
    )


def forward(weights: DetectorWeights, image: np.ndarray) -> GridOutputs:
    """Raw grid predictions; deterministic, no gradients retained."""
    image = _check_image(weights, image)
    with torch.no_grad():
        return _run_net(weights.net(), weights.arch, torch.from_numpy(image))


@dataclass(eq=False)
class Detection:
    box: tuple[float, float, float, float]
    class_probs: np.ndarray  # (K,), softmax over foreground classes
    class_id: int
    p_obj: float             # max foreground class probability
    objectness: float
    cell: tuple[int, int]


DetectionSet = list  # list[Detection]; same-class boxes never overlap past NMS


def decode_detections(outputs: GridOutputs, arch: DetectorArch, theta: float,
                      nms_iou: float = NMS_IOU_THRESHOLD) -> list[Detection]:
    """Proposals -> per-class NMS -> keep detections with p_obj > theta."""
    if not 0.0 < theta <= 1.0:
        raise UsageError(f"theta must be in (0, 1], got {theta}")
    h, w = arch.image_size
    gh, gw = arch.grid_size
    stride_y, stride_x = h / gh, w / gw

    obj = outputs.objectness().numpy()
    probs = outputs.class_probs().numpy()
    dist = torch.sigmoid(outputs.box_params).numpy()  # fractions of image size

    rows, cols = np.nonzero(obj > OBJECTNESS_THRESHOLD)
    proposals: list[Detection] = []
    for r, c in zip(rows.tolist(), cols.tolist()):
        p = probs[r, c]
        cid = int(np.argmax(p))  # ties -> lowest class id
        left, top, right, bottom = dist[r, c]
        ccx, ccy = (c + 0.5) * stride_x, (r + 0.5) * stride_y
        box = (max(0.0, ccx - left * w), max(0.0, ccy - top * h),
               min(float(w), ccx + right * w), min(float(h), ccy + bottom * h))
        proposals.append(Detection(box=box, class_probs=p.copy(), class_id=cid,
                                   p_obj=float(p[cid]), objectness=float(obj[r, c]),
                                   cell=(r, c)))

    kept: list[Detection] = []
    for cid in sorted({d.class_id for d in proposals}):
        group = [d for d in proposals if d.class_id == cid]
        idx = boxutil.nms(np.array([d.box for d in group]),
                          np.array([d.p_obj for d in group]), nms_iou)
        kept.extend(group[i] for i in idx)

    kept = [d for d in kept if d.p_obj > theta]
    kept.sort(key=lambda d: (-d.p_obj, d.class_id, d.cell))
    return kept


def detect(weights: DetectorWeights, image: np.ndarray, theta: float) -> list[Detection]:
    return decode_detections(forward(weights, image), weights.arch, theta)


def detect_many(weights: DetectorWeights, images, theta: float) -> list[list[Detection]]:
    return [detect(weights, img, theta) for img in images]


# ---------------------------------------------------------------------------
# Input gradients
# ---------------------------------------------------------------------------

def input_gradient(weights: DetectorWeights, image: np.ndarray, loss_spec) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the input image.

    `loss_spec(outputs, image_tensor)` must build a scalar torch tensor from
    the raw grid outputs and/or the (H, W, 3) input tensor.  Raises
    NumericalError if the loss or gradient is non-finite.
    """
    image = _check_image(weights, image)
    x = torch.from_numpy(image).clone().requires_grad_(True)
    outputs = _run_net(weights.net(), weights.arch, x)
    loss = loss_spec(outputs, x)
    if not torch.isfinite(loss):
        raise NumericalError(f"loss is non-finite: {float(loss)}")
    loss.backward()
    grad = x.grad
    if grad is None:
        return np.zeros_like(image)
    if not torch.all(torch.isfinite(grad)):
        raise NumericalError("input gradient contains non-finite values")
    return grad.numpy().copy()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 3e-3
    seed: int = 0
    noobj_weight: float = 0.5
    class_weight: float = 1.0
    box_weight: float = 5.0
    label_smoothing: float = 0.05

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise UsageError("epochs, batch_size must be >= 1 and lr > 0")


def _grid_targets(dataset: Dataset, arch: DetectorArch):
    """Dense per-cell targets: objectness, class (or -1), box distances.

    Every cell whose centre falls inside a ground-truth box is a positive for
    that object; the smallest such object claims a contested cell.  Box
    targets are (left, top, right, bottom) distances from the cell centre as
    fractions of the image size.
    """
    n = len(dataset)
    gh, gw = arch.grid_size
    h, w = arch.image_size
    stride_y, stride_x = h / gh, w / gw
    obj_t = np.zeros((n, gh, gw))
    cls_t = np.full((n, gh, gw), -1, dtype=np.int64)
    box_t = np.zeros((n, gh, gw, 4))
    ccx = (np.arange(gw) + 0.5) * stride_x
    ccy = (np.arange(gh) + 0.5) * stride_y
    for i, objs in enumerate(dataset.ground_truth):
        order = sorted(objs, key=lambda o: ((o.box[2] - o.box[0]) * (o.box[3] - o.box[1])))
        for o in order:
            x1, y1, x2, y2 = o.box
            cols = np.nonzero((ccx > x1) & (ccx < x2))[0]
            rows = np.nonzero((ccy > y1) & (ccy < y2))[0]
            if len(cols) == 0 or len(rows) == 0:  # sliver box: use the centre cell
                cols = [min(gw - 1, int((x1 + x2) / 2 / stride_x))]
                rows = [min(gh - 1, int((y1 + y2) / 2 / stride_y))]
            for r in rows:
                for c in cols:
                    if obj_t[i, r, c] == 1:
                        continue
                    obj_t[i, r, c] = 1.0
                    cls_t[i, r, c] = o.class_id
                    box_t[i, r, c] = ((ccx[c] - x1) / w, (ccy[r] - y1) / h,
                                      (x2 - ccx[c]) / w, (y2 - ccy[r]) / h)
    return (torch.from_numpy(obj_t), torch.from_numpy(cls_t), torch.from_numpy(box_t))


def train(dataset: Dataset, config: TrainConfig = TrainConfig()) -> DetectorWeights:
    """Supervised training; deterministic given (dataset, config.seed)."""
    if len(dataset) == 0:
        raise UsageError("dataset is empty")
    arch = DetectorArch(image_size=dataset.image_size, num_classes=len(dataset.classes))
    images = torch.from_numpy(
        np.stack([np.asarray(im, dtype=np.float64) for im in dataset.images])
    ).permute(0, 3, 1, 2).contiguous()
    obj_t, cls_t, box_t = _grid_targets(dataset, arch)

    torch.manual_seed(config.seed)
    net = _GridNet(arch)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    order_rng = np.random.default_rng(config.seed)
    n = len(dataset)
    k = arch.num_classes

    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(perm[start:start + config.batch_size].copy())
            raw = net(images[idx])
            obj_logit = raw[:, 0]
            cls_logit = raw[:, 1:1 + k]
            box_off = torch.sigmoid(raw[:, 1 + k:]).permute(0, 2, 3, 1)

            ot = obj_t[idx]
            cell_w = ot + config.noobj_weight * (1.0 - ot)
            loss_obj = F.binary_cross_entropy_with_logits(obj_logit, ot, weight=cell_w)
            loss_cls = F.cross_entropy(cls_logit, cls_t[idx], ignore_index=-1,
                                       label_smoothing=config.label_smoothing)
            mask = ot.unsqueeze(-1)
            denom = mask.sum() * 4
            loss_box = (((box_off - box_t[idx]) ** 2) * mask).sum() / torch.clamp(denom, min=1.0)

            loss = loss_obj + config.class_weight * loss_cls + config.box_weight * loss_box
            if not torch.isfinite(loss):
                raise NumericalError(f"training loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(idx)
        if (epoch + 1) % 10 == 0 or epoch == config.epochs - 1:
            log.info("epoch %d/%d  loss %.4f", epoch + 1, config.epochs, epoch_loss / n)

    return DetectorWeights.from_net(arch, net)


def detection_accuracy(weights: DetectorWeights, dataset: Dataset, theta: float) -> float:
    """Fraction of images with >= 1 detection of a class present in ground truth."""
    hits = 0
    for img, objs in zip(dataset.images, dataset.ground_truth):
        present = {o.class_id for o in objs}
        dets = detect(weights, img, theta)
        if any(d.class_id in present for d in dets):
            hits += 1
    return hits / len(dataset)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def weights_to_json(weights: DetectorWeights) -> str:
    doc = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "kind": "uapdet-detector-weights",
        "arch": weights.arch.to_dict(),
        "params": {k: ioutil.encode_array(v) for k, v in weights.params.items()},
    }
    return ioutil.canonical_json(doc) + "\n"


def save_weights(weights: DetectorWeights, path) -> None:
    ioutil.write_text_atomic(path, weights_to_json(weights))


def load_weights(path) -> DetectorWeights:
    try:
        doc = ioutil.read_json(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read weights file {path}: {e}") from e
    if doc.get("kind") != "uapdet-detector-weights":
        raise DataError(f"{path} is not a detector checkpoint")
    if doc.get("format_version") != WEIGHTS_FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {doc.get('format_version')}")
    arch = DetectorArch.from_dict(doc["arch"])
    params = {k: ioutil.decode_array(v) for k, v in doc["params"].items()}
    return DetectorWeights(arch=arch, params=params)


def weights_digest(weights: DetectorWeights) -> str:
    """Stable identity hash of a checkpoint (sha256 of its serialized form)."""
    return ioutil.sha256_hex(weights_to_json(weights).encode("utf-8"))
