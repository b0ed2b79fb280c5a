"""Universal detection-suppression attack.

Builds a single image-shaped perturbation v that blinds the detector across
a curated image set.  Each epoch walks the images in order; per image a
correction v_i starts from zero and takes plain gradient-descent steps on

    sum of top-class confidences over qualifying proposals
    + mean absolute value of (v + v_i)

after which the universal perturbation is updated as v <- clip(v + v_i) to
the L-inf budget xi.  The confidence sum runs over pre-NMS proposals (the
objectness gate is treated as constant), so the loss stays differentiable;
NMS-based detection is used only for the per-epoch metrics.  In targeted
mode the sum is restricted to proposals whose argmax class is the target.

All quantities live on the [0, 255] intensity scale; perturbed inputs are
clamped to that range inside the detector forward pass with a
straight-through gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import detector as det
from . import ioutil
from . import metrics
from .curation import CuratedDataset
from .errors import DataError, NumericalError, UsageError

log = logging.getLogger(__name__)

PERTURBATION_FORMAT_VERSION = 1
PROPOSAL_THRESHOLD = det.OBJECTNESS_THRESHOLD  # qualifying-proposal gate in the loss


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Perturbation:
    """Image-shaped additive tensor with an L-inf budget in intensity units."""
    data: np.ndarray
    xi: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.xi < 0:
            raise UsageError("xi must be nonnegative")

    @staticmethod
    def zeros(shape, xi: float) -> "Perturbation":
        return Perturbation(data=np.zeros(shape, dtype=np.float64), xi=xi)

    def linf(self) -> float:
        return compute_norm(self, math.inf)


@dataclass(frozen=True)
class AttackConfig:
    n_epoch: int = 250
    alpha: float = 20.0        # gradient step size, intensity units
    xi: float = 10.0           # L-inf budget, intensity units
    inner_steps: int = 1       # gradient steps per image per epoch
    theta: float = 0.7         # score threshold for the per-epoch metrics
    target_class: int | None = None
    seed: int = 0              # recorded in artifacts; the optimizer itself
                               # is deterministic (fixed image order, v0 = 0)

    def __post_init__(self):
        if self.n_epoch < 0 or self.inner_steps < 0:
            raise UsageError("n_epoch and inner_steps must be nonnegative")
        if self.alpha < 0 or self.xi < 0:
            raise UsageError("alpha and xi must be nonnegative")
        if not 0.0 < self.theta <= 1.0:
            raise UsageError(f"theta must be in (0, 1], got {self.theta}")


@dataclass
class TraceRecord:
    epoch: int
    linf_norm: float
    l1_norm_normalized: float
    mean_objective: float
    b_img: float
    b_ins: float


# ---------------------------------------------------------------------------
# Objective and regularizer
# ---------------------------------------------------------------------------

def _as_data(v, shape) -> np.ndarray:
    if v is None:
        return np.zeros(shape, dtype=np.float64)
    data = getattr(v, "data", v)
    data = np.asarray(data, dtype=np.float64)
    if data.shape != tuple(shape):
        raise UsageError(f"perturbation shape {data.shape} does not match image {tuple(shape)}")
    return data


def objective_from_outputs(outputs: det.GridOutputs, target_class: int | None = None,
                           proposal_threshold: float = PROPOSAL_THRESHOLD) -> torch.Tensor:
    """Sum of top-class confidences over qualifying proposals (torch scalar).

    The qualifying mask (objectness gate, and in targeted mode the argmax
    class match) is detached: gradients flow through the confidences only.
    """
    obj_prob = outputs.objectness()
    mask = (obj_prob > proposal_threshold).detach()
    probs = outputs.class_probs()
    p_max, cls = probs.max(dim=-1)
    if target_class is not None:
        mask = mask & (cls == target_class).detach()
    return torch.where(mask, p_max, torch.zeros_like(p_max)).sum()


def objective(weights: det.DetectorWeights, image: np.ndarray, v=None, v_i=None,
              target_class: int | None = None) -> float:
    """Confidence-sum objective at image + v + v_i (0 when nothing qualifies)."""
    image = np.asarray(image, dtype=np.float64)
    x = image + _as_data(v, image.shape) + _as_data(v_i, image.shape)
    return float(objective_from_outputs(det.forward(weights, x), target_class))


def regularizer(v, v_i) -> float:
    """L1 norm of (v + v_i) normalized by the number of pixel-channel entries."""
    a = np.asarray(getattr(v, "data", v), dtype=np.float64)
    b = np.asarray(getattr(v_i, "data", v_i), dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.abs(a + b).mean())


def suppression_loss(clean_image: np.ndarray, target_class: int | None = None,
                     proposal_threshold: float = PROPOSAL_THRESHOLD):
    """Loss spec for detector.input_gradient: objective + normalized L1.

    The returned callable expects the *perturbed* image tensor (clean + v +
    v_i) as its second argument, so the regularizer term |x - clean| equals
    |v + v_i| and both terms are differentiated in one backward pass.
    """
    clean = torch.from_numpy(np.asarray(clean_image, dtype=np.float64))

    def loss_spec(outputs: det.GridOutputs, x: torch.Tensor) -> torch.Tensor:
        return objective_from_outputs(outputs, target_class, proposal_threshold) \
            + (x - clean).abs().mean()

    return loss_spec


def attack_gradient(weights: det.DetectorWeights, image: np.ndarray, v, v_i,
                    target_class: int | None = None) -> np.ndarray:
    """Gradient of (objective + regularizer) w.r.t. the per-image correction."""
    image = np.asarray(image, dtype=np.float64)
    x = image + _as_data(v, image.shape) + _as_data(v_i, image.shape)
    return det.input_gradient(weights, x, suppression_loss(image, target_class))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def project_linf(v: Perturbation, xi: float) -> Perturbation:
    """Clamp every entry to [-xi, +xi]; idempotent."""
    if xi < 0:
        raise UsageError("xi must be nonnegative")
    return Perturbation(data=np.clip(v.data, -xi, xi), xi=xi)


def per_image_descend(weights: det.DetectorWeights, image: np.ndarray,
                      v: Perturbation, config: AttackConfig) -> Perturbation:
    """Per-image correction: v_i starts at zero, then plain gradient steps."""
    image = np.asarray(image, dtype=np.float64)
    v_i = np.zeros_like(image)
    for _ in range(config.inner_steps):
        grad = attack_gradient(weights, image, v, v_i, config.target_class)
        v_i = v_i - config.alpha * grad
    return Perturbation(data=v_i, xi=config.xi)


def synthesize_universal(curated: CuratedDataset, weights: det.DetectorWeights,
                         config: AttackConfig) -> tuple[Perturbation, list[TraceRecord]]:
    """Epoch loop of the universal attack; returns (v, per-epoch trace).

    Images are visited in curated order; after each per-image correction the
    universal perturbation is re-projected onto the L-inf ball, so the budget
    invariant holds at every point.  A non-finite per-image gradient skips
    that image with a diagnostic and the loop continues.
    """
    if len(curated) == 0:
        raise UsageError("curated dataset is empty")
    shape = curated.entries[0].image.shape
    v = Perturbation.zeros(shape, config.xi)
    trace: list[TraceRecord] = []

    for epoch in range(1, config.n_epoch + 1):
        for entry in curated.entries:
            try:
                v_i = per_image_descend(weights, entry.image, v, config)
            except NumericalError as e:
                log.warning("epoch %d image %d: %s; image skipped",
                            epoch, entry.image_id, e)
                continue
            v = project_linf(Perturbation(data=v.data + v_i.data, xi=config.xi),
                             config.xi)
        trace.append(_epoch_record(epoch, curated, weights, v, config))
        log.debug("epoch %d: linf=%.3f b_img=%.3f b_ins=%.3f",
                  epoch, trace[-1].linf_norm, trace[-1].b_img, trace[-1].b_ins)
    return v, trace


def _epoch_record(epoch: int, curated: CuratedDataset, weights: det.DetectorWeights,
                  v: Perturbation, config: AttackConfig) -> TraceRecord:
    b_img, b_ins = metrics.blind_degrees_from_detections(
        [det.detect(weights, e.image + v.data, config.theta) for e in curated.entries],
        config.theta, curated.target_class)
    mean_obj = float(np.mean([
        objective(weights, e.image, v, None, config.target_class)
        for e in curated.entries
    ]))
    return TraceRecord(epoch=epoch, linf_norm=v.linf(),
                       l1_norm_normalized=float(np.abs(v.data).mean()),
                       mean_objective=mean_obj, b_img=b_img, b_ins=b_ins)


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------

def compute_norm(v, p) -> float:
    """p-norm of a perturbation for p in {0, 1, 2, inf}.

    p=0 counts nonzero entries; p=inf is the max absolute value; the max of
    an all-zero tensor is defined as 0.
    """
    data = np.asarray(getattr(v, "data", v), dtype=np.float64).ravel()
    if p in (0, "0"):
        return float(np.count_nonzero(data))
    if p in (1, "1"):
        return float(np.abs(data).sum())
    if p in (2, "2"):
        return float(np.sqrt((data ** 2).sum()))
    if p in (math.inf, np.inf, "inf"):
        return float(np.abs(data).max()) if data.size else 0.0
    raise UsageError(f"unsupported norm order {p!r}")


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def save_perturbation(v: Perturbation, path) -> None:
    doc = {
        "format_version": PERTURBATION_FORMAT_VERSION,
        "kind": "uapdet-perturbation",
        "xi": v.xi,
        "intensity_scale": [0.0, 255.0],
        "values": ioutil.encode_array(v.data),
    }
    ioutil.write_json_atomic(path, doc)


def load_perturbation(path) -> Perturbation:
    try:
        doc = ioutil.read_json(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read perturbation file {path}: {e}") from e
    if doc.get("kind") != "uapdet-perturbation":
        raise DataError(f"{path} is not a perturbation artifact")
    return Perturbation(data=ioutil.decode_array(doc["values"]), xi=float(doc["xi"]))


TRACE_COLUMNS = ("epoch", "linf_norm", "l1_norm_normalized",
                 "mean_objective", "b_img", "b_ins")


def trace_csv(trace) -> str:
    lines = [",".join(TRACE_COLUMNS)]
    for rec in trace:
        lines.append(",".join([str(rec.epoch)] + [
            ioutil.fmt_float(getattr(rec, col)) for col in TRACE_COLUMNS[1:]
        ]))
    return "\n".join(lines) + "\n"


def save_trace(trace, path) -> None:
    ioutil.write_text_atomic(path, trace_csv(trace))


def load_trace(path) -> list[TraceRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != ",".join(TRACE_COLUMNS):
        raise DataError(f"{path} is not an attack trace CSV")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(TRACE_COLUMNS):
            raise DataError(f"malformed trace row: {ln!r}")
        out.append(TraceRecord(epoch=int(parts[0]), linf_norm=float(parts[1]),
                               l1_norm_normalized=float(parts[2]),
                               mean_objective=float(parts[3]),
                               b_img=float(parts[4]), b_ins=float(parts[5])))
    return out
