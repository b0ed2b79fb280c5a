"""Blind-degree metrics and the per-class resilience ranking.

Image-level blind degree is the fraction of images where the detector still
finds at least one qualifying detection; instance-level blind degree is the
average count of qualifying detections per image.  Both fall toward zero as
a suppression attack succeeds, and both can be restricted to one target
class (the form used for per-class rankings).

A ranking orders classes by the area under their blind-degree curve over a
shared sweep grid: more remaining detections across the sweep means more
resilient to the perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import detector as det
from . import ioutil
from .curation import CuratedDataset
from .errors import DataError, UsageError

_USE_CURATED = object()  # sentinel: restrict metrics to the curated target class


def _perturbation_data(v) -> np.ndarray | None:
    if v is None:
        return None
    data = getattr(v, "data", v)
    return np.asarray(data, dtype=np.float64)


def _perturbed(image: np.ndarray, v) -> np.ndarray:
    data = _perturbation_data(v)
    return image if data is None else image + data


def qualifying_count(dets, theta: float, target_class: int | None = None) -> int:
    """Detections with p_obj above theta, optionally of one class."""
    return sum(1 for d in dets
               if d.p_obj > theta and (target_class is None or d.class_id == target_class))


def indicator(weights: det.DetectorWeights, image: np.ndarray, v, theta: float,
              target_class: int | None = None) -> int:
    """1 iff the detector finds >= 1 qualifying detection on image + v."""
    dets = det.detect(weights, _perturbed(image, v), theta)
    return int(qualifying_count(dets, theta, target_class) > 0)


def blind_degrees_from_detections(detection_sets, theta: float,
                                  target_class: int | None = None) -> tuple[float, float]:
    """(image-level, instance-level) blind degrees from per-image detections."""
    n = len(detection_sets)
    if n == 0:
        raise UsageError("need at least one detection set")
    counts = [qualifying_count(d, theta, target_class) for d in detection_sets]
    b_img = sum(1 for c in counts if c > 0) / n
    b_ins = sum(counts) / n
    return b_img, b_ins


def _curated_blind_degrees(curated: CuratedDataset, weights, v, theta,
                           target_class) -> tuple[float, float]:
    if len(curated) == 0:
        raise UsageError("curated dataset is empty")
    if target_class is _USE_CURATED:
        target_class = curated.target_class
    sets = [det.detect(weights, _perturbed(e.image, v), theta) for e in curated.entries]
    return blind_degrees_from_detections(sets, theta, target_class)


def image_blind_degree(curated: CuratedDataset, weights: det.DetectorWeights, v,
                       theta: float, target_class=_USE_CURATED) -> float:
    """Fraction of curated images where >= 1 qualifying detection survives."""
    return _curated_blind_degrees(curated, weights, v, theta, target_class)[0]


def instance_blind_degree(curated: CuratedDataset, weights: det.DetectorWeights, v,
                          theta: float, target_class=_USE_CURATED) -> float:
    """Average number of qualifying detections per curated image."""
    return _curated_blind_degrees(curated, weights, v, theta, target_class)[1]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class BlindDegreeReport:
    class_id: int
    class_name: str
    b_img: float
    b_ins: float
    theta: float
    n: int
    v_linf: float | None  # None when the perturbation is external / unknown

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "class_name": self.class_name,
            "b_img": self.b_img,
            "b_ins": self.b_ins,
            "theta": self.theta,
            "n": self.n,
            "v_linf": self.v_linf,
        }


def blind_degree_report(curated: CuratedDataset, weights: det.DetectorWeights, v,
                        theta: float) -> BlindDegreeReport:
    b_img, b_ins = _curated_blind_degrees(curated, weights, v, theta, _USE_CURATED)
    data = _perturbation_data(v)
    name = next(c.name for c in curated.classes if c.id == curated.target_class)
    return BlindDegreeReport(
        class_id=curated.target_class, class_name=name, b_img=b_img, b_ins=b_ins,
        theta=theta, n=len(curated),
        v_linf=float(np.max(np.abs(data))) if data is not None else 0.0,
    )


def report_csv(reports) -> str:
    lines = ["class_id,class_name,n,theta,v_linf,b_img,b_ins"]
    for r in reports:
        linf = "" if r.v_linf is None else ioutil.fmt_float(r.v_linf)
        lines.append(",".join([str(r.class_id), r.class_name, str(r.n),
                               ioutil.fmt_float(r.theta), linf,
                               ioutil.fmt_float(r.b_img), ioutil.fmt_float(r.b_ins)]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Sweep curves and ranking
# ---------------------------------------------------------------------------

@dataclass
class BlindDegreeCurve:
    """Blind degrees sampled along one sweep axis ("epoch" or "norm")."""
    class_id: int
    axis: str
    xs: np.ndarray
    b_img: np.ndarray
    b_ins: np.ndarray

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=float)
        self.b_img = np.asarray(self.b_img, dtype=float)
        self.b_ins = np.asarray(self.b_ins, dtype=float)
        if not len(self.xs) == len(self.b_img) == len(self.b_ins):
            raise UsageError("curve arrays must share a length")
        if self.axis not in ("epoch", "norm"):
            raise UsageError(f"unknown sweep axis {self.axis!r}")

    def values(self, level: str) -> np.ndarray:
        if level == "image":
            return self.b_img
        if level == "instance":
            return self.b_ins
        raise UsageError(f"unknown level {level!r}")


def epoch_curve_from_trace(class_id: int, trace, checkpoints=None) -> BlindDegreeCurve:
    """Blind degrees vs. epoch, optionally restricted to checkpoint epochs."""
    epochs = [rec.epoch for rec in trace]
    if checkpoints is None:
        picks = list(range(len(trace)))
    else:
        index = {e: i for i, e in enumerate(epochs)}
        missing = [c for c in checkpoints if c not in index]
        if missing:
            raise UsageError(f"checkpoint epochs {missing} not present in trace")
        picks = [index[c] for c in checkpoints]
    return BlindDegreeCurve(
        class_id=class_id, axis="epoch",
        xs=[trace[i].epoch for i in picks],
        b_img=[trace[i].b_img for i in picks],
        b_ins=[trace[i].b_ins for i in picks],
    )


def norm_curve_from_trace(class_id: int, trace, norm_grid,
                          baseline: tuple[float, float]) -> BlindDegreeCurve:
    """Blind degrees indexed by perturbation norm, on a shared norm grid.

    The attack records the L-inf norm of the universal perturbation once per
    epoch; for each grid point this takes the latest epoch whose running-max
    norm is still within the grid value.  Grid points below the first
    recorded norm fall back to the zero-perturbation baseline.
    """
    grid = np.asarray(norm_grid, dtype=float)
    if len(grid) == 0 or np.any(np.diff(grid) <= 0):
        raise UsageError("norm grid must be nonempty and strictly increasing")
    runmax = np.maximum.accumulate([rec.linf_norm for rec in trace]) if trace else np.array([])
    b_img, b_ins = [], []
    for g in grid:
        idx = np.nonzero(runmax <= g)[0]
        if len(idx) == 0:
            b_img.append(baseline[0])
            b_ins.append(baseline[1])
        else:
            rec = trace[int(idx[-1])]
            b_img.append(rec.b_img)
            b_ins.append(rec.b_ins)
    return BlindDegreeCurve(class_id=class_id, axis="norm", xs=grid,
                            b_img=b_img, b_ins=b_ins)


@dataclass
class RankingColumn:
    order: list[int]  # class ids, most resilient first
    tied: bool


@dataclass
class ResilienceRanking:
    """One ranked class list per criterion: (epoch|norm) x (image|instance)."""
    columns: dict[tuple[str, str], RankingColumn]

    def to_dict(self) -> dict:
        return {f"{axis}/{level}": {"order": col.order, "tied": col.tied}
                for (axis, level), col in sorted(self.columns.items())}


def rank_resilience(curves, level: str) -> RankingColumn:
    """Order classes by descending area under their blind-degree curve.

    All curves must share the sweep grid exactly.  Ties on the area are
    broken by the value at the final sweep point, then by class id; a
    ranking that had to fall back to class id is flagged as tied.
    """
    curves = list(curves)
    if not curves:
        raise UsageError("need at least one curve")
    ref = curves[0]
    for c in curves[1:]:
        if c.axis != ref.axis or not np.array_equal(c.xs, ref.xs):
            raise DataError("curves do not share a sweep grid")
    if len({c.class_id for c in curves}) != len(curves):
        raise UsageError("duplicate class ids in curve set")

    keyed = []
    for c in curves:
        ys = c.values(level)
        auc = float(np.trapezoid(ys, c.xs)) if len(ys) > 1 else float(ys[0])
        keyed.append((auc, float(ys[-1]), c.class_id))
    keyed.sort(key=lambda t: (-t[0], -t[1], t[2]))
    tied = len({(a, f) for a, f, _ in keyed}) < len(keyed)
    return RankingColumn(order=[cid for _, _, cid in keyed], tied=tied)


def resilience_table(epoch_curves, norm_curves) -> ResilienceRanking:
    columns = {}
    for axis, curves in (("epoch", epoch_curves), ("norm", norm_curves)):
        for level in ("image", "instance"):
            columns[(axis, level)] = rank_resilience(curves, level)
    return ResilienceRanking(columns=columns)


def format_ranking_table(ranking: ResilienceRanking, class_names: dict[int, str]) -> str:
    """Aligned four-column text table (epoch/image, epoch/instance, norm/...)."""
    keys = [("epoch", "image"), ("epoch", "instance"), ("norm", "image"), ("norm", "instance")]
    headers = ["rank"] + [f"{a}/{l}" for a, l in keys]
    rows = []
    n = len(ranking.columns[keys[0]].order)
    for i in range(n):
        row = [str(i + 1)]
        for key in keys:
            cid = ranking.columns[key].order[i]
            row.append(class_names.get(cid, str(cid)))
        rows.append(row)
    widths = [max(len(r[j]) for r in [headers] + rows) for j in range(len(headers))]
    lines = ["  ".join(h.ljust(widths[j]) for j, h in enumerate(headers))]
    lines.append("  ".join("-" * widths[j] for j in range(len(headers))))
    for row in rows:
        lines.append("  ".join(v.ljust(widths[j]) for j, v in enumerate(row)))
    if any(col.tied for col in ranking.columns.values()):
        lines.append("note: ties broken by class id")
    return "\n".join(lines) + "\n"


def curve_csv(curve: BlindDegreeCurve) -> str:
    lines = [f"{curve.axis},b_img,b_ins"]
    for x, bi, bn in zip(curve.xs, curve.b_img, curve.b_ins):
        x_txt = str(int(x)) if curve.axis == "epoch" else ioutil.fmt_float(x)
        lines.append(f"{x_txt},{ioutil.fmt_float(bi)},{ioutil.fmt_float(bn)}")
    return "\n".join(lines) + "\n"
