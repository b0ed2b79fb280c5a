"""Experiment orchestration: curation -> attack -> sweeps -> ranking.

A single declarative JSON config drives per-class targeted attacks.  The
norm sweep reuses the epoch run: metrics recorded at each epoch are indexed
by the perturbation norm reached at that epoch and resampled onto the
configured norm grid, so one attack per class serves both sweep axes.

Artifacts per class: curation manifest, perturbation, per-epoch trace CSV,
blind-degree-vs-epoch and vs-norm CSVs.  Global artifacts: ranking table
(text + JSON) and a machine-readable summary carrying the config hash, the
seed, and a status for every (class, sweep point) pair.  Two runs with the
same config produce byte-identical directories.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import attack, curation, dataio, detector, ioutil, metrics, scenes
from .errors import DataError, UapdetError, UsageError

log = logging.getLogger(__name__)

SUMMARY_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSource:
    n_images: int = 300
    image_size: tuple[int, int] = (64, 64)
    objects_per_image: tuple[int, int] = (2, 3)
    noise_level: float = 6.0
    class_frequency: tuple[float, ...] | None = None
    seed: int | None = None  # None -> experiment seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["type"] = "synthetic"
        d["image_size"] = list(self.image_size)
        d["objects_per_image"] = list(self.objects_per_image)
        if self.class_frequency is not None:
            d["class_frequency"] = list(self.class_frequency)
        return d


@dataclass(frozen=True)
class CocoSource:
    annotations: str
    image_size: tuple[int, int] = (64, 64)

    def to_dict(self) -> dict:
        return {"type": "coco", "annotations": self.annotations,
                "image_size": list(self.image_size)}


@dataclass(frozen=True)
class DetectorSection:
    weights_path: str | None = None  # load instead of training when set
    epochs: int = 60
    batch_size: int = 64
    lr: float = 3e-3

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: SyntheticSource | CocoSource = field(default_factory=SyntheticSource)
    detector: DetectorSection = field(default_factory=DetectorSection)
    classes: tuple[str, ...] = scenes.DEFAULT_CLASS_NAMES
    n_epoch: int = 50
    alpha: float = 20.0
    xi: float = 10.0
    inner_steps: int = 1
    theta: float = 0.7
    max_imgs: int = 500
    epoch_checkpoints: tuple[int, ...] = (5, 10, 20, 30, 40, 50)
    xi_grid: tuple[float, ...] = (1.0, 2.0, 4.0, 6.0, 8.0, 10.0)
    output_dir: str = "runs/experiment"
    seed: int = 0

    def __post_init__(self):
        for name, grid in (("epoch_checkpoints", self.epoch_checkpoints),
                           ("xi_grid", self.xi_grid)):
            arr = list(grid)
            if not arr or any(b <= a for a, b in zip(arr, arr[1:])):
                raise UsageError(f"{name} must be nonempty and strictly increasing")
        if max(self.epoch_checkpoints) > self.n_epoch:
            raise UsageError("epoch_checkpoints exceed n_epoch")
        # Validates alpha/xi/theta ranges as well.
        self.attack_config(None)

    def attack_config(self, target_class: int | None) -> attack.AttackConfig:
        return attack.AttackConfig(n_epoch=self.n_epoch, alpha=self.alpha, xi=self.xi,
                                   inner_steps=self.inner_steps, theta=self.theta,
                                   target_class=target_class, seed=self.seed)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "detector": self.detector.to_dict(),
            "classes": list(self.classes),
            "attack": {"n_epoch": self.n_epoch, "alpha": self.alpha, "xi": self.xi,
                       "inner_steps": self.inner_steps, "theta": self.theta},
            "max_imgs": self.max_imgs,
            "epoch_checkpoints": list(self.epoch_checkpoints),
            "xi_grid": list(self.xi_grid),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        return ioutil.sha256_hex(ioutil.canonical_json(self.to_dict()).encode("utf-8"))


def _take(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise UsageError(f"{where}: unknown keys {sorted(unknown)}")


def config_from_dict(doc: dict) -> ExperimentConfig:
    _take(doc, {"dataset", "detector", "classes", "attack", "max_imgs",
                "epoch_checkpoints", "xi_grid", "output_dir", "seed"}, "config")
    kwargs = {}

    ds = dict(doc.get("dataset", {}))
    ds_type = ds.pop("type", "synthetic")
    if ds_type == "synthetic":
        _take(ds, {"n_images", "image_size", "objects_per_image", "noise_level",
                   "class_frequency", "seed"}, "config.dataset")
        if "image_size" in ds:
            ds["image_size"] = tuple(ds["image_size"])
        if "objects_per_image" in ds:
            ds["objects_per_image"] = tuple(ds["objects_per_image"])
        if ds.get("class_frequency") is not None:
            ds["class_frequency"] = tuple(ds["class_frequency"])
        kwargs["dataset"] = SyntheticSource(**ds)
    elif ds_type == "coco":
        _take(ds, {"annotations", "image_size"}, "config.dataset")
        if "image_size" in ds:
            ds["image_size"] = tuple(ds["image_size"])
        kwargs["dataset"] = CocoSource(**ds)
    else:
        raise UsageError(f"config.dataset.type must be synthetic or coco, got {ds_type!r}")

    det_sec = dict(doc.get("detector", {}))
    _take(det_sec, {"weights_path", "epochs", "batch_size", "lr"}, "config.detector")
    kwargs["detector"] = DetectorSection(**det_sec)

    atk = dict(doc.get("attack", {}))
    _take(atk, {"n_epoch", "alpha", "xi", "inner_steps", "theta"}, "config.attack")
    kwargs.update(atk)

    for key in ("classes", "epoch_checkpoints", "xi_grid"):
        if key in doc:
            kwargs[key] = tuple(doc[key])
    for key in ("max_imgs", "output_dir", "seed"):
        if key in doc:
            kwargs[key] = doc[key]
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        doc = ioutil.read_json(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return config_from_dict(doc)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def _slug(name: str) -> str:
    return name.replace(" ", "_")


def build_dataset(config: ExperimentConfig) -> scenes.Dataset:
    src = config.dataset
    if isinstance(src, SyntheticSource):
        spec = scenes.SceneSpec(image_size=src.image_size,
                                objects_per_image=src.objects_per_image,
                                class_frequency=src.class_frequency,
                                noise_level=src.noise_level,
                                seed=config.seed if src.seed is None else src.seed)
        return scenes.generate_dataset(spec, src.n_images)
    return dataio.load_dataset(src.annotations, image_size=src.image_size)


def _prepare_weights(config: ExperimentConfig, dataset: scenes.Dataset,
                     out: Path) -> detector.DetectorWeights:
    if config.detector.weights_path:
        weights = detector.load_weights(config.detector.weights_path)
    else:
        weights = detector.train(dataset, detector.TrainConfig(
            epochs=config.detector.epochs, batch_size=config.detector.batch_size,
            lr=config.detector.lr, seed=config.seed))
    detector.save_weights(weights, out / "detector.json")
    return weights


def run_experiment(config: ExperimentConfig, out_dir=None) -> Path:
    """Run the full per-class pipeline; returns the artifact directory.

    A failure in one class is recorded in the summary and the remaining
    classes still run.
    """
    out = Path(out_dir if out_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    dataset = build_dataset(config)
    weights = _prepare_weights(config, dataset, out)

    class_ids = {c.name: c.id for c in dataset.classes}
    summary_classes: dict[str, dict] = {}
    epoch_curves: list[metrics.BlindDegreeCurve] = []
    norm_curves: list[metrics.BlindDegreeCurve] = []

    for name in config.classes:
        log.info("class %r: curation + attack", name)
        entry: dict = {"status": "ok", "artifacts": {}}
        summary_classes[name] = entry
        try:
            if name not in class_ids:
                raise DataError(f"class {name!r} not present in the dataset")
            cid = class_ids[name]
            cls_dir = out / _slug(name)
            cls_dir.mkdir(exist_ok=True)

            curated = curation.curate(dataset, weights, cid, config.theta, config.max_imgs)
            curation.write_manifest(curated, weights, cls_dir / "curation.json")
            entry["artifacts"]["curation"] = f"{_slug(name)}/curation.json"
            entry["retained"] = len(curated)
            entry["rejected"] = len(curated.rejected_ids)
            if len(curated) == 0:
                entry["status"] = "skipped_empty_curation"
                entry["sweep"] = _sweep_status(config, None, None, "skipped")
                continue

            baseline = (metrics.image_blind_degree(curated, weights, None, config.theta),
                        metrics.instance_blind_degree(curated, weights, None, config.theta))
            entry["baseline"] = {"b_img": baseline[0], "b_ins": baseline[1]}

            v, trace = attack.synthesize_universal(curated, weights,
                                                   config.attack_config(cid))
            attack.save_perturbation(v, cls_dir / "perturbation.json")
            attack.save_trace(trace, cls_dir / "trace.csv")
            entry["artifacts"]["perturbation"] = f"{_slug(name)}/perturbation.json"
            entry["artifacts"]["trace"] = f"{_slug(name)}/trace.csv"

            ec = metrics.epoch_curve_from_trace(cid, trace, config.epoch_checkpoints)
            nc = metrics.norm_curve_from_trace(cid, trace, config.xi_grid, baseline)
            ioutil.write_text_atomic(cls_dir / "blind_vs_epoch.csv", metrics.curve_csv(ec))
            ioutil.write_text_atomic(cls_dir / "blind_vs_norm.csv", metrics.curve_csv(nc))
            entry["artifacts"]["blind_vs_epoch"] = f"{_slug(name)}/blind_vs_epoch.csv"
            entry["artifacts"]["blind_vs_norm"] = f"{_slug(name)}/blind_vs_norm.csv"
            epoch_curves.append(ec)
            norm_curves.append(nc)
            entry["sweep"] = _sweep_status(config, ec, nc, "ok")
        except UapdetError as e:
            log.warning("class %r failed: %s", name, e)
            entry["status"] = "failed"
            entry["error"] = str(e)
            entry["sweep"] = _sweep_status(config, None, None, "failed")

    summary = {
        "format_version": SUMMARY_FORMAT_VERSION,
        "kind": "uapdet-run-summary",
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "detector": {"path": "detector.json", "digest": detector.weights_digest(weights)},
        "classes": summary_classes,
        "norm_sweep_note": ("norm sweep reuses the epoch run: per-epoch metrics are "
                            "indexed by the running-max perturbation norm and "
                            "resampled onto xi_grid"),
    }

    if epoch_curves:
        ranking = metrics.resilience_table(epoch_curves, norm_curves)
        names = {class_ids[n]: n for n in config.classes if n in class_ids}
        ioutil.write_text_atomic(out / "ranking.txt",
                                 metrics.format_ranking_table(ranking, names))
        ranking_doc = {
            "columns": ranking.to_dict(),
            "class_names": {str(cid): n for cid, n in sorted(names.items())},
        }
        ioutil.write_json_atomic(out / "ranking.json", ranking_doc)
        summary["ranking"] = ranking_doc

    ioutil.write_json_atomic(out / "summary.json", summary)
    return out


def _sweep_status(config: ExperimentConfig, ec, nc, status: str) -> dict:
    epoch_points = []
    for i, e in enumerate(config.epoch_checkpoints):
        point = {"epoch": e, "status": status}
        if ec is not None:
            point.update(b_img=float(ec.b_img[i]), b_ins=float(ec.b_ins[i]))
        epoch_points.append(point)
    norm_points = []
    for i, g in enumerate(config.xi_grid):
        point = {"norm": g, "status": status}
        if nc is not None:
            point.update(b_img=float(nc.b_img[i]), b_ins=float(nc.b_ins[i]))
        norm_points.append(point)
    return {"epoch": epoch_points, "norm": norm_points}
