"""Command-line interface.

Verbs: generate, train, curate, attack, evaluate, count, run, rank.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import attack, curation, dataio, detector, ingest, ioutil, metrics, scenes
from . import experiment as exp
from .errors import DataError, NumericalError, UsageError


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the spec wants 1
        raise UsageError(message)


def _resolve_class(dataset: scenes.Dataset, label: str) -> int:
    if label.isdigit():
        cid = int(label)
        if not any(c.id == cid for c in dataset.classes):
            raise UsageError(f"class id {cid} not in dataset")
        return cid
    return dataset.class_named(label).id


def _load_dataset_arg(path: str, image_size=None) -> scenes.Dataset:
    return dataio.load_dataset(path, image_size=image_size)


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    freq = scenes.coco_class_weights() if args.coco_frequency else \
        (tuple(args.class_frequency) if args.class_frequency else None)
    spec = scenes.SceneSpec(image_size=tuple(args.image_size),
                            objects_per_image=tuple(args.objects_per_image),
                            class_frequency=freq, noise_level=args.noise_level,
                            seed=args.seed)
    ds = scenes.generate_dataset(spec, args.n_images)
    dataio.save_dataset(ds, args.out)
    print(f"wrote {args.n_images} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = _load_dataset_arg(args.dataset)
    weights = detector.train(ds, detector.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed))
    detector.save_weights(weights, args.out)
    acc = detector.detection_accuracy(weights, ds, args.theta)
    print(f"wrote {args.out} (training-set detection accuracy {acc:.3f} "
          f"at theta={args.theta})")
    return 0


def cmd_curate(args) -> int:
    ds = _load_dataset_arg(args.dataset)
    weights = detector.load_weights(args.weights)
    cid = _resolve_class(ds, args.target_class)
    curated = curation.curate(ds, weights, cid, args.theta, args.max_imgs)
    curation.write_manifest(curated, weights, args.out)
    print(f"retained {len(curated)} / {len(ds)} images "
          f"({len(curated.rejected_ids)} rejected); manifest: {args.out}")
    return 0


def cmd_attack(args) -> int:
    ds = _load_dataset_arg(args.dataset)
    weights = detector.load_weights(args.weights)
    cid = _resolve_class(ds, args.target_class)
    curated = curation.curate(ds, weights, cid, args.theta, args.max_imgs)
    if len(curated) == 0:
        raise DataError("curation kept no images; nothing to attack")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curation.write_manifest(curated, weights, out_dir / "curation.json")

    config = attack.AttackConfig(n_epoch=args.n_epoch, alpha=args.alpha, xi=args.xi,
                                 inner_steps=args.inner_steps, theta=args.theta,
                                 target_class=cid, seed=args.seed)
    v, trace = attack.synthesize_universal(curated, weights, config)
    attack.save_perturbation(v, out_dir / "perturbation.json")
    attack.save_trace(trace, out_dir / "trace.csv")
    last = trace[-1] if trace else None
    tail = (f"b_img {last.b_img:.3f}, b_ins {last.b_ins:.3f}" if last
            else "no epochs run")
    print(f"wrote {out_dir}/perturbation.json and trace.csv ({tail})")
    return 0


def cmd_evaluate(args) -> int:
    external = args.annotations or args.dump or args.clean_dump
    if external:
        if not (args.annotations and args.dump and args.clean_dump):
            raise UsageError("external evaluation needs --annotations, --dump "
                             "and --clean-dump together")
        annset = ingest.load_annotations(args.annotations)
        base, pert = ingest.evaluate_external(
            annset, ingest.load_detection_dump(args.dump),
            ingest.load_detection_dump(args.clean_dump), args.target_class, args.theta)
        doc = {"baseline": base.to_dict(), "perturbed": pert.to_dict()}
    else:
        if not (args.dataset and args.weights):
            raise UsageError("internal evaluation needs --dataset and --weights")
        ds = _load_dataset_arg(args.dataset)
        weights = detector.load_weights(args.weights)
        cid = _resolve_class(ds, args.target_class)
        curated = curation.curate(ds, weights, cid, args.theta, args.max_imgs)
        if len(curated) == 0:
            raise DataError("curation kept no images; nothing to evaluate")
        v = attack.load_perturbation(args.perturbation) if args.perturbation else None
        report = metrics.blind_degree_report(curated, weights, v, args.theta)
        doc = {"report": report.to_dict()}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        ioutil.write_text_atomic(args.out, text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def cmd_count(args) -> int:
    annset = ingest.load_annotations(args.annotations)
    names = args.categories or [annset.categories[c] for c in sorted(annset.categories)]
    counts = ingest.count_category_images(annset, names)
    width = max(len(n) for n in names)
    for name in names:
        print(f"{name.ljust(width)}  {counts[name]}")
    return 0


def cmd_run(args) -> int:
    config = exp.load_config(args.config)
    out = exp.run_experiment(config, out_dir=args.out)
    print(f"experiment artifacts in {out}")
    return 0


def cmd_rank(args) -> int:
    run_dir = Path(args.run_dir)
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        raise DataError(f"{summary_path} not found; is this a run directory?")
    summary = ioutil.read_json(summary_path)
    class_ids = {}
    epoch_curves, norm_curves = [], []
    for i, (name, entry) in enumerate(sorted(summary.get("classes", {}).items())):
        if entry.get("status") != "ok":
            continue
        class_ids[i] = name
        for axis, bucket in (("epoch", epoch_curves), ("norm", norm_curves)):
            rows = entry["sweep"][axis]
            bucket.append(metrics.BlindDegreeCurve(
                class_id=i, axis=axis,
                xs=[r[axis if axis == "epoch" else "norm"] for r in rows],
                b_img=[r["b_img"] for r in rows],
                b_ins=[r["b_ins"] for r in rows]))
    if not epoch_curves:
        raise DataError("no successfully attacked classes in the run summary")
    ranking = metrics.resilience_table(epoch_curves, norm_curves)
    table = metrics.format_ranking_table(ranking, class_ids)
    print(table, end="")
    if args.out:
        ioutil.write_text_atomic(args.out, table)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="uapdet",
                description="Universal adversarial perturbations against a tiny "
                            "object detector, with per-class blind-degree metrics")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--n-images", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, nargs=2, default=[64, 64], metavar=("H", "W"))
    g.add_argument("--objects-per-image", type=int, nargs=2, default=[1, 3],
                   metavar=("LO", "HI"))
    g.add_argument("--noise-level", type=float, default=6.0)
    g.add_argument("--class-frequency", type=float, nargs=5, default=None)
    g.add_argument("--coco-frequency", action="store_true",
                   help="weight classes like the COCO training split")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the grid detector on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=60)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--theta", type=float, default=0.7)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("curate", help="filter images the clean detector finds the class in")
    c.add_argument("--dataset", required=True)
    c.add_argument("--weights", required=True)
    c.add_argument("--target-class", required=True)
    c.add_argument("--theta", type=float, default=0.7)
    c.add_argument("--max-imgs", type=int, default=500)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_curate)

    a = sub.add_parser("attack", help="synthesize a universal perturbation for one class")
    a.add_argument("--dataset", required=True)
    a.add_argument("--weights", required=True)
    a.add_argument("--target-class", required=True)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--n-epoch", type=int, default=50)
    a.add_argument("--alpha", type=float, default=20.0)
    a.add_argument("--xi", type=float, default=10.0)
    a.add_argument("--inner-steps", type=int, default=1)
    a.add_argument("--theta", type=float, default=0.7)
    a.add_argument("--max-imgs", type=int, default=500)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_attack)

    e = sub.add_parser("evaluate", help="blind-degree report (internal or external)")
    e.add_argument("--dataset")
    e.add_argument("--weights")
    e.add_argument("--perturbation")
    e.add_argument("--annotations")
    e.add_argument("--dump")
    e.add_argument("--clean-dump")
    e.add_argument("--target-class", required=True)
    e.add_argument("--theta", type=float, default=0.7)
    e.add_argument("--max-imgs", type=int, default=500)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    n = sub.add_parser("count", help="distinct-image counts per category")
    n.add_argument("--annotations", required=True)
    n.add_argument("--categories", nargs="+", default=None)
    n.set_defaults(func=cmd_count)

    r = sub.add_parser("run", help="full experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default=None, help="override the config output_dir")
    r.set_defaults(func=cmd_run)

    k = sub.add_parser("rank", help="rebuild the resilience ranking from a run directory")
    k.add_argument("--run-dir", required=True)
    k.add_argument("--out", default=None)
    k.set_defaults(func=cmd_rank)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
