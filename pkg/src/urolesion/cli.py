"""Command-line entry point: ``urolesion generate|train|eval|gradcam|report``.

Progress goes to stderr, data goes to files. Failures print one JSON line
on stderr (``{"error": ..., "kind": ..., "exit": ...}``) and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import config as C
from .architectures import NetworkSpec
from .checkpoint import load_checkpoint
from .dataset import (TABLE_I, DatasetManifest, Procedure, domain_filter, generate_synthetic, ingest_manifest,
                      load_ground_truth, read_ppm, scale_composition, uniform_composition)
from .errors import (CheckpointFormatError, CheckpointSpecError, CheckpointTruncatedError, CheckpointVersionError,
                     ConfigError, FoldError, GradCamError, IncompleteBundleError, ManifestError, MetricError,
                     TrainingError, UrolesionError, ValidationError)

log = logging.getLogger("urolesion")

EXIT_CODES = (
    (ConfigError, 2),
    (FileNotFoundError, 3),
    (CheckpointFormatError, 4),
    (CheckpointTruncatedError, 4),
    (CheckpointVersionError, 5),
    (CheckpointSpecError, 6),
    (IncompleteBundleError, 7),
    ((ManifestError, ValidationError, FoldError, TrainingError, MetricError, GradCamError), 8),
    (UrolesionError, 1),
)


def exit_code(exc: BaseException) -> int:
    for types, code in EXIT_CODES:
        if isinstance(exc, types):
            return code
    return 1


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> C.RunConfig:
    cfg = C.load(getattr(args, "config", None))
    flags = {
        "output_dir": getattr(args, "out", None),
        "jobs": getattr(args, "jobs", None),
        "scenarios": getattr(args, "scenario", None),
        "network.archs": getattr(args, "arch", None),
        "network.width_scale": getattr(args, "scale", None),
        "network.inception_variant": getattr(args, "inception_variant", None),
        "data.dir": getattr(args, "data", None),
        "data.per_cell": getattr(args, "per_cell", None),
        "data.composition": getattr(args, "composition", None),
        "data.resolution": getattr(args, "resolution", None),
        "data.seed": getattr(args, "seed", None),
        "train.seed": getattr(args, "seed", None),
        "train.warm_epochs": getattr(args, "warm_epochs", None),
        "train.finetune_epochs": getattr(args, "finetune_epochs", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train.folds": getattr(args, "folds", None),
    }
    return C.override(cfg, **flags)


def _generate(cfg: C.RunConfig, out: Path) -> DatasetManifest:
    d = cfg.data
    comp = uniform_composition(d.per_cell) if d.composition == "uniform" else scale_composition(TABLE_I,
                                                                                                d.table_divisor)
    log.info("generating %d frames at %dx%d into %s", sum(comp.values()), d.resolution, d.resolution, out)
    return generate_synthetic(comp, d.resolution, d.seed, d.patients_per_procedure, out)


def load_dataset(directory: str | Path) -> DatasetManifest:
    directory = Path(directory)
    csv_path = directory / "manifest.csv"
    if not csv_path.is_file():
        raise FileNotFoundError(f"no manifest.csv in {directory}")
    manifest = ingest_manifest(csv_path, directory)
    gt = directory / "ground_truth.csv"
    return load_ground_truth(manifest, gt) if gt.is_file() else manifest


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = cfg.output_path()
    _generate(cfg, out)
    C.write_resolved(cfg, out)
    return 0


def cmd_train(args) -> int:
    from .trainer import run_matrix

    cfg = _config(args)
    out = cfg.output_path()
    if cfg.data.dir is not None:
        data_dir = Path(cfg.data.dir)
        manifest = load_dataset(data_dir if data_dir.is_dir() else C.resolve_output(data_dir))
    else:
        manifest = _generate(cfg, out / "data")
    res = manifest[0].image.shape[:2] if len(manifest) else (cfg.data.resolution,) * 2
    spec = NetworkSpec(cfg.network.archs[0], tuple(int(v) for v in res), cfg.network.width_scale,
                       cfg.network.inception_variant, cfg.network.dtype)
    manifests = {p: domain_filter(manifest, [p]) for p in Procedure}
    bundle_dir = out / "bundle"
    C.write_resolved(cfg, out)
    log.info("training %s x scenarios %s into %s", ",".join(cfg.network.archs),
             ",".join(map(str, cfg.scenarios)), bundle_dir)
    run_matrix(cfg.network.archs, cfg.scenarios, manifests, cfg.train, spec, bundle_dir, jobs=cfg.jobs,
               extra_meta={"config": cfg.to_dict()})
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate, roc_curve

    net, provenance = load_checkpoint(args.checkpoint)
    if not provenance:
        raise CheckpointFormatError(f"{args.checkpoint} carries no provenance tag")
    manifest = load_dataset(args.data)
    if args.domain:
        manifest = domain_filter(manifest, [args.domain])
    if len(manifest) == 0:
        raise ValidationError("nothing to evaluate")
    out = C.resolve_output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scored = evaluate(net, manifest, domain=args.domain or "")
    _write_rows(out / "scores.csv", ["sample_id", "label", "score"],
                [(s.sample_id, s.label, f"{s.score:.10f}") for s in scored])
    curve = roc_curve(scored)
    _write_rows(out / "roc.csv", ["fpr", "tpr"], [(f"{a:.10f}", f"{b:.10f}") for a, b in zip(curve.fpr, curve.tpr)])
    summary = {"checkpoint": str(args.checkpoint), "provenance": [e["tag"] for e in provenance],
               "samples": len(scored), "auc": curve.auc}
    (out / "eval.json").write_text(json.dumps(summary, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    log.info("AUC %.4f over %d frames", curve.auc, len(scored))
    return 0


def cmd_gradcam(args) -> int:
    from .gradcam import gradcam, write_heatmap_csv, write_overlay

    net, _ = load_checkpoint(args.checkpoint)
    image = read_ppm(args.image)
    heat = gradcam(net, image, args.class_index, args.layer, sample_id=str(args.image))
    out = C.resolve_output(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_overlay(out, image, heat, args.opacity)
    if args.csv:
        write_heatmap_csv(C.resolve_output(args.csv), heat)
    log.info("heatmap at %s (%dx%d)%s", heat.layer, *heat.shape, " degenerate" if heat.degenerate else "")
    return 0


def cmd_report(args) -> int:
    from .metrics import report

    bundle = Path(args.bundle)
    if not (bundle / "bundle.json").is_file():
        raise FileNotFoundError(f"no bundle.json in {bundle}")
    out = C.resolve_output(args.out) if args.out else bundle / "report"
    rep = report(bundle, out)
    log.info("wrote %d report files to %s", len(rep.files), out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", help="output directory (relative paths honour $%s)" % C.OUTPUT_ROOT_ENV)
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--per-cell", dest="per_cell", type=int)
    p.add_argument("--composition", choices=["uniform", "table"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="urolesion", description="Lesion classification in endoscopy frames.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS, help="only report errors")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    _run_flags(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train architectures over scenarios with k-fold CV")
    _run_flags(t)
    t.add_argument("--data", help="dataset directory with manifest.csv (generated when omitted)")
    t.add_argument("--arch", action="append", help="repeatable; default all three")
    t.add_argument("--scenario", action="append", type=int, help="repeatable; default 1 2 3")
    t.add_argument("--scale", type=float, help="width scale")
    t.add_argument("--inception-variant", dest="inception_variant", choices=["classic", "factorized"])
    t.add_argument("--warm-epochs", dest="warm_epochs", type=int)
    t.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--folds", type=int)
    t.add_argument("--jobs", type=int, help="parallel (architecture, scenario) runs; default 1")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a dataset with a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--domain", choices=["CYS", "URS"])
    e.add_argument("--out", default="eval")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcam", parents=[common], help="Grad-CAM overlay for one image")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--image", required=True)
    c.add_argument("--class", dest="class_index", type=int, default=1)
    c.add_argument("--layer", help="target layer (default: output of the last convolutional block)")
    c.add_argument("--opacity", type=float, default=0.4)
    c.add_argument("--out", default="gradcam.ppm")
    c.add_argument("--csv", help="also dump the raw heatmap grid")
    c.set_defaults(func=cmd_gradcam)

    r = sub.add_parser("report", parents=[common], help="tables and ROC panels for a trained bundle")
    r.add_argument("--bundle", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    root = logging.getLogger("urolesion")
    root.handlers[:] = [handler]
    root.setLevel(logging.ERROR if args.quiet else logging.INFO)
    try:
        return args.func(args)
    except (UrolesionError, FileNotFoundError, OSError) as exc:
        code = exit_code(exc)
        line = {"error": str(exc), "kind": type(exc).__name__, "exit": code}
        if isinstance(exc, ConfigError) and exc.line is not None:
            line["line"] = exc.line
        if isinstance(exc, IncompleteBundleError):
            line["missing"] = exc.missing
        print(json.dumps(line, ensure_ascii=False), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
