"""Scoring, ROC/AUC and the experiment report."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .architectures import BACKBONES
from .dataset import DatasetManifest
from .errors import IncompleteBundleError, MetricError, UndefinedROCError
from .nn import Network
from .trainer import SCENARIOS, ExperimentBundle, RunRecord, load_bundle


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: int
    domain: str = ""
    fold: int = -1
    sample_id: str = ""

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise MetricError(f"score {self.score!r} outside [0, 1] for {self.sample_id or 'sample'}")
        if self.label not in (0, 1):
            raise MetricError(f"label must be 0 or 1, got {self.label!r}")


class Confusion(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def _arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple) and len(samples) == 2 and not isinstance(samples[0], ScoredSample):
        scores, labels = samples
    else:
        samples = list(samples)
        scores = [s.score for s in samples]
        labels = [s.label for s in samples]
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    if not np.all((labels == 0) | (labels == 1)):
        raise MetricError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def confusion_at_threshold(samples, threshold: float) -> Confusion:
    """Counts with ``score >= threshold`` predicted positive."""
    scores, labels = _arrays(samples)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    return Confusion(tp, fp, int(np.sum(labels == 0)) - fp, int(np.sum(labels == 1)) - tp)


def roc_curve(samples) -> RocCurve:
    """Exact ROC over all distinct score thresholds.

    Accepts a sequence of :class:`ScoredSample` or a ``(scores, labels)`` pair.
    Tied scores move the curve diagonally, which gives them half credit in
    the area. The area is accumulated on integer counts and divided once, so
    it equals the Mann-Whitney statistic exactly.
    """
    scores, labels = _arrays(samples)
    npos = int(labels.sum())
    nneg = len(labels) - npos
    if npos == 0 or nneg == 0:
        raise UndefinedROCError(f"ROC needs both classes (positives={npos}, negatives={nneg})")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    tps = np.r_[0, tps]
    fps = np.r_[0, fps]
    # trapezoids: sum (fp_i - fp_{i-1}) * (tp_i + tp_{i-1}) / 2
    twice_area = int(np.sum(np.diff(fps) * (tps[1:] + tps[:-1])))
    auc = twice_area / (2.0 * npos * nneg)
    return RocCurve(fps / nneg, tps / npos, np.r_[np.inf, s[last]], auc)


def roc_auc(samples) -> float:
    return roc_curve(samples).auc


def evaluate(network: Network, manifest: DatasetManifest, batch_size: int = 64, domain: str = "",
             fold: int = -1) -> list[ScoredSample]:
    """Lesion probability for every frame, in manifest order (inference mode)."""
    out = []
    for lo in range(0, len(manifest), batch_size):
        idx = list(range(lo, min(lo + batch_size, len(manifest))))
        x = manifest.images(idx).astype(network.dtype, copy=False)
        probs = network.forward(x, training=False, detach_params=True).data
        for i, p in zip(idx, probs[:, 1]):
            s = manifest[i]
            out.append(ScoredSample(float(p), s.label.index, domain, fold, s.sample_id))
    return out


# ---------------------------------------------------------------------------
# report

DOMAIN_ORDER = ("CYS", "URS", "CYS+URS")

# published operating points, kept next to the locally measured values
# (arch, scenario, step, train domain, eval domain, value, note)
REFERENCE_AUC = (
    ("vgg16", 1, 1, "CYS", "CYS", 0.846, "same-domain cystoscopy"),
    ("resnet50", 2, 1, "URS", "URS", 0.987, "same-domain ureteroscopy"),
    ("resnet50", 3, 1, "CYS+URS", "CYS+URS", 0.938, "combined data, results table"),
    ("resnet50", 3, 1, "CYS+URS", "CYS+URS", 0.940, "combined data, summary figure"),
    ("inception_v3", 1, 1, "CYS", "URS", 0.895, "cross-domain CYS to URS"),
    ("inception_v3", 2, 1, "URS", "CYS", 0.783, "cross-domain URS to CYS"),
    ("vgg16", 2, 1, "URS", "CYS", 0.691, "cystoscopy before second step"),
    ("vgg16", 2, 2, "CYS", "CYS", 0.834, "cystoscopy after second step"),
    ("resnet50", 1, 1, "CYS", "URS", 0.897, "ureteroscopy before second step"),
    ("resnet50", 1, 2, "URS", "URS", 0.979, "ureteroscopy after second step"),
)

ROC_PANELS = (("cys", 1, 1, "CYS"), ("urs", 2, 1, "URS"), ("combined", 3, 1, "CYS+URS"))
_COLORS = {"vgg16": "#1f77b4", "inception_v3": "#2ca02c", "resnet50": "#d62728"}


@dataclass(frozen=True)
class ReportRow:
    arch: str
    scenario: int
    step: int
    train_domain: str
    eval_domain: str
    fold: str
    auc: float | None


@dataclass
class Report:
    out_dir: Path
    rows: list[ReportRow]
    files: list[Path]

    def lookup(self, arch, scenario, step, eval_domain, fold="pooled") -> float | None:
        for r in self.rows:
            if (r.arch, r.scenario, r.step, r.eval_domain, r.fold) == (arch, scenario, step, eval_domain, str(fold)):
                return r.auc
        return None


def _fmt(v: float | None) -> str:
    return "" if v is None else format(v, ".10f")


def _safe_auc(scores, labels) -> float | None:
    try:
        return roc_curve((scores, labels)).auc
    except UndefinedROCError:
        return None


def check_complete(bundle: ExperimentBundle) -> None:
    missing = []
    meta = bundle.meta
    for arch in meta.get("archs", []):
        for s in meta.get("scenarios", []):
            sc = SCENARIOS[int(s)]
            for f in range(int(meta.get("folds", 0))):
                for step in range(1, len(sc.steps) + 1):
                    found = bundle.select(arch=arch, scenario=int(s), fold=f, step=step)
                    if not found:
                        missing.append(f"{arch}/scenario{s}/fold{f}/step{step}")
                        continue
                    for dom in sc.eval_domains:
                        if dom not in found[0].evals:
                            missing.append(f"{arch}/scenario{s}/fold{f}/step{step}/eval:{dom}")
    if missing:
        raise IncompleteBundleError(missing)


def _arch_key(a: str) -> int:
    return BACKBONES.index(a) if a in BACKBONES else len(BACKBONES)


def aggregate(records: Sequence[RunRecord]) -> list[ReportRow]:
    """Per-fold, mean-of-folds and pooled AUC for every (arch, scenario, step, eval domain)."""
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.arch, r.scenario, r.step), []).append(r)
    rows = []
    for (arch, sc, step) in sorted(groups, key=lambda k: (_arch_key(k[0]), k[1], k[2])):
        recs = sorted(groups[(arch, sc, step)], key=lambda r: r.fold)
        train_domain = recs[0].train_domain
        domains = [d for d in DOMAIN_ORDER if any(d in r.evals for r in recs)]
        for dom in domains:
            per_fold = []
            pooled_s, pooled_y = [], []
            for r in recs:
                if dom not in r.evals:
                    continue
                e = r.evals[dom]
                auc = _safe_auc(e["scores"], e["labels"])
                rows.append(ReportRow(arch, sc, step, train_domain, dom, str(r.fold), auc))
                if auc is not None:
                    per_fold.append(auc)
                pooled_s += e["scores"]
                pooled_y += e["labels"]
            mean = float(np.mean(per_fold)) if per_fold else None
            rows.append(ReportRow(arch, sc, step, train_domain, dom, "mean", mean))
            rows.append(ReportRow(arch, sc, step, train_domain, dom, "pooled", _safe_auc(pooled_s, pooled_y)))
    return rows


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _pooled(records: Sequence[RunRecord], dom: str) -> tuple[list[float], list[int]]:
    s, y = [], []
    for r in sorted(records, key=lambda r: r.fold):
        if dom in r.evals:
            s += r.evals[dom]["scores"]
            y += r.evals[dom]["labels"]
    return s, y


def roc_svg(title: str, curves: Sequence[tuple[str, RocCurve]], size: int = 360) -> str:
    pad, inner = 48, size - 72
    px = lambda v: pad + v * inner
    py = lambda v: pad + (1 - v) * inner
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<text x="{size / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="black"/>',
        f'<line x1="{px(0):.2f}" y1="{py(0):.2f}" x2="{px(1):.2f}" y2="{py(1):.2f}" stroke="#999" '
        'stroke-dasharray="4 3"/>',
    ]
    for t in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{px(t):.2f}" y="{size - 30}" text-anchor="middle" font-family="sans-serif" '
                     f'font-size="10">{t:g}</text>')
        parts.append(f'<text x="{pad - 6}" y="{py(t) + 3:.2f}" text-anchor="end" font-family="sans-serif" '
                     f'font-size="10">{t:g}</text>')
    parts.append(f'<text x="{size / 2:.1f}" y="{size - 12}" text-anchor="middle" font-family="sans-serif" '
                 'font-size="11">false positive rate</text>')
    parts.append(f'<text x="14" y="{size / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="11" '
                 f'transform="rotate(-90 14 {size / 2:.1f})">true positive rate</text>')
    for i, (arch, c) in enumerate(curves):
        color = _COLORS.get(arch, "#444")
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(c.fpr, c.tpr))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = py(0) - 12 - 14 * i
        parts.append(f'<text x="{px(1) - 6:.2f}" y="{ly:.2f}" text-anchor="end" font-family="sans-serif" '
                     f'font-size="10" fill="{color}">{arch} AUC={c.auc:.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def report(bundle_dir: str | os.PathLike, out_dir: str | os.PathLike | None = None) -> Report:
    """Tabulate a trained bundle.

    Writes ``report.csv`` (per-fold, mean and pooled AUC), ``cross_domain_step1.csv``,
    ``step_delta.csv``, ``reference_auc.csv`` and one ROC panel (SVG + CSV)
    per training domain. Output bytes depend only on the bundle contents.
    """
    bundle = load_bundle(bundle_dir)
    out = Path(out_dir) if out_dir is not None else Path(bundle_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    if not bundle.meta.get("archs") or not bundle.meta.get("scenarios"):
        p = out / "status.txt"
        p.write_text("no runs\n", encoding="utf-8")
        return Report(out, [], [p])
    check_complete(bundle)
    rows = aggregate(bundle.records)
    files.append(_write_csv(out / "report.csv",
                            ["arch", "scenario", "step", "train_domain", "eval_domain", "fold", "auc"],
                            [(r.arch, r.scenario, r.step, r.train_domain, r.eval_domain, r.fold, _fmt(r.auc))
                             for r in rows]))
    rep = Report(out, rows, files)

    cross = [(r.arch, r.scenario, r.train_domain, r.eval_domain, _fmt(r.auc),
              _fmt(rep.lookup(r.arch, r.scenario, 1, r.eval_domain, "pooled")))
             for r in rows if r.step == 1 and r.fold == "mean"]
    files.append(_write_csv(out / "cross_domain_step1.csv",
                            ["arch", "scenario", "train_domain", "eval_domain", "auc_mean", "auc_pooled"], cross))

    delta = []
    for r in rows:
        if r.step == 2 and r.fold == "pooled":
            a1 = rep.lookup(r.arch, r.scenario, 1, r.eval_domain)
            d = None if a1 is None or r.auc is None else r.auc - a1
            delta.append((r.arch, r.scenario, r.eval_domain, _fmt(a1), _fmt(r.auc), _fmt(d)))
    files.append(_write_csv(out / "step_delta.csv",
                            ["arch", "scenario", "eval_domain", "step1_auc", "step2_auc", "delta"], delta))

    ref = []
    for arch, sc, step, tdom, edom, value, note in REFERENCE_AUC:
        ref.append((arch, sc, step, tdom, edom, f"{value:.3f}", _fmt(rep.lookup(arch, sc, step, edom)), note))
    files.append(_write_csv(out / "reference_auc.csv",
                            ["arch", "scenario", "step", "train_domain", "eval_domain", "reference_auc",
                             "local_auc_pooled", "note"], ref))

    for panel, sc, step, dom in ROC_PANELS:
        curves = []
        pts = []
        for arch in sorted({r.arch for r in bundle.records}, key=_arch_key):
            recs = bundle.select(arch=arch, scenario=sc, step=step)
            if not recs:
                continue
            s, y = _pooled(recs, dom)
            try:
                c = roc_curve((s, y))
            except UndefinedROCError:
                continue
            curves.append((arch, c))
            pts += [(arch, "pooled", f"{a:.10f}", f"{b:.10f}") for a, b in zip(c.fpr, c.tpr)]
            for r in sorted(recs, key=lambda r: r.fold):
                e = r.evals.get(dom)
                if e is None or len(set(e["labels"])) < 2:
                    continue
                fc = roc_curve((e["scores"], e["labels"]))
                pts += [(arch, str(r.fold), f"{a:.10f}", f"{b:.10f}") for a, b in zip(fc.fpr, fc.tpr)]
        if not curves:
            continue
        files.append(_write_csv(out / f"roc_{panel}.csv", ["arch", "fold", "fpr", "tpr"], pts))
        svg = out / f"roc_{panel}.svg"
        svg.write_text(roc_svg(f"ROC, trained and tested on {dom}", curves), encoding="utf-8")
        files.append(svg)
    (out / "report_files.json").write_text(json.dumps(sorted(p.name for p in files), indent=1) + "\n",
                                           encoding="utf-8")
    return rep
