"""Tabular report emission: every table is written as CSV and markdown.

Tables produced here:

* dataset statistics per level (cardinality, density, image count)
* overall classification results (exact/partial/incorrect, F1 modes)
* per-class precision, recall, F1 and image support
* per-class segmentation IoU and overall pixel accuracy
* row-normalized confusion matrices (rows are true classes)

``bundle`` folds every CSV in a directory into one markdown document.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .dataset import Manifest
from .errors import MetricError
from .taxonomy import Taxonomy


@dataclass
class Table:
    title: str
    header: list[str]
    rows: list[list] = field(default_factory=list)

    def _cells(self):
        return [[_fmt(v) for v in row] for row in self.rows]

    def to_markdown(self) -> str:
        lines = [f"### {self.title}", "", "| " + " | ".join(self.header) + " |",
                 "|" + "|".join("---" for _ in self.header) + "|"]
        lines += ["| " + " | ".join(row) + " |" for row in self._cells()]
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header)
            w.writerows(self._cells())
        md_path = out_dir / f"{stem}.md"
        md_path.write_text(self.to_markdown())
        return csv_path, md_path


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else f"{float(v):.4f}"
    return str(v)


def _class_names(taxonomy: Taxonomy, level: int) -> list[str]:
    return [taxonomy.name(i, level) for i in range(taxonomy.num_classes(level))]


def stats_table(manifest: Manifest, taxonomy: Taxonomy,
                levels: Sequence[int] = (1, 2, 3), split: str | None = None) -> Table:
    samples = manifest.split(split) if split else manifest.samples
    t = Table("Dataset statistics", ["level", "classes", "images", "cardinality", "density"])
    for level in levels:
        k = taxonomy.num_classes(level)
        batch = metrics.MultiLabelBatch([s.labels[level].indices for s in samples],
                                        [[] for _ in samples], k)
        t.rows.append([level, k, len(samples), metrics.cardinality(batch),
                       metrics.density(batch)])
    return t


def overall_table(report: metrics.ClassReport, level: int) -> Table:
    t = Table("Classification results",
              ["level", "exact", "partial", "incorrect", "f1_sample", "f1_micro", "f1_macro"])
    t.rows.append([level, report.exact, report.partial, report.incorrect,
                   report.f1_modes["sample_averaged"], report.f1_modes["micro"],
                   report.f1_modes["macro"]])
    return t


def per_class_table(report: metrics.ClassReport, taxonomy: Taxonomy, level: int,
                    include_absent: bool = False) -> Table:
    """Per-class scores; classes with no truth and no prediction are skipped by default."""
    t = Table(f"Per-class results (level {level})",
              ["index", "code", "class", "precision", "recall", "f1", "images"])
    names = _class_names(taxonomy, level)
    for i, name in enumerate(names):
        seen = report.support[i] > 0 or report.precision[i] > 0
        if seen or include_absent:
            t.rows.append([i, taxonomy.index_to_code(i, level), name, report.precision[i],
                           report.recall[i], report.f1[i], int(report.support[i])])
    return t


def segmentation_table(report: metrics.SegmentationReport, taxonomy: Taxonomy,
                       level: int) -> Table:
    t = Table(f"Segmentation results (level {level}); accuracy {report.accuracy:.4f}, "
              f"mean IoU {report.mean_iou:.4f}", ["index", "code", "class", "iou", "pixels"])
    names = _class_names(taxonomy, level)
    for i in np.flatnonzero(~np.isnan(report.iou)):
        t.rows.append([int(i), taxonomy.index_to_code(int(i), level), names[i], report.iou[i],
                       int(report.pixel_support[i])])
    return t


def confusion_table(cm: metrics.ConfusionMatrix, taxonomy: Taxonomy, level: int,
                    classes: Sequence[int] | None = None) -> Table:
    """Row-normalized confusion restricted to ``classes`` (default: classes that occur)."""
    if classes is None:
        occurs = (cm.counts.sum(0) + cm.counts.sum(1)) > 0
        classes = np.flatnonzero(occurs).tolist()
    codes = [str(taxonomy.index_to_code(i, level)) for i in classes]
    norm = cm.row_normalized()
    t = Table(f"Confusion (level {level}); rows are true labels, columns predictions",
              ["true \\ predicted", *codes])
    for i, code in zip(classes, codes):
        t.rows.append([code, *(float(norm[i, j]) for j in classes)])
    return t


def correlation_table(support, scores, score_name: str) -> Table:
    t = Table("Support vs score correlation", ["score", "classes", "pearson"])
    support = np.asarray(support, float)
    scores = np.asarray(scores, float)
    used = int(((support > 0) & ~np.isnan(scores)).sum())
    try:
        r = metrics.support_score_correlation(support, scores)
    except MetricError:
        r = float("nan")
    t.rows.append([score_name, used, r])
    return t


def _csv_to_markdown(path: Path) -> str:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return f"### {path.stem}\n\n(empty)\n"
    header, body = rows[0], rows[1:]
    lines = [f"### {path.stem}", "", "| " + " | ".join(header) + " |",
             "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in body]
    return "\n".join(lines) + "\n"


def bundle(in_dirs: Sequence, out_path, title: str = "terracover report") -> Path:
    """Concatenate every CSV found (recursively, sorted) under ``in_dirs``."""
    out_path = Path(out_path)
    sections = [f"# {title}", ""]
    for d in in_dirs:
        for p in sorted(Path(d).rglob("*.csv")):
            if p.resolve() == out_path.resolve():
                continue
            sections.append(f"<!-- {p} -->")
            sections.append(_csv_to_markdown(p))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(sections))
    return out_path
