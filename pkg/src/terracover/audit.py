"""Loss-ranked label-noise auditing.

Validation samples are scored with the training loss of the network's task
and sorted from highest to lowest loss. Samples at the top of the ranking are
the ones the model disagrees with most and are the first candidates for a
human to re-check. Nothing is relabelled automatically.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataset as ds
from .errors import AuditError
from .nn.layers import sigmoid, softmax
from .taxonomy import LabelSet, Taxonomy
from .trainer import (ArrayData, argmax_masks, bce_per_sample, forward_batches, load_arrays,
                      pixel_ce_per_sample)

SUSPECT_HEADER = ("rank", "patch_id", "loss", "predicted", "probabilities", "stored_truth")


@dataclass(frozen=True)
class SuspectRecord:
    patch_id: str
    loss: float
    predicted: LabelSet
    probabilities: dict[int, float]
    stored_truth: LabelSet

    @property
    def top_probability(self) -> float:
        """Probability of the most confident predicted label (0 if none)."""
        return max((self.probabilities[i] for i in self.predicted), default=0.0)


def _classify_records(net, data: ArrayData, level, threshold, batch_size):
    out = []
    for start, logits in forward_batches(net, data.images, batch_size):
        z = np.asarray(logits, np.float64)
        losses = bce_per_sample(z, data.targets[start:start + len(z)])
        probs = sigmoid(z)
        for j in range(len(z)):
            pred = np.flatnonzero(probs[j] > threshold)
            out.append((data.ids[start + j], float(losses[j]), LabelSet(level, pred.tolist()),
                        {int(i): float(probs[j, i]) for i in pred}))
    return out


def _segment_records(net, data: ArrayData, level, batch_size):
    # predicted labels are the classes of the argmax mask, weighted by mean softmax mass
    out = []
    for start, logits in forward_batches(net, data.images, batch_size):
        z = np.asarray(logits, np.float64)
        losses = pixel_ce_per_sample(z, data.masks[start:start + len(z)])
        masks = argmax_masks(z)
        probs = softmax(z, axis=1).mean(axis=(2, 3))
        for j in range(len(z)):
            pred = np.unique(masks[j])
            out.append((data.ids[start + j], float(losses[j]), LabelSet(level, pred.tolist()),
                        {int(i): float(probs[j, i]) for i in pred}))
    return out


def rank_by_loss(net, samples: Sequence[ds.Sample], level: int, taxonomy: Taxonomy,
                 threshold: float = 0.5, batch_size: int = 8,
                 data: ArrayData | None = None) -> list[SuspectRecord]:
    """Score every sample with the task loss; highest loss first, ties by patch_id."""
    if not samples and data is None:
        raise AuditError("empty split")
    data = data or load_arrays(samples, taxonomy, level)
    if net.task == "classify":
        rows = _classify_records(net, data, level, threshold, batch_size)
    else:
        rows = _segment_records(net, data, level, batch_size)
    truths = dict(zip(data.ids, data.truths))
    records = [SuspectRecord(pid, loss, pred, probs, LabelSet(level, truths[pid]))
               for pid, loss, pred, probs in rows]
    records.sort(key=lambda r: (-r.loss, r.patch_id))
    return records


def flag_count(n: int, top_fraction: float) -> int:
    if not 0 < top_fraction <= 1:
        raise AuditError(f"top fraction must be in (0, 1], got {top_fraction}")
    # round away float noise before the ceiling so 0.3 * 10 gives 3, not 4
    return min(n, math.ceil(round(top_fraction * n, 9)))


def flag_suspects(ranked: Sequence[SuspectRecord], top_fraction: float,
                  taxonomy: Taxonomy | None = None) -> tuple[list[str], str]:
    """The top ``ceil(top_fraction * N)`` patch ids and a readable report."""
    top = list(ranked[:flag_count(len(ranked), top_fraction)])
    return [r.patch_id for r in top], format_report(top, taxonomy)


def _names(labels: LabelSet, taxonomy: Taxonomy | None) -> str:
    if not labels:
        return "(none)"
    if taxonomy is None:
        return ", ".join(str(i) for i in labels.sorted())
    return ", ".join(taxonomy.name(i, labels.level) for i in labels.sorted())


def format_report(records: Sequence[SuspectRecord], taxonomy: Taxonomy | None = None) -> str:
    lines = [f"{len(records)} suspect sample(s), highest loss first", ""]
    for rank, r in enumerate(records, 1):
        lines += [f"#{rank} {r.patch_id}",
                  f"  Predicted: {_names(r.predicted, taxonomy)} "
                  f"(Probability: {r.top_probability:.2f})",
                  f"  True label: {_names(r.stored_truth, taxonomy)}",
                  f"  Loss: {r.loss:.4f}"]
    return "\n".join(lines) + "\n"


def write_suspects(records: Sequence[SuspectRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUSPECT_HEADER)
        for rank, r in enumerate(records, 1):
            w.writerow([rank, r.patch_id, f"{r.loss:.8f}",
                        ";".join(map(str, r.predicted.sorted())),
                        ";".join(f"{r.probabilities[i]:.4f}" for i in r.predicted.sorted()),
                        ";".join(map(str, r.stored_truth.sorted()))])
    return path


def planted_recall(flagged: Sequence[str], planted: Sequence[str]) -> float:
    """Fraction of planted ids that were flagged (1.0 when nothing was planted)."""
    planted = set(planted)
    if not planted:
        return 1.0
    return len(planted & set(flagged)) / len(planted)
