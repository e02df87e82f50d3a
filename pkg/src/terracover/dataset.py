"""Dataset assembly: patch labels, manifests, splits, augmentation and
synthetic raster pairs.

A manifest is a CSV with header ``patch_id,image,mask,split,l1,l2,l3``;
label columns hold ``;``-joined class indices for each hierarchy level.
Paths are stored relative to the manifest file. A JSON sidecar
(``<stem>.json``) records the seed, split fraction and per-level class
counts.
"""

from __future__ import annotations

import csv
import json
import math
import os
import random
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import raster
from .errors import DataWarning, DatasetError, RasterError
from .raster import NODATA, PatchPair
from .taxonomy import LEVELS, LabelSet, Taxonomy

MANIFEST_HEADER = ["patch_id", "image", "mask", "split", "l1", "l2", "l3"]
AUGMENT_OPS = ("hflip", "vflip", "rot90", "rot180", "rot270")


def derive_labels(mask: np.ndarray, taxonomy: Taxonomy, level: int,
                  min_pixels: int = 1) -> LabelSet:
    """Classes present in ``mask`` with at least ``min_pixels`` pixels."""
    k = taxonomy.num_classes(level)
    mask = raster.check_mask(mask, k)
    counts = np.bincount(mask.ravel(), minlength=256)[:k]
    present = np.flatnonzero(counts >= max(1, min_pixels))
    if present.size == 0:
        warnings.warn("mask has no labelled pixels; empty label set", DataWarning,
                      stacklevel=2)
    return LabelSet(level, present.tolist())


def lift_mask(mask: np.ndarray, taxonomy: Taxonomy, from_level: int, to_level: int) -> np.ndarray:
    """Map a mask of ``from_level`` indices to ``to_level`` indices; nodata is kept."""
    if from_level == to_level:
        return mask
    table = np.full(256, NODATA, np.uint8)
    table[:taxonomy.num_classes(from_level)] = taxonomy.lift_table(from_level, to_level)
    return table[mask]


@dataclass
class Sample:
    patch_id: str
    image: Path
    mask: Path
    labels: dict[int, LabelSet]
    split: str

    def labels_at(self, level: int) -> LabelSet:
        return self.labels[level]


@dataclass
class Manifest:
    samples: list[Sample]
    seed: int
    level_counts: dict[int, int]
    split_fraction: float = 0.8
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def by_id(self) -> dict[str, Sample]:
        return {s.patch_id: s for s in self.samples}


def _format_labels(labels: LabelSet) -> str:
    return ";".join(str(i) for i in labels.sorted())


def _parse_labels(text: str, level: int) -> LabelSet:
    text = text.strip()
    if not text:
        return LabelSet(level, ())
    try:
        return LabelSet(level, [int(t) for t in text.split(";")])
    except ValueError:
        raise DatasetError(f"malformed label list {text!r}") from None


def read_exclusion_list(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]


def scan_patch_dir(patch_dir) -> list[str]:
    """Sorted ids of matched ``{id}_img.png`` / ``{id}_mask.png`` pairs."""
    patch_dir = Path(patch_dir)
    if not patch_dir.is_dir():
        raise DatasetError(f"patch directory not found: {patch_dir}")
    images, masks = set(), set()
    for entry in os.listdir(patch_dir):
        if entry.endswith("_img.png"):
            images.add(entry[:-len("_img.png")])
        elif entry.endswith("_mask.png"):
            masks.add(entry[:-len("_mask.png")])
    orphans = sorted(images ^ masks)
    if orphans:
        pid = orphans[0]
        kind = "image" if pid in images else "mask"
        raise DatasetError(f"orphan {kind} file for patch {pid} "
                           f"({len(orphans)} unmatched in total)")
    return sorted(images)


def split_ids(ids: Sequence[str], split_fraction: float, seed: int) -> dict[str, str]:
    """Seeded Fisher-Yates shuffle; first ceil(fraction*N) ids go to train."""
    if not 0 < split_fraction <= 1:
        raise DatasetError(f"split fraction must be in (0, 1], got {split_fraction}")
    order = sorted(ids)
    random.Random(seed).shuffle(order)
    n_train = math.ceil(round(split_fraction * len(order), 9))
    return {pid: ("train" if i < n_train else "val") for i, pid in enumerate(order)}


def build_manifest(patch_dir, taxonomy: Taxonomy, exclusion_list: Iterable[str] = (),
                   split_fraction: float = 0.8, seed: int = 42, min_pixels: int = 1,
                   threads: int = 1) -> Manifest:
    patch_dir = Path(patch_dir).resolve()
    all_ids = scan_patch_dir(patch_dir)
    excluded = set(exclusion_list)
    unknown = sorted(excluded - set(all_ids))
    if unknown:
        warnings.warn(f"{len(unknown)} excluded ids not found in {patch_dir}: "
                      f"{', '.join(unknown[:5])}", DataWarning, stacklevel=2)
    ids = [i for i in all_ids if i not in excluded]
    k3 = taxonomy.num_classes(3)

    def labels_for(pid):
        _, mask_path = raster.patch_paths(patch_dir, pid)
        mask = raster.load_mask(mask_path, k3)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            l3 = derive_labels(mask, taxonomy, 3, min_pixels)
        return l3, bool(caught)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        derived = list(pool.map(labels_for, ids))
    empty = [pid for pid, (_, flagged) in zip(ids, derived) if flagged]
    if empty:
        warnings.warn(f"{len(empty)} patches have only nodata pixels: "
                      f"{', '.join(empty[:5])}", DataWarning, stacklevel=2)

    splits = split_ids(ids, split_fraction, seed)
    samples = []
    for pid, (l3, _) in zip(ids, derived):
        img_path, mask_path = raster.patch_paths(patch_dir, pid)
        labels = {3: l3, 2: taxonomy.lift_label_set(l3, 2), 1: taxonomy.lift_label_set(l3, 1)}
        samples.append(Sample(pid, img_path, mask_path, labels, splits[pid]))
    return Manifest(samples, seed, taxonomy.level_counts(), split_fraction,
                    meta={"min_pixels": min_pixels,
                          "excluded": sorted(excluded & set(all_ids))})


def sidecar_path(manifest_path) -> Path:
    return Path(manifest_path).with_suffix(".json")


def write_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for s in manifest.samples:
            writer.writerow([
                s.patch_id,
                Path(os.path.relpath(s.image, base)).as_posix(),
                Path(os.path.relpath(s.mask, base)).as_posix(),
                s.split,
                *(_format_labels(s.labels[lvl]) for lvl in LEVELS),
            ])
    meta = {"seed": manifest.seed, "split_fraction": manifest.split_fraction,
            "level_counts": {str(k): v for k, v in manifest.level_counts.items()},
            **manifest.meta}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    base = path.parent.resolve()
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise DatasetError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        seen = set()
        for row in reader:
            pid = row["patch_id"]
            if pid in seen:
                raise DatasetError(f"{path}: duplicate patch id {pid}")
            seen.add(pid)
            if row["split"] not in ("train", "val"):
                raise DatasetError(f"{path}: invalid split {row['split']!r} for {pid}")
            labels = {lvl: _parse_labels(row[f"l{lvl}"], lvl) for lvl in LEVELS}
            samples.append(Sample(pid, base / row["image"], base / row["mask"], labels,
                                  row["split"]))
    meta = {}
    if sidecar_path(path).is_file():
        meta = json.loads(sidecar_path(path).read_text())
    seed = int(meta.pop("seed", 0))
    fraction = float(meta.pop("split_fraction", 0.8))
    counts = {int(k): int(v) for k, v in meta.pop("level_counts", {}).items()}
    return Manifest(samples, seed, counts or {1: 5, 2: 15, 3: 43}, fraction, meta)


def write_legends(taxonomy: Taxonomy, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for lvl in LEVELS:
        p = directory / f"legend_l{lvl}.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["index", "corine_code", "name"])
            writer.writerows(taxonomy.legend_rows(lvl))
        out.append(p)
    return out


def augment(pair: PatchPair, op: str) -> PatchPair:
    """Apply one lossless dihedral transform to image and mask together."""
    if op not in AUGMENT_OPS:
        raise DatasetError(f"unknown augmentation {op!r}; expected one of {AUGMENT_OPS}")
    if op.startswith("rot") and pair.mask.shape[0] != pair.mask.shape[1]:
        raise DatasetError("rotations require a square patch")
    return PatchPair(pair.patch_id, apply_op(pair.image, op), apply_op(pair.mask, op))


def apply_op(grid: np.ndarray, op: str, axes=(0, 1)) -> np.ndarray:
    """Dihedral transform of the two spatial ``axes`` of any array."""
    if op == "hflip":
        return np.flip(grid, axis=axes[1])
    if op == "vflip":
        return np.flip(grid, axis=axes[0])
    if op in ("rot90", "rot180", "rot270"):
        return np.rot90(grid, k=int(op[3:]) // 90, axes=axes)
    raise DatasetError(f"unknown augmentation {op!r}")


def default_palette(n: int) -> list[tuple[int, int, int]]:
    """``n`` colors from a 4x4x4 grid with 64-level spacing, spread out."""
    grid = [(r, g, b) for r in (32, 96, 160, 224) for g in (32, 96, 160, 224)
            for b in (32, 96, 160, 224)]
    order = [(i * 37 + 21) % 64 for i in range(64)]
    if n > 64:
        raise DatasetError("default palette supports at most 64 classes")
    return [grid[j] for j in order[:n]]


@dataclass
class SyntheticSpec:
    """Parameters for a synthetic image/mask pair.

    ``classes`` lists the mask index used for each synthetic class (defaults
    to ``0..num_classes-1``); ``color_map`` maps those indices to mean RGB.
    """

    size: int = 1200
    num_classes: int = 3
    region_scale: int = 240
    noise_std: float = 10.0
    seed: int = 0
    classes: list[int] | None = None
    color_map: dict[int, tuple[int, int, int]] | None = None

    def resolved(self) -> "SyntheticSpec":
        classes = list(self.classes) if self.classes is not None else list(range(self.num_classes))
        color_map = dict(self.color_map) if self.color_map is not None else dict(
            zip(classes, default_palette(len(classes))))
        return replace(self, classes=classes, color_map=color_map)

    def validate(self) -> "SyntheticSpec":
        spec = self.resolved()
        if not 1 <= spec.num_classes <= 43:
            raise DatasetError(f"num_classes must be in 1..43, got {spec.num_classes}")
        if len(spec.classes) != spec.num_classes or len(set(spec.classes)) != spec.num_classes:
            raise DatasetError("classes must list num_classes distinct indices")
        if any(not 0 <= c < NODATA for c in spec.classes):
            raise DatasetError("class indices must be in 0..254")
        if set(spec.color_map) != set(spec.classes):
            raise DatasetError("color_map must define exactly the synthetic classes")
        if spec.size <= 0 or spec.region_scale <= 0 or spec.noise_std < 0:
            raise DatasetError("size and region_scale must be positive, noise_std >= 0")
        colors = [np.asarray(spec.color_map[c], float) for c in spec.classes]
        for i in range(len(colors)):
            for j in range(i + 1, len(colors)):
                if np.max(np.abs(colors[i] - colors[j])) < 4 * spec.noise_std:
                    raise DatasetError(
                        f"classes {spec.classes[i]} and {spec.classes[j]} colors are closer "
                        f"than 4*noise_std={4 * spec.noise_std} in every channel")
        return spec


BENCHMARK_CODES = (112, 211, 312)
BENCHMARK_REGION_SCALE = 400


def benchmark_spec(taxonomy: Taxonomy, seed: int = 0) -> SyntheticSpec:
    """The 1200x1200 three-class raster used for the end-to-end benchmark.

    Regions of about 400 px keep most 120 px patches to one or two classes,
    and the slivers of a neighbouring region that do appear are large enough
    for a pooled classifier to see.
    """
    classes = [taxonomy.code_to_index(c, 3) for c in BENCHMARK_CODES]
    return SyntheticSpec(size=1200, num_classes=3, classes=classes,
                         region_scale=BENCHMARK_REGION_SCALE, noise_std=10.0, seed=seed)


def generate_synthetic(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Voronoi-partitioned mask with one class per region plus a noisy image.

    Sites sit one per ``region_scale`` cell at a random offset, so each pixel's
    nearest site is found among the 3x3 surrounding cells.
    """
    spec = spec.validate()
    rng = np.random.default_rng(spec.seed)
    s = spec.region_scale
    cells = -(-spec.size // s)
    # sites[cy, cx] = (y, x), clamped inside the image
    sites = np.stack([np.arange(cells)[:, None] * s + rng.uniform(0, s, (cells, cells)),
                      np.arange(cells)[None, :] * s + rng.uniform(0, s, (cells, cells))], -1)
    sites = np.minimum(np.floor(sites), spec.size - 1)
    n_sites = cells * cells
    if n_sites < spec.num_classes:
        raise DatasetError(f"only {n_sites} regions fit; reduce region_scale or num_classes")
    site_class = rng.permutation(np.arange(n_sites) % spec.num_classes).reshape(cells, cells)

    yy, xx = np.meshgrid(np.arange(spec.size), np.arange(spec.size), indexing="ij")
    cy, cx = yy // s, xx // s
    best = np.full((spec.size, spec.size), np.inf)
    owner = np.zeros((spec.size, spec.size), np.int64)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ny, nx = cy + dy, cx + dx
            ok = (ny >= 0) & (ny < cells) & (nx >= 0) & (nx < cells)
            nyc, nxc = np.clip(ny, 0, cells - 1), np.clip(nx, 0, cells - 1)
            site = sites[nyc, nxc]
            d = (site[..., 0] - yy) ** 2 + (site[..., 1] - xx) ** 2
            d = np.where(ok, d, np.inf)
            closer = d < best
            best = np.where(closer, d, best)
            owner = np.where(closer, nyc * cells + nxc, owner)
    cls_idx = site_class.ravel()[owner]
    classes = np.asarray(spec.classes, np.uint8)
    mask = classes[cls_idx]
    palette = np.asarray([spec.color_map[c] for c in spec.classes], float)
    image = palette[cls_idx]
    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return image, mask


def corrupt_labels(manifest: Manifest, fraction: float, seed: int, taxonomy: Taxonomy,
                   level: int = 3) -> tuple[Manifest, list[str]]:
    """Tamper with one label of round(fraction * N_val) validation samples.

    The chosen index is replaced by a different valid index not already in
    the set; coarser levels are re-derived from the tampered level. Returns
    the new manifest and the sorted tampered ids.
    """
    if not 0 < fraction < 1:
        raise DatasetError(f"corruption fraction must be in (0, 1), got {fraction}")
    rng = random.Random(seed)
    val_ids = sorted(s.patch_id for s in manifest.samples if s.split == "val")
    chosen = sorted(rng.sample(val_ids, int(round(fraction * len(val_ids)))))
    k = taxonomy.num_classes(level)
    by_id = {}
    for pid in chosen:
        s = next(x for x in manifest.samples if x.patch_id == pid)
        current = set(s.labels[level].indices)
        outside = [i for i in range(k) if i not in current]
        if current and outside:
            victim = rng.choice(sorted(current))
            current.discard(victim)
            current.add(rng.choice(outside))
        elif current:
            current.discard(rng.choice(sorted(current)))
        else:
            current.add(rng.randrange(k))
        labels = dict(s.labels)
        labels[level] = LabelSet(level, current)
        for coarser in range(level - 1, 0, -1):
            labels[coarser] = taxonomy.lift_label_set(labels[level], coarser)
        by_id[pid] = replace(s, labels=labels)
    samples = [by_id.get(s.patch_id, s) for s in manifest.samples]
    meta = dict(manifest.meta, corrupted=chosen, corruption_seed=seed)
    return replace(manifest, samples=samples, meta=meta), chosen


def load_pair(sample: Sample, num_classes: int | None = None) -> PatchPair:
    try:
        return PatchPair(sample.patch_id, raster.load_image(sample.image),
                         raster.load_mask(sample.mask, num_classes))
    except RasterError as exc:
        raise DatasetError(f"patch {sample.patch_id}: {exc.args[0]}") from None
