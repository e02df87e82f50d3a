"""Image/mask grid I/O, patch tiling and mosaic reassembly.

Images are ``(H, W, 3)`` uint8 arrays in R, G, B order. Masks are ``(H, W)``
uint8 arrays of contiguous class indices; ``NODATA`` (255) marks pixels
without a label.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import RasterError

NODATA = 255
PATCH_SIZE = 120
_ID_RE = re.compile(r"^r(\d+)_c(\d+)$")


@dataclass
class PatchPair:
    patch_id: str
    image: np.ndarray
    mask: np.ndarray

    @property
    def grid_position(self) -> tuple[int, int]:
        return parse_patch_id(self.patch_id)


def patch_id(row: int, col: int) -> str:
    return f"r{row}_c{col}"


def parse_patch_id(pid: str) -> tuple[int, int]:
    m = _ID_RE.match(pid)
    if not m:
        raise RasterError(f"malformed patch id {pid!r}")
    return int(m.group(1)), int(m.group(2))


def check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise RasterError(f"image must have shape (H, W, 3), got {image.shape}")
    if image.dtype != np.uint8:
        raise RasterError(f"image must be uint8, got {image.dtype}")
    return image


def check_mask(mask: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.dtype != np.uint8:
        raise RasterError(f"mask must be a 2-D uint8 grid, got {mask.dtype}{mask.shape}")
    if num_classes is not None:
        bad = (mask >= num_classes) & (mask != NODATA)
        if bad.any():
            raise RasterError(
                f"mask value {int(mask[bad].max())} is not a class index < {num_classes} "
                f"nor nodata ({NODATA})")
    return mask


def _open(path):
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except FileNotFoundError:
        raise RasterError(f"no such file: {path}") from None
    except (UnidentifiedImageError, OSError) as exc:
        raise RasterError(f"cannot decode {path}: {exc}") from None


def load_image(path) -> np.ndarray:
    im = _open(path)
    if im.mode != "RGB":
        raise RasterError(f"{path}: expected 3-channel RGB image, got mode {im.mode}")
    return np.asarray(im, dtype=np.uint8).copy()


def save_image(path, image: np.ndarray) -> None:
    image = check_image(image)
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def load_mask(path, num_classes: int | None = None) -> np.ndarray:
    im = _open(path)
    if im.mode != "L":
        raise RasterError(f"{path}: expected 8-bit grayscale mask, got mode {im.mode}")
    mask = np.asarray(im, dtype=np.uint8).copy()
    try:
        return check_mask(mask, num_classes)
    except RasterError as exc:
        raise RasterError(f"{path}: {exc.args[0]}") from None


def save_mask(path, mask: np.ndarray) -> None:
    mask = check_mask(mask)
    Image.fromarray(mask, mode="L").save(path, format="PNG")


def tile_pair(image: np.ndarray, mask: np.ndarray, patch: int = PATCH_SIZE) -> list[PatchPair]:
    """Cut non-overlapping ``patch``-square pairs in row-major order.

    Trailing rows and columns that do not fill a whole patch are dropped.
    Patches are views into the inputs.
    """
    image = check_image(image)
    mask = check_mask(mask)
    if not isinstance(patch, (int, np.integer)) or patch <= 0:
        raise RasterError(f"patch size must be a positive integer, got {patch!r}")
    if image.shape[:2] != mask.shape:
        raise RasterError(f"image {image.shape[:2]} and mask {mask.shape} dimensions differ")
    rows, cols = image.shape[0] // patch, image.shape[1] // patch
    out = []
    for r in range(rows):
        ys = slice(r * patch, (r + 1) * patch)
        for c in range(cols):
            xs = slice(c * patch, (c + 1) * patch)
            out.append(PatchPair(patch_id(r, c), image[ys, xs], mask[ys, xs]))
    return out


def reassemble(patches: list[PatchPair], grid_rows: int, grid_cols: int):
    """Inverse of :func:`tile_pair`; returns ``(image, mask)`` mosaics."""
    if grid_rows <= 0 or grid_cols <= 0:
        raise RasterError("grid dimensions must be positive")
    if not patches:
        raise RasterError("missing patch r0_c0")
    size = patches[0].mask.shape[0]
    seen: dict[tuple[int, int], PatchPair] = {}
    for p in patches:
        pos = parse_patch_id(p.patch_id)
        if pos in seen:
            raise RasterError(f"duplicate patch {p.patch_id}")
        if not (0 <= pos[0] < grid_rows and 0 <= pos[1] < grid_cols):
            raise RasterError(f"patch {p.patch_id} outside {grid_rows}x{grid_cols} grid")
        if p.image.shape != (size, size, 3) or p.mask.shape != (size, size):
            raise RasterError(f"patch {p.patch_id} has inconsistent size")
        seen[pos] = p
    image = np.empty((grid_rows * size, grid_cols * size, 3), np.uint8)
    mask = np.empty((grid_rows * size, grid_cols * size), np.uint8)
    for r in range(grid_rows):
        for c in range(grid_cols):
            p = seen.get((r, c))
            if p is None:
                raise RasterError(f"missing patch {patch_id(r, c)}")
            image[r * size:(r + 1) * size, c * size:(c + 1) * size] = p.image
            mask[r * size:(r + 1) * size, c * size:(c + 1) * size] = p.mask
    return image, mask


def patch_paths(directory, pid: str) -> tuple[Path, Path]:
    directory = Path(directory)
    return directory / f"{pid}_img.png", directory / f"{pid}_mask.png"


def write_patches(patches: list[PatchPair], directory) -> list[str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for p in patches:
        img_path, mask_path = patch_paths(directory, p.patch_id)
        save_image(img_path, np.ascontiguousarray(p.image))
        save_mask(mask_path, np.ascontiguousarray(p.mask))
    return [p.patch_id for p in patches]


def read_patch(directory, pid: str, num_classes: int | None = None) -> PatchPair:
    img_path, mask_path = patch_paths(directory, pid)
    return PatchPair(pid, load_image(img_path), load_mask(mask_path, num_classes))
