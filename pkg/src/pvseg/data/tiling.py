from pathlib import Path

import numpy as np

from pvseg.data.patches import (
    ImagePatch,
    MaskPatch,
    make_pair,
    read_image,
    read_mask,
    save_patch_pair,
)
from pvseg.data.manifest import DatasetManifest, ManifestEntry
from pvseg.errors import ConfigError, ShapeMismatchError
from pvseg.utils.log import get_logger

logger = get_logger(__name__)


def tile_offsets(
    height: int, width: int, patch_size: int, stride: int
) -> list[tuple[int, int]]:
    """
    Top-left ``(x, y)`` corners of every full patch, in row-major order.
    Trailing remainders smaller than ``patch_size`` are dropped.
    """
    if patch_size < 1 or stride < 1:
        raise ConfigError(f"patch_size and stride must be >= 1, got {patch_size}, {stride}")
    if height < patch_size or width < patch_size:
        raise ShapeMismatchError(
            f"raster {height}x{width} is smaller than patch size {patch_size}"
        )
    ys = range(0, height - patch_size + 1, stride)
    xs = range(0, width - patch_size + 1, stride)
    return [(x, y) for y in ys for x in xs]


def tile_raster(
    image: np.ndarray, mask: np.ndarray, patch_size: int, stride: int
) -> list[tuple[ImagePatch, MaskPatch]]:
    """
    Cuts a raster (``image`` (H, W, 3) in [0, 1], ``mask`` (H, W) binary)
    into co-located patch pairs following :func:`tile_offsets`.
    """
    if image.ndim != 3 or mask.ndim != 2 or image.shape[:2] != mask.shape:
        raise ShapeMismatchError(
            f"raster/mask shape mismatch: image {tuple(image.shape)}, mask {tuple(mask.shape)}"
        )
    height, width = mask.shape
    pairs = []
    for x, y in tile_offsets(height, width, patch_size, stride):
        pairs.append(
            make_pair(
                image[y : y + patch_size, x : x + patch_size],
                mask[y : y + patch_size, x : x + patch_size],
            )
        )
    return pairs


def tile_files(
    image_path: str | Path,
    mask_path: str | Path,
    out_dir: str | Path,
    patch_size: int,
    stride: int,
) -> list[ManifestEntry]:
    """Tiles one raster pair on disk, writes PNG patches under ``out_dir``."""
    image_path, mask_path, out_dir = Path(image_path), Path(mask_path), Path(out_dir)
    image = read_image(image_path)
    mask = read_mask(mask_path)
    if image.shape[:2] != mask.shape:
        raise ShapeMismatchError(
            f"{image_path} is {image.shape[0]}x{image.shape[1]} but "
            f"{mask_path} is {mask.shape[0]}x{mask.shape[1]}"
        )
    offsets = tile_offsets(mask.shape[0], mask.shape[1], patch_size, stride)
    pairs = tile_raster(image, mask, patch_size, stride)

    entries = []
    for (x, y), (image_patch, mask_patch) in zip(offsets, pairs):
        name = f"{image_path.stem}_y{y:05d}_x{x:05d}.png"
        rel_image = Path("images") / name
        rel_mask = Path("masks") / name
        save_patch_pair(image_patch, mask_patch, out_dir / rel_image, out_dir / rel_mask)
        entries.append(
            ManifestEntry(
                image=rel_image.as_posix(),
                mask=rel_mask.as_posix(),
                has_pv=mask_patch.has_pv,
            )
        )
    logger.info(
        f"Tiled {image_path.name} ({mask.shape[0]}x{mask.shape[1]}) into {len(entries)} patches"
    )
    return entries


def tile_directory(
    raster_dir: str | Path,
    mask_dir: str | Path,
    out_dir: str | Path,
    patch_size: int,
    stride: int,
) -> DatasetManifest:
    """Tiles every ``*.png`` raster in ``raster_dir`` against the same-named mask."""
    raster_dir, mask_dir, out_dir = Path(raster_dir), Path(mask_dir), Path(out_dir)
    entries = []
    for image_path in sorted(raster_dir.glob("*.png")):
        mask_path = mask_dir / image_path.name
        entries.extend(tile_files(image_path, mask_path, out_dir, patch_size, stride))
    return DatasetManifest(root=out_dir, entries=entries)
