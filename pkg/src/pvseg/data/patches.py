from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from pvseg.errors import ChannelMismatchError, ShapeMismatchError, UnreadableFileError

DEFAULT_PATCH_SIZE = 400
# 8-bit masks: strictly above the midpoint counts as PV
MASK_THRESHOLD = 127

IMAGE_MODES = ("RGB",)
MASK_MODES = ("L", "1", "P")


##############################################################################
# patch value types
##############################################################################
@dataclass(frozen=True)
class ImagePatch:
    """RGB patch, ``data`` is (H, W, 3) float32 in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ChannelMismatchError(
                f"image patch must be (H, W, 3), got {tuple(self.data.shape)}"
            )
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("image patch values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.data.transpose(2, 0, 1))

    def to_uint8(self) -> np.ndarray:
        return np.round(self.data * 255.0).astype(np.uint8)


@dataclass(frozen=True)
class MaskPatch:
    """Binary annotation, ``data`` is (H, W) uint8 with 0 = background, 1 = PV."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ChannelMismatchError(
                f"mask patch must be (H, W), got {tuple(self.data.shape)}"
            )
        if not np.isin(self.data, (0, 1)).all():
            raise ValueError("mask patch values must be 0 or 1")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def has_pv(self) -> bool:
        return bool(self.data.any())

    def to_uint8(self) -> np.ndarray:
        return (self.data * 255).astype(np.uint8)


def make_pair(
    image: np.ndarray, mask: np.ndarray, patch_size: int | None = None
) -> tuple[ImagePatch, MaskPatch]:
    image_patch = ImagePatch(np.ascontiguousarray(image, dtype=np.float32))
    mask_patch = MaskPatch(np.ascontiguousarray(mask, dtype=np.uint8))
    check_pair_shape(image_patch, mask_patch, patch_size)
    return image_patch, mask_patch


def check_pair_shape(
    image: ImagePatch, mask: MaskPatch, patch_size: int | None = None
) -> None:
    if (image.height, image.width) != (mask.height, mask.width):
        raise ShapeMismatchError(
            f"image is {image.height}x{image.width} but mask is {mask.height}x{mask.width}"
        )
    if patch_size is not None and not (image.height == image.width == patch_size):
        raise ShapeMismatchError(
            f"expected {patch_size}x{patch_size} patch, got {image.height}x{image.width}"
        )


##############################################################################
# PNG I/O
##############################################################################
def _open(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, UnidentifiedImageError) as e:
        raise UnreadableFileError(f"cannot read {path}: {e}") from e
    return img


def read_image(path: str | Path) -> np.ndarray:
    """Reads a 3-channel image, returns (H, W, 3) float32 scaled by 1/255."""
    img = _open(Path(path))
    if img.mode not in IMAGE_MODES:
        raise ChannelMismatchError(
            f"{path}: expected a 3-channel RGB image, got mode {img.mode!r}"
        )
    return np.asarray(img, dtype=np.float32) / np.float32(255.0)


def read_mask(path: str | Path) -> np.ndarray:
    """Reads a single-channel mask, returns (H, W) uint8 thresholded at >127."""
    img = _open(Path(path))
    if img.mode not in MASK_MODES:
        raise ChannelMismatchError(
            f"{path}: expected a single-channel mask, got mode {img.mode!r}"
        )
    if img.mode == "1":
        img = img.convert("L")
    values = np.asarray(img)
    if img.mode == "P":
        # palette masks store class indices directly
        return (values > 0).astype(np.uint8)
    return (values > MASK_THRESHOLD).astype(np.uint8)


def load_patch_pair(
    image_path: str | Path, mask_path: str | Path, patch_size: int | None = None
) -> tuple[ImagePatch, MaskPatch]:
    image = read_image(image_path)
    mask = read_mask(mask_path)
    if image.shape[:2] != mask.shape:
        raise ShapeMismatchError(
            f"{image_path} is {image.shape[0]}x{image.shape[1]} but "
            f"{mask_path} is {mask.shape[0]}x{mask.shape[1]}"
        )
    return make_pair(image, mask, patch_size)


def save_patch_pair(
    image: ImagePatch,
    mask: MaskPatch,
    image_path: str | Path,
    mask_path: str | Path,
) -> None:
    image_path, mask_path = Path(image_path), Path(mask_path)
    image_path.parent.mkdir(parents=True, exist_ok=True)
    mask_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image.to_uint8()).save(image_path)
    Image.fromarray(mask.to_uint8()).save(mask_path)
