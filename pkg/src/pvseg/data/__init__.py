from pvseg.data.patches import (
    DEFAULT_PATCH_SIZE,
    ImagePatch,
    MaskPatch,
    load_patch_pair,
    make_pair,
    read_image,
    read_mask,
    save_patch_pair,
)
from pvseg.data.manifest import (
    DatasetManifest,
    ManifestEntry,
    Split,
    SplitSpec,
    read_manifest,
    split_dataset,
    validate_manifest,
    write_manifest,
)
from pvseg.data.tiling import tile_directory, tile_files, tile_offsets, tile_raster

__all__ = [
    "DEFAULT_PATCH_SIZE",
    "ImagePatch",
    "MaskPatch",
    "load_patch_pair",
    "make_pair",
    "read_image",
    "read_mask",
    "save_patch_pair",
    "DatasetManifest",
    "ManifestEntry",
    "Split",
    "SplitSpec",
    "read_manifest",
    "split_dataset",
    "validate_manifest",
    "write_manifest",
    "tile_directory",
    "tile_files",
    "tile_offsets",
    "tile_raster",
]
