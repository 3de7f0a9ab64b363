"""
Deterministic synthetic aerial scenes: rotated, grid-textured PV panels over
a noisy ground plane, with panel-toned distractors (roofs, pools, roads)
that are never marked in the mask.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import orjson
from pydantic import BaseModel, Field, field_validator, model_validator

from pvseg.data.manifest import DatasetManifest, ManifestEntry, write_manifest
from pvseg.data.patches import ImagePatch, MaskPatch, make_pair, save_patch_pair
from pvseg.errors import ConfigError
from pvseg.utils.log import get_logger

logger = get_logger(__name__)

IntRange = tuple[int, int]
FloatRange = tuple[float, float]

# ground tones (RGB); roofs reuse the panel palette on purpose
GROUND_PALETTE = np.array(
    [[0.35, 0.42, 0.25], [0.45, 0.40, 0.32], [0.50, 0.50, 0.48], [0.30, 0.36, 0.22]],
    dtype=np.float64,
)
POOL_COLOR = np.array([0.25, 0.55, 0.75])
ROAD_COLOR = np.array([0.32, 0.32, 0.34])


class PanelGeometry(BaseModel):
    """Rectangle centred at ``(cx, cy)`` in pixel coordinates, rotated by ``angle_deg``."""

    cx: float
    cy: float
    width: float = Field(gt=0)
    height: float = Field(gt=0)
    angle_deg: float = 0.0

    def local_coords(self, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        theta = math.radians(self.angle_deg)
        cos, sin = math.cos(theta), math.sin(theta)
        dx, dy = xs - self.cx, ys - self.cy
        return dx * cos + dy * sin, -dx * sin + dy * cos

    def contains(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Boundary points count as inside."""
        u, v = self.local_coords(xs, ys)
        return (np.abs(u) <= self.width / 2) & (np.abs(v) <= self.height / 2)

    def rasterize(self, size: int) -> np.ndarray:
        """Pixels of a ``size`` x ``size`` grid whose centre lies in the rectangle."""
        ys, xs = pixel_centers(size)
        return self.contains(xs, ys)


def pixel_centers(size: int) -> tuple[np.ndarray, np.ndarray]:
    coords = np.arange(size, dtype=np.float64) + 0.5
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    return ys, xs


class SceneSpec(BaseModel):
    image_size: int = Field(64, ge=1)
    panel_count: IntRange = (1, 4)
    # panel extent in pixels before gsd_scale
    panel_width: FloatRange = (10.0, 20.0)
    panel_height: FloatRange = (5.0, 10.0)
    panel_albedo: FloatRange = (0.10, 0.40)
    grid_spacing: FloatRange = (2.5, 5.0)
    grid_contrast: float = Field(0.12, ge=0.0, le=1.0)
    rotation_deg: FloatRange = (0.0, 180.0)
    distractor_count: IntRange = (0, 3)
    noise_level: float = Field(0.02, ge=0.0)
    gsd_scale: float = Field(1.0, gt=0.0)
    seed: int = Field(0, ge=0)
    # explicit layout; replaces the random panels when set
    panels: list[PanelGeometry] | None = None

    @field_validator(
        "panel_count", "panel_width", "panel_height", "panel_albedo",
        "grid_spacing", "rotation_deg", "distractor_count",
    )
    @classmethod
    def _non_empty_range(cls, v, info):
        lo, hi = v
        if lo > hi:
            raise ValueError(f"{info.field_name} range is empty: {v}")
        if info.field_name in ("panel_count", "distractor_count") and lo < 0:
            raise ValueError(f"{info.field_name} must be non-negative: {v}")
        if info.field_name in ("panel_width", "panel_height", "grid_spacing") and lo < 1:
            raise ValueError(f"{info.field_name} sizes must be >= 1: {v}")
        if info.field_name == "panel_albedo" and not (0.0 <= lo and hi <= 1.0):
            raise ValueError(f"panel_albedo must lie in [0, 1]: {v}")
        return v

    @model_validator(mode="after")
    def _panels_fit(self):
        largest = max(self.panel_width[1], self.panel_height[1]) * self.gsd_scale
        if self.panel_count[1] > 0 and largest > self.image_size:
            raise ValueError(
                f"panels up to {largest:g} px do not fit a {self.image_size} px image"
            )
        for p in self.panels or []:
            if max(p.width, p.height) > self.image_size:
                raise ValueError(f"panel {p} is larger than the {self.image_size} px image")
        return self


@dataclass(frozen=True)
class SyntheticScene:
    index: int
    image: ImagePatch
    mask: MaskPatch
    panels: tuple[PanelGeometry, ...]


##############################################################################
# rendering
##############################################################################
def _uniform(rng: np.random.Generator, bounds: FloatRange) -> float:
    return float(rng.uniform(bounds[0], bounds[1])) if bounds[0] < bounds[1] else float(bounds[0])


def _integers(rng: np.random.Generator, bounds: IntRange) -> int:
    return int(rng.integers(bounds[0], bounds[1] + 1))


def _panel_color(rng: np.random.Generator, albedo: float) -> np.ndarray:
    # dark blue-grey, tint varies per panel
    tint = rng.uniform(0.85, 1.15, size=3) * np.array([0.75, 0.85, 1.2])
    return np.clip(albedo * tint, 0.0, 1.0)


def _sample_panel(rng: np.random.Generator, spec: SceneSpec) -> PanelGeometry:
    width = _uniform(rng, spec.panel_width) * spec.gsd_scale
    height = _uniform(rng, spec.panel_height) * spec.gsd_scale
    radius = math.hypot(width, height) / 2
    size = spec.image_size
    lo, hi = min(radius, size / 2), max(size - radius, size / 2)
    return PanelGeometry(
        cx=_uniform(rng, (lo, hi)),
        cy=_uniform(rng, (lo, hi)),
        width=width,
        height=height,
        angle_deg=_uniform(rng, spec.rotation_deg),
    )


def _draw_distractor(
    rng: np.random.Generator, spec: SceneSpec, canvas: np.ndarray, ys: np.ndarray, xs: np.ndarray
) -> None:
    size = spec.image_size
    kind = rng.integers(0, 3)
    if kind == 0:
        # roof in a panel-like tone
        roof = PanelGeometry(
            cx=rng.uniform(0, size),
            cy=rng.uniform(0, size),
            width=rng.uniform(0.2, 0.5) * size,
            height=rng.uniform(0.15, 0.4) * size,
            angle_deg=rng.uniform(0, 180),
        )
        canvas[roof.contains(xs, ys)] = _panel_color(rng, _uniform(rng, spec.panel_albedo))
    elif kind == 1:
        cx, cy = rng.uniform(0, size, size=2)
        rx, ry = rng.uniform(0.05, 0.15, size=2) * size
        pool = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
        canvas[pool] = POOL_COLOR * rng.uniform(0.8, 1.1)
    else:
        road = PanelGeometry(
            cx=rng.uniform(0, size),
            cy=rng.uniform(0, size),
            width=3.0 * size,
            height=rng.uniform(0.06, 0.15) * size,
            angle_deg=rng.uniform(0, 180),
        )
        canvas[road.contains(xs, ys)] = ROAD_COLOR * rng.uniform(0.8, 1.2)


def _draw_panel(
    rng: np.random.Generator,
    spec: SceneSpec,
    panel: PanelGeometry,
    canvas: np.ndarray,
    ys: np.ndarray,
    xs: np.ndarray,
) -> np.ndarray:
    inside = panel.contains(xs, ys)
    color = _panel_color(rng, _uniform(rng, spec.panel_albedo))
    spacing = _uniform(rng, spec.grid_spacing)
    u, v = panel.local_coords(xs, ys)
    grid = (np.mod(u, spacing) < 1.0) | (np.mod(v, spacing) < 1.0)
    canvas[inside] = color
    canvas[inside & grid] = np.clip(color + spec.grid_contrast, 0.0, 1.0)
    return inside


def generate_scene(spec: SceneSpec, index: int) -> SyntheticScene:
    """Scene ``index`` of ``spec``; depends only on ``(spec, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    ys, xs = pixel_centers(size)

    ground = GROUND_PALETTE[rng.integers(0, len(GROUND_PALETTE))]
    canvas = np.broadcast_to(ground, (size, size, 3)).copy()

    for _ in range(_integers(rng, spec.distractor_count)):
        _draw_distractor(rng, spec, canvas, ys, xs)

    if spec.panels is not None:
        panels = tuple(spec.panels)
    else:
        panels = tuple(_sample_panel(rng, spec) for _ in range(_integers(rng, spec.panel_count)))
    mask = np.zeros((size, size), dtype=np.uint8)
    for panel in panels:
        mask[_draw_panel(rng, spec, panel, canvas, ys, xs)] = 1

    if spec.noise_level > 0:
        canvas += rng.normal(0.0, spec.noise_level, size=canvas.shape)
    # quantize to 8 bits so the PNG round trip is exact
    pixels = np.round(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)
    image, mask_patch = make_pair(pixels.astype(np.float32) / np.float32(255.0), mask)
    return SyntheticScene(index=index, image=image, mask=mask_patch, panels=panels)


def generate_scenes(spec: SceneSpec, count: int) -> list[SyntheticScene]:
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    return [generate_scene(spec, i) for i in range(count)]


def generate(spec: SceneSpec, count: int) -> list[tuple[ImagePatch, MaskPatch]]:
    return [(s.image, s.mask) for s in generate_scenes(spec, count)]


def write_dataset(spec: SceneSpec, count: int, out_dir: str | Path) -> DatasetManifest:
    """
    Writes ``images/``, ``masks/``, ``manifest.jsonl`` and ``panels.jsonl``
    (recorded geometry per scene) under ``out_dir``.
    """
    out_dir = Path(out_dir)
    entries = []
    panel_lines = []
    for scene in generate_scenes(spec, count):
        name = f"scene_{scene.index:05d}.png"
        save_patch_pair(scene.image, scene.mask, out_dir / "images" / name, out_dir / "masks" / name)
        entries.append(
            ManifestEntry(image=f"images/{name}", mask=f"masks/{name}", has_pv=scene.mask.has_pv)
        )
        panel_lines.append(
            orjson.dumps(
                {"image": f"images/{name}", "panels": [p.model_dump() for p in scene.panels]}
            )
        )
    manifest = DatasetManifest(root=out_dir, entries=entries)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    (out_dir / "panels.jsonl").write_bytes(b"\n".join(panel_lines) + b"\n")
    positives = sum(e.has_pv for e in entries)
    logger.info(f"Generated {count} scenes in {out_dir} ({positives} with PV)")
    return manifest
