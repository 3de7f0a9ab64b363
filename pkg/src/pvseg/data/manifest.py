import math
from enum import Enum
from pathlib import Path

import numpy as np
import orjson
from pydantic import BaseModel, Field, model_validator

from pvseg.data.patches import read_mask
from pvseg.errors import ManifestError
from pvseg.utils.log import get_logger

logger = get_logger(__name__)


class Split(str, Enum):
    train = "train"
    val = "val"
    test = "test"
    unassigned = "unassigned"


# order matters: largest-remainder ties resolve toward the earlier split
SPLIT_ORDER = (Split.train, Split.val, Split.test)


class ManifestEntry(BaseModel):
    image: str
    mask: str
    has_pv: bool
    split: Split = Split.unassigned


class DatasetManifest(BaseModel):
    """Entries with paths relative to ``root``."""

    root: Path = Field(default_factory=Path)
    entries: list[ManifestEntry] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def by_split(self, split: Split | str) -> list[ManifestEntry]:
        split = Split(split)
        return [e for e in self.entries if e.split == split]

    def split_counts(self) -> dict[str, int]:
        counts = {s.value: 0 for s in Split}
        for e in self.entries:
            counts[e.split.value] += 1
        return counts

    def resolve(self, entry: ManifestEntry) -> tuple[Path, Path]:
        return self.root / entry.image, self.root / entry.mask


class SplitSpec(BaseModel):
    train_frac: float = Field(0.6, gt=0.0, lt=1.0)
    val_frac: float = Field(0.2, gt=0.0, lt=1.0)
    test_frac: float = Field(0.2, gt=0.0, lt=1.0)
    stratify_positive: bool = True
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _fractions_sum_to_one(self):
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {total}")
        return self

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_frac, self.val_frac, self.test_frac)


##############################################################################
# JSON Lines I/O
##############################################################################
def read_manifest(path: str | Path, root: str | Path | None = None) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    entries = []
    with open(path, "rb") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry.model_validate(orjson.loads(line)))
            except (orjson.JSONDecodeError, ValueError) as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from e
    return DatasetManifest(root=Path(root) if root else path.parent, entries=entries)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        for entry in manifest.entries:
            f.write(orjson.dumps(entry.model_dump(mode="json")))
            f.write(b"\n")


def validate_manifest(manifest: DatasetManifest, check_masks: bool = True) -> list[str]:
    """Returns a list of problems; empty means the manifest is consistent."""
    problems = []
    seen: dict[str, str] = {}
    for entry in manifest.entries:
        if entry.image in seen and seen[entry.image] != entry.mask:
            problems.append(f"{entry.image}: paired with more than one mask")
        seen[entry.image] = entry.mask
        image_path, mask_path = manifest.resolve(entry)
        if not image_path.exists():
            problems.append(f"{entry.image}: image file missing")
        if not mask_path.exists():
            problems.append(f"{entry.mask}: mask file missing")
            continue
        if check_masks:
            try:
                has_pv = bool(read_mask(mask_path).any())
            except (ValueError, OSError) as e:
                problems.append(f"{entry.mask}: {e}")
                continue
            if has_pv != entry.has_pv:
                problems.append(
                    f"{entry.image}: has_pv={entry.has_pv} but mask says {has_pv}"
                )
    return problems


##############################################################################
# stratified splitting
##############################################################################
def largest_remainder_counts(n: int, fractions: tuple[float, ...]) -> list[int]:
    """Integer counts summing to ``n``; leftovers go to the largest fractional parts."""
    quotas = [round(n * f, 9) for f in fractions]
    counts = [math.floor(q) for q in quotas]
    leftover = n - sum(counts)
    order = sorted(
        range(len(fractions)),
        key=lambda i: (-(quotas[i] - counts[i]), -fractions[i], i),
    )
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def split_dataset(manifest: DatasetManifest, spec: SplitSpec) -> DatasetManifest:
    """
    Assigns train/val/test per stratum (has_pv) with largest-remainder rounding.

    Membership depends only on entry identity (image path) and ``spec.seed``,
    so the input order and any previous assignment do not matter.
    """
    if len(manifest) == 0:
        raise ManifestError("cannot split an empty manifest")

    if spec.stratify_positive:
        strata = {
            "positive": [i for i, e in enumerate(manifest.entries) if e.has_pv],
            "negative": [i for i, e in enumerate(manifest.entries) if not e.has_pv],
        }
    else:
        strata = {"all": list(range(len(manifest)))}

    assignment: dict[int, Split] = {}
    for stratum_idx, (name, indices) in enumerate(strata.items()):
        if not indices:
            continue
        nonzero_splits = sum(f > 0 for f in spec.fractions)
        if len(indices) < nonzero_splits:
            logger.warning(
                f"Stratum '{name}' has {len(indices)} entries for {nonzero_splits} splits; "
                "some splits receive none"
            )
        # canonical order by identity, then a seeded shuffle per stratum
        indices = sorted(indices, key=lambda i: manifest.entries[i].image)
        rng = np.random.default_rng([spec.seed, stratum_idx])
        shuffled = [indices[j] for j in rng.permutation(len(indices))]

        counts = largest_remainder_counts(len(shuffled), spec.fractions)
        start = 0
        for split, count in zip(SPLIT_ORDER, counts):
            for i in shuffled[start : start + count]:
                assignment[i] = split
            start += count
        logger.info(
            f"Stratum '{name}': "
            + ", ".join(f"{s.value}={c}" for s, c in zip(SPLIT_ORDER, counts))
        )

    entries = [
        e.model_copy(update={"split": assignment[i]})
        for i, e in enumerate(manifest.entries)
    ]
    return DatasetManifest(root=manifest.root, entries=entries)
