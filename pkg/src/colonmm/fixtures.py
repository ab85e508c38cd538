"""Synthetic desk-scale stand-in for the real image sources.

Each positive image is a coloured elliptical blob on a textured background;
the blob hue encodes the child category (so a small model can actually learn
the classification mapping) and the blob's tight pixel bounding box is the
gold box. Negatives are texture only. Everything is a pure function of the
seed; re-running produces byte-identical files.
"""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import UsageError
from .taxonomy import (
    BBox,
    CategoryNode,
    DatasetManifest,
    ImageRecord,
    Level,
    Split,
    SplitPolicy,
    Taxonomy,
    assign_splits,
    round_half_away_from_zero,
    write_manifests,
    write_taxonomy,
)

FIXTURE_DATASET = "synthfix"
NEGATIVE_CATEGORY = "clean-background"
SPLIT_PLANS = ("proportional", "overfit")
# The overfit plan keeps most records in validation (the "seen" bench) and
# cycles a quarter into test so the unseen bench is never empty.
_OVERFIT_CYCLE = (Split.VAL, Split.VAL, Split.VAL, Split.TEST)


def fixture_taxonomy_nodes(n_categories: int) -> list[CategoryNode]:
    if n_categories < 2:
        raise UsageError("fixture taxonomy needs at least 2 positive categories")
    nodes = [
        CategoryNode(id="findings", name="findings", level=Level.ROOT),
        CategoryNode(id="synthetic-lesions", name="synthetic lesions", level=Level.PARENT,
                     parent_id="findings"),
        CategoryNode(id="negative", name="negative", level=Level.ROOT),
        CategoryNode(id="background-views", name="background views", level=Level.PARENT,
                     parent_id="negative"),
        CategoryNode(id=NEGATIVE_CATEGORY, name="clean background", level=Level.CHILD,
                     parent_id="background-views"),
    ]
    for i in range(n_categories):
        nodes.append(CategoryNode(
            id=f"lesion-{i:02d}", name=f"lesion {i:02d}", level=Level.CHILD,
            parent_id="synthetic-lesions",
        ))
    return nodes


def category_color(index: int, n_categories: int) -> np.ndarray:
    """Saturated hue wheel; distinct per category."""
    r, g, b = colorsys.hsv_to_rgb(index / n_categories, 0.9, 0.95)
    return np.array([r, g, b]) * 255.0


def _render_image(rng: np.random.Generator, size: int, blob_color: np.ndarray | None):
    """Textured background plus an optional elliptical blob; returns the
    uint8 image and the blob's tight bbox."""
    base = rng.uniform(55.0, 95.0)
    image = base + rng.uniform(-18.0, 18.0, size=(size, size, 3))
    bbox = None
    if blob_color is not None:
        margin = size // 6
        cx = rng.uniform(margin + 4, size - margin - 4)
        cy = rng.uniform(margin + 4, size - margin - 4)
        rx = rng.uniform(size / 10, size / 4)
        ry = rng.uniform(size / 10, size / 4)
        ys, xs = np.mgrid[0:size, 0:size]
        mask = ((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2 <= 1.0
        jitter = rng.uniform(-10.0, 10.0, size=(size, size, 3))
        image[mask] = np.clip(blob_color + jitter, 0, 255)[mask]
        cols = np.nonzero(mask.any(axis=0))[0]
        rows = np.nonzero(mask.any(axis=1))[0]
        bbox = BBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))
    return np.clip(image, 0, 255).astype(np.uint8), bbox


def generate_fixture(
    seed: int,
    n_images: int,
    n_categories: int,
    boxed_fraction: float,
    out_dir,
    image_size: int = 56,
    negative_fraction: float = 0.0,
    split_plan: str = "proportional",
) -> tuple[list[DatasetManifest], Taxonomy]:
    """Write images/, manifest.jsonl, and taxonomy.json under ``out_dir``."""
    if n_categories < 2:
        raise UsageError("n_categories must be at least 2")
    if not (0.0 <= boxed_fraction <= 1.0):
        raise UsageError("boxed_fraction must lie in [0, 1]")
    if not (0.0 <= negative_fraction < 1.0):
        raise UsageError("negative_fraction must lie in [0, 1)")
    if split_plan not in SPLIT_PLANS:
        raise UsageError(f"split plan must be one of {SPLIT_PLANS}")
    if n_images < 1:
        raise UsageError("n_images must be positive")

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    nodes = fixture_taxonomy_nodes(n_categories)
    taxonomy = Taxonomy(nodes)
    write_taxonomy(nodes, out_dir / "taxonomy.json")

    rng = np.random.default_rng(seed)
    n_negative = round_half_away_from_zero(n_images * negative_fraction)
    n_positive = n_images - n_negative
    n_boxed = round_half_away_from_zero(n_positive * boxed_fraction)
    negative_at = set(rng.choice(n_images, size=n_negative, replace=False).tolist()) if n_negative else set()
    # Boxed positives are spread evenly across the positive sequence so that
    # any split plan sees boxed records in more than one split.
    boxed_at = {(j * n_positive) // n_boxed for j in range(n_boxed)} if n_boxed else set()

    records = []
    positive_index = 0
    negative_index = 0
    for i in range(n_images):
        image_id = f"img{i:05d}"
        rel_path = f"images/{image_id}.png"
        if i in negative_at:
            category = NEGATIVE_CATEGORY
            pixels, _ = _render_image(rng, image_size, None)
            bbox = None
            split = _OVERFIT_CYCLE[negative_index % len(_OVERFIT_CYCLE)]
            negative_index += 1
        else:
            cat_index = int(rng.integers(n_categories))
            category = f"lesion-{cat_index:02d}"
            pixels, blob_box = _render_image(rng, image_size, category_color(cat_index, n_categories))
            bbox = blob_box if positive_index in boxed_at else None
            split = _OVERFIT_CYCLE[positive_index % len(_OVERFIT_CYCLE)]
            positive_index += 1
        Image.fromarray(pixels).save(out_dir / rel_path)
        records.append(ImageRecord(
            image_id=image_id,
            dataset=FIXTURE_DATASET,
            rel_path=rel_path,
            width=image_size,
            height=image_size,
            child_category=category,
            polarity=taxonomy.polarity_of(category),
            bbox=bbox,
            split=split if split_plan == "overfit" else Split.UNASSIGNED,
        ))

    if split_plan == "overfit":
        manifest = DatasetManifest(FIXTURE_DATASET, SplitPolicy.PREDEFINED, tuple(records))
    else:
        manifest = DatasetManifest(FIXTURE_DATASET, SplitPolicy.PROPORTIONAL, tuple(records))
        manifest = assign_splits(manifest, seed)
    write_manifests([manifest], out_dir / "manifest.jsonl")
    return [manifest], taxonomy


def load_image(path) -> np.ndarray:
    """PNG -> float64 RGB array in [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
