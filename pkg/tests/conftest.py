import numpy as np
import pytest

from colonmm.taxonomy import (
    BBox,
    DatasetManifest,
    ImageRecord,
    Polarity,
    Split,
    SplitPolicy,
    load_bundled_taxonomy,
)


@pytest.fixture(scope="session")
def taxonomy():
    return load_bundled_taxonomy()


def make_record(i, dataset="demo", category="polyp", polarity=Polarity.POSITIVE,
                bbox=None, split=Split.UNASSIGNED, width=640, height=480):
    return ImageRecord(
        image_id=f"img{i:05d}",
        dataset=dataset,
        rel_path=f"images/img{i:05d}.png",
        width=width,
        height=height,
        child_category=category,
        polarity=polarity,
        bbox=bbox,
        split=split,
    )


def make_manifest(records, dataset="demo", policy=SplitPolicy.PROPORTIONAL):
    return DatasetManifest(dataset=dataset, split_policy=policy, records=tuple(records))


def synthetic_manifest(n_pos=10, n_boxed=6, n_neg=4, dataset="demo", split=Split.VAL):
    """The 10 positives (6 boxed) / 4 negatives fixture -> 32 dialogues."""
    records = []
    for i in range(n_pos):
        bbox = BBox(10 + i, 20, 110 + i, 220) if i < n_boxed else None
        records.append(make_record(i, dataset=dataset, bbox=bbox, split=split))
    for i in range(n_pos, n_pos + n_neg):
        records.append(make_record(i, dataset=dataset, category="normal-mucosa",
                                   polarity=Polarity.NEGATIVE, split=split))
    return make_manifest(records, dataset=dataset, policy=SplitPolicy.PREDEFINED)


def rel_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-12, np.abs(a) + np.abs(b)))
