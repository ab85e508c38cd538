"""Category hierarchy, per-image annotations, dataset manifests, and the
bounding-box text codec.

The category tree is a three-level forest (root -> parent -> child). Image
records reference a child category; their polarity (positive/negative) is
derived from the root ancestor. Splits are either predefined by the source
dataset or assigned proportionally (60/10/30) by a keyed hash, stratified
per child category.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .errors import DataError, ParseError

PROPORTIONAL_FRACTIONS = (0.60, 0.10, 0.30)
PERMILLE_GRID = 999


def normalize_name(text: str) -> str:
    """Lowercase, trim, and collapse internal whitespace."""
    return re.sub(r"\s+", " ", text.strip()).lower()


def round_half_away_from_zero(x: float) -> int:
    """Platform-independent rounding: halves move away from zero."""
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def keyed_hash(*parts: object) -> str:
    """Deterministic hex digest of an ordered tuple of primitives."""
    canon = json.dumps([str(p) for p in parts], separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


class Level(str, Enum):
    ROOT = "root"
    PARENT = "parent"
    CHILD = "child"


class Polarity(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    UNASSIGNED = "unassigned"


ASSIGNED_SPLITS = (Split.TRAIN, Split.VAL, Split.TEST)


class SplitPolicy(str, Enum):
    PREDEFINED = "predefined"
    PROPORTIONAL = "proportional"


@dataclass(frozen=True)
class CategoryNode:
    id: str
    name: str
    level: Level
    parent_id: str | None = None


@dataclass(frozen=True)
class TaxonomyReport:
    ok: bool
    violations: tuple[str, ...]
    counts: tuple[int, int, int]  # nodes per level: (root, parent, child)


def validate_taxonomy(nodes: Sequence[CategoryNode]) -> TaxonomyReport:
    """Enumerate every forest-invariant violation; violations are data, not
    failures."""
    violations: list[str] = []
    by_id: dict[str, CategoryNode] = {}
    for node in nodes:
        if node.id in by_id:
            violations.append(f"duplicate node id '{node.id}'")
        by_id[node.id] = node

    seen_names: dict[tuple[Level, str], str] = {}
    for node in nodes:
        key = (node.level, normalize_name(node.name))
        if key in seen_names and seen_names[key] != node.id:
            violations.append(
                f"duplicate {node.level.value} name '{node.name}' "
                f"(normalized collision with node '{seen_names[key]}')"
            )
        else:
            seen_names[key] = node.id

    for node in nodes:
        if node.level is Level.ROOT:
            if node.parent_id is not None:
                violations.append(f"root '{node.id}' has a parent_id")
            continue
        if node.parent_id is None:
            violations.append(f"{node.level.value} '{node.id}' lacks a parent_id")
            continue
        parent = by_id.get(node.parent_id)
        if parent is None:
            violations.append(
                f"{node.level.value} '{node.id}' references unknown parent "
                f"'{node.parent_id}'"
            )
            continue
        if node.level is Level.PARENT and parent.level is not Level.ROOT:
            violations.append(
                f"parent '{node.id}' attached to {parent.level.value} '{parent.id}'"
            )
        if node.level is Level.CHILD and parent.level is not Level.PARENT:
            violations.append(
                f"child '{node.id}' attached to {parent.level.value} '{parent.id}'"
            )

    counts = (
        sum(1 for n in nodes if n.level is Level.ROOT),
        sum(1 for n in nodes if n.level is Level.PARENT),
        sum(1 for n in nodes if n.level is Level.CHILD),
    )
    return TaxonomyReport(ok=not violations, violations=tuple(violations), counts=counts)


class Taxonomy:
    """Indexed view over a validated category forest."""

    def __init__(self, nodes: Sequence[CategoryNode], negative_root_names: Sequence[str] = ("negative",)):
        report = validate_taxonomy(nodes)
        if not report.ok:
            raise DataError("invalid taxonomy: " + "; ".join(report.violations))
        self.nodes = tuple(nodes)
        self.by_id = {n.id: n for n in nodes}
        self._by_level_name = {
            (n.level, normalize_name(n.name)): n for n in nodes
        }
        negative = {normalize_name(n) for n in negative_root_names}
        self.negative_root_ids = frozenset(
            n.id for n in nodes
            if n.level is Level.ROOT and normalize_name(n.name) in negative
        )

    def node(self, node_id: str) -> CategoryNode:
        try:
            return self.by_id[node_id]
        except KeyError:
            raise DataError(f"unknown category id '{node_id}'") from None

    def child_by_name(self, name: str) -> CategoryNode:
        node = self._by_level_name.get((Level.CHILD, normalize_name(name)))
        if node is None:
            raise DataError(f"unknown child category name '{name}'")
        return node

    def root_of(self, node_id: str) -> CategoryNode:
        node = self.node(node_id)
        while node.parent_id is not None:
            node = self.node(node.parent_id)
        return node

    def polarity_of(self, child_id: str) -> Polarity:
        root = self.root_of(child_id)
        return Polarity.NEGATIVE if root.id in self.negative_root_ids else Polarity.POSITIVE

    def validate(self) -> TaxonomyReport:
        return validate_taxonomy(self.nodes)


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def validate(self, width: float, height: float) -> None:
        if not (0 <= self.x1 < self.x2 <= width and 0 <= self.y1 < self.y2 <= height):
            raise DataError(
                f"box ({self.x1}, {self.y1}, {self.x2}, {self.y2}) violates "
                f"bounds for a {width}x{height} image"
            )

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    dataset: str
    rel_path: str
    width: int
    height: int
    child_category: str  # CategoryNode id at level child
    polarity: Polarity
    bbox: BBox | None = None
    split: Split = Split.UNASSIGNED

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"record '{self.image_id}': non-positive dimensions")
        if self.polarity is Polarity.NEGATIVE and self.bbox is not None:
            raise DataError(f"record '{self.image_id}': negative record carries a bbox")
        if self.bbox is not None:
            self.bbox.validate(self.width, self.height)

    @property
    def boxed(self) -> bool:
        return self.bbox is not None


@dataclass(frozen=True)
class DatasetManifest:
    dataset: str
    split_policy: SplitPolicy
    records: tuple[ImageRecord, ...]

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.dataset != self.dataset:
                raise DataError(
                    f"record '{r.image_id}' belongs to dataset '{r.dataset}', "
                    f"not '{self.dataset}'"
                )
            if r.image_id in seen:
                raise DataError(f"duplicate image_id '{r.image_id}' in '{self.dataset}'")
            seen.add(r.image_id)
        if self.split_policy is SplitPolicy.PREDEFINED:
            for r in self.records:
                if r.split not in ASSIGNED_SPLITS:
                    raise DataError(
                        f"predefined manifest '{self.dataset}' has unassigned "
                        f"record '{r.image_id}'"
                    )


def assign_splits(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Assign train/val/test splits.

    Predefined manifests pass through unchanged. Proportional manifests are
    stratified per child category: records are ordered by a keyed hash of
    (seed, dataset, image_id) and cut at floor(0.6n) / floor(0.7n). Pure in
    (manifest, seed); re-assignment overwrites prior splits.
    """
    if manifest.split_policy is SplitPolicy.PREDEFINED:
        return manifest

    groups: dict[str, list[ImageRecord]] = {}
    for record in manifest.records:
        groups.setdefault(record.child_category, []).append(record)

    assigned: list[ImageRecord] = []
    for category in sorted(groups):
        records = sorted(
            groups[category],
            key=lambda r: (keyed_hash(seed, r.dataset, r.image_id), r.image_id),
        )
        n = len(records)
        train_cut = math.floor(0.6 * n)
        val_cut = math.floor(0.7 * n)
        for i, record in enumerate(records):
            split = Split.TRAIN if i < train_cut else Split.VAL if i < val_cut else Split.TEST
            assigned.append(replace(record, split=split))

    assigned.sort(key=lambda r: r.image_id)
    return replace(manifest, records=tuple(assigned))


@dataclass(frozen=True)
class SplitCounts:
    images: int = 0
    positives: int = 0
    negatives: int = 0
    boxed_positives: int = 0

    def __post_init__(self):
        if self.images != self.positives + self.negatives:
            raise DataError("split counts: images != positives + negatives")
        if self.boxed_positives > self.positives:
            raise DataError("split counts: more boxed positives than positives")


# Full-scale corpus statistics: images per split broken down by polarity and
# box availability. Dialogue counts follow from the counting rule
# (CLS = CAP = positives, REG = REC = boxed positives).
FULL_SCALE_SPLIT_COUNTS: Mapping[str, SplitCounts] = {
    "train": SplitCounts(images=180_977, positives=74_407, negatives=106_570, boxed_positives=54_237),
    "val": SplitCounts(images=26_257, positives=8_929, negatives=17_328, boxed_positives=4_874),
    "test": SplitCounts(images=95_767, positives=45_284, negatives=50_483, boxed_positives=37_631),
}

TASKS = ("CLS", "REG", "REC", "CAP")


@dataclass(frozen=True)
class CountSummary:
    """Image and dialogue counts, overall and per split.

    The dialogue counting rule: every positive image yields one CLS and one
    CAP dialogue; every boxed positive additionally yields one REG and one
    REC dialogue. Negatives yield none.
    """

    per_split: Mapping[str, SplitCounts] = field(default_factory=dict)

    @property
    def images_total(self) -> int:
        return sum(c.images for c in self.per_split.values())

    @property
    def positives(self) -> int:
        return sum(c.positives for c in self.per_split.values())

    @property
    def negatives(self) -> int:
        return sum(c.negatives for c in self.per_split.values())

    @property
    def boxed_positives(self) -> int:
        return sum(c.boxed_positives for c in self.per_split.values())

    def images_in(self, split: str) -> int:
        return self.per_split.get(split, SplitCounts()).images

    def dialogues_for_split(self, split: str) -> dict[str, int]:
        c = self.per_split.get(split, SplitCounts())
        return {
            "CLS": c.positives,
            "REG": c.boxed_positives,
            "REC": c.boxed_positives,
            "CAP": c.positives,
        }

    @property
    def dialogue_counts(self) -> dict[str, int]:
        return {
            "CLS": self.positives,
            "REG": self.boxed_positives,
            "REC": self.boxed_positives,
            "CAP": self.positives,
        }

    @property
    def dialogues_total(self) -> int:
        return 2 * self.positives + 2 * self.boxed_positives

    @property
    def pre_alignment_corpus_size(self) -> int:
        """CAP dialogues with split in {train, val}."""
        return sum(self.dialogues_for_split(s)["CAP"] for s in ("train", "val"))

    @property
    def fine_tuning_corpus_size(self) -> int:
        """CLS + REG + REC dialogues with split in {train, val}."""
        return sum(
            self.dialogues_for_split(s)[t]
            for s in ("train", "val")
            for t in ("CLS", "REG", "REC")
        )

    @classmethod
    def from_split_counts(cls, per_split: Mapping[str, SplitCounts]) -> "CountSummary":
        return cls(per_split=dict(per_split))


def summarize(manifests: Iterable[DatasetManifest]) -> CountSummary:
    """Tally image and dialogue counts across manifests.

    Requires every record to carry an assigned split.
    """
    tallies = {s.value: [0, 0, 0, 0] for s in ASSIGNED_SPLITS}
    for manifest in manifests:
        for record in manifest.records:
            if record.split not in ASSIGNED_SPLITS:
                raise DataError(
                    f"record '{record.image_id}' in '{manifest.dataset}' has "
                    f"no assigned split"
                )
            t = tallies[record.split.value]
            t[0] += 1
            if record.polarity is Polarity.POSITIVE:
                t[1] += 1
                if record.boxed:
                    t[3] += 1
            else:
                t[2] += 1
    return CountSummary(per_split={
        split: SplitCounts(images=v[0], positives=v[1], negatives=v[2], boxed_positives=v[3])
        for split, v in tallies.items()
    })


# ---------------------------------------------------------------------------
# Bounding-box text codec (0-999 permille grid)

_BOX_PATTERN = re.compile(r"\[\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\]")


def encode_bbox(box: BBox, width: int, height: int) -> str:
    """Serialize a box as "[x1, y1, x2, y2]" on a 0-999 permille grid."""
    box.validate(width, height)
    q = [
        round_half_away_from_zero(PERMILLE_GRID * v / extent)
        for v, extent in ((box.x1, width), (box.y1, height), (box.x2, width), (box.y2, height))
    ]
    if q[0] == q[2] or q[1] == q[3]:
        raise DataError(
            f"box ({box.x1}, {box.y1}, {box.x2}, {box.y2}) quantizes to a "
            f"degenerate permille box {q}"
        )
    return f"[{q[0]}, {q[1]}, {q[2]}, {q[3]}]"


def decode_bbox(text: str, width: int, height: int) -> BBox:
    """Parse the first permille-grid box in ``text`` back into image space."""
    match = _BOX_PATTERN.search(text)
    if match is None:
        raise ParseError(f"no box token found in {text!r}")
    g = [int(v) for v in match.groups()]
    x1 = g[0] * width / PERMILLE_GRID
    y1 = g[1] * height / PERMILLE_GRID
    x2 = g[2] * width / PERMILLE_GRID
    y2 = g[3] * height / PERMILLE_GRID
    if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
        raise DataError(f"box token {match.group(0)!r} de-quantizes out of order")
    return BBox(x1, y1, x2, y2)


# ---------------------------------------------------------------------------
# File formats (UTF-8; manifests are line-delimited JSON objects)

def _record_to_obj(record: ImageRecord) -> dict:
    obj = {
        "image_id": record.image_id,
        "dataset": record.dataset,
        "rel_path": record.rel_path,
        "width": record.width,
        "height": record.height,
        "child_category": record.child_category,
    }
    if record.bbox is not None:
        obj["bbox"] = [record.bbox.x1, record.bbox.y1, record.bbox.x2, record.bbox.y2]
    if record.split in ASSIGNED_SPLITS:
        obj["split"] = record.split.value
    return obj


def _record_from_obj(obj: dict, taxonomy: Taxonomy, line_no: int) -> ImageRecord:
    required = {"image_id", "dataset", "rel_path", "width", "height", "child_category"}
    missing = required - obj.keys()
    if missing:
        raise ParseError(f"manifest line {line_no}: missing fields {sorted(missing)}")
    unknown = obj.keys() - required - {"bbox", "split"}
    if unknown:
        raise ParseError(f"manifest line {line_no}: unexpected fields {sorted(unknown)}")
    bbox = BBox(*obj["bbox"]) if "bbox" in obj else None
    split = Split(obj["split"]) if "split" in obj else Split.UNASSIGNED
    return ImageRecord(
        image_id=obj["image_id"],
        dataset=obj["dataset"],
        rel_path=obj["rel_path"],
        width=obj["width"],
        height=obj["height"],
        child_category=obj["child_category"],
        polarity=taxonomy.polarity_of(obj["child_category"]),
        bbox=bbox,
        split=split,
    )


def write_manifests(manifests: Iterable[DatasetManifest], path) -> None:
    ordered: list[ImageRecord] = []
    for manifest in manifests:
        ordered.extend(manifest.records)
    ordered.sort(key=lambda r: (r.dataset, r.image_id))
    with open(path, "w", encoding="utf-8") as fh:
        for record in ordered:
            fh.write(json.dumps(_record_to_obj(record), separators=(", ", ": ")) + "\n")


def read_manifests(path, taxonomy: Taxonomy) -> list[DatasetManifest]:
    """Load manifests grouped by dataset.

    The split policy is inferred per dataset: fully assigned records mean a
    predefined division; otherwise the manifest awaits proportional
    assignment.
    """
    groups: dict[str, list[ImageRecord]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"manifest line {line_no}: {exc.msg}") from None
            record = _record_from_obj(obj, taxonomy, line_no)
            groups.setdefault(record.dataset, []).append(record)

    manifests = []
    for dataset in sorted(groups):
        records = groups[dataset]
        policy = (
            SplitPolicy.PREDEFINED
            if all(r.split in ASSIGNED_SPLITS for r in records)
            else SplitPolicy.PROPORTIONAL
        )
        manifests.append(DatasetManifest(dataset=dataset, split_policy=policy, records=tuple(records)))
    return manifests


def write_taxonomy(nodes: Sequence[CategoryNode], path) -> None:
    objs = []
    for n in nodes:
        obj = {"id": n.id, "name": n.name, "level": n.level.value}
        if n.parent_id is not None:
            obj["parent_id"] = n.parent_id
        objs.append(obj)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(objs, fh, indent=1)
        fh.write("\n")


def read_taxonomy_nodes(path) -> list[CategoryNode]:
    with open(path, encoding="utf-8") as fh:
        try:
            objs = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"taxonomy file: {exc.msg}") from None
    if not isinstance(objs, list):
        raise ParseError("taxonomy file: expected a list of node objects")
    nodes = []
    for obj in objs:
        try:
            nodes.append(CategoryNode(
                id=obj["id"],
                name=obj["name"],
                level=Level(obj["level"]),
                parent_id=obj.get("parent_id"),
            ))
        except (KeyError, ValueError) as exc:
            raise ParseError(f"taxonomy file: bad node object {obj!r} ({exc})") from None
    return nodes


def load_bundled_taxonomy() -> Taxonomy:
    """The bundled colonoscopy taxonomy: 4 roots, 13 parents, 62 children."""
    ref = resources.files("colonmm.data").joinpath("colon_taxonomy.json")
    with resources.as_file(ref) as path:
        return Taxonomy(read_taxonomy_nodes(path))
