"""Instruction-dialogue compiler.

Turns taxonomy-annotated image records into single-round dialogues for the
four tasks (CLS, REG, REC, CAP). Each positive image yields one CLS and one
CAP dialogue; each boxed positive additionally yields one REG and one REC
dialogue. Template choice is driven by a per-record keyed RNG stream, so
compilation order never changes the output.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Protocol, Sequence

from .errors import DataError, ParseError, UsageError
from .taxonomy import (
    CountSummary,
    DatasetManifest,
    ImageRecord,
    Polarity,
    Split,
    TASKS,
    Taxonomy,
    encode_bbox,
    keyed_hash,
    summarize,
)

IMAGE_TOKEN = "<image>"
COORD_PLACEHOLDER = "{object coordinates}"
CATEGORY_PLACEHOLDER = "{object category}"
TEMPLATES_PER_TASK = 5


@dataclass(frozen=True)
class TemplateBank:
    """Five human-instruction templates per task."""

    templates: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        for task in TASKS:
            bank = self.templates.get(task)
            if bank is None or len(bank) != TEMPLATES_PER_TASK:
                raise DataError(f"template bank needs exactly 5 {task} templates")
        for tpl in self.templates["REG"]:
            if COORD_PLACEHOLDER not in tpl:
                raise DataError(f"REG template missing {COORD_PLACEHOLDER}: {tpl!r}")
        for tpl in self.templates["REC"]:
            if CATEGORY_PLACEHOLDER not in tpl:
                raise DataError(f"REC template missing {CATEGORY_PLACEHOLDER}: {tpl!r}")
        for task in ("CLS", "CAP"):
            for tpl in self.templates[task]:
                if "{" in tpl or "}" in tpl:
                    raise DataError(f"{task} template must not contain placeholders: {tpl!r}")

    def template(self, task: str, index: int) -> str:
        return self.templates[task][index]


def load_template_bank(path=None) -> TemplateBank:
    """Load a bank from ``path``, or the bundled default bank."""
    if path is None:
        ref = resources.files("colonmm.data").joinpath("templates.json")
        raw = ref.read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            raw = fh.read()
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"template bank: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ParseError("template bank: expected a task -> templates object")
    return TemplateBank(templates={task: tuple(tpls) for task, tpls in obj.items()})


def select_template(task: str, rng: random.Random, bank: TemplateBank) -> tuple[int, str]:
    """Draw one of the five templates uniformly from the given stream."""
    index = rng.randrange(TEMPLATES_PER_TASK)
    return index, bank.template(task, index)


def record_rng(seed: int, dataset: str, image_id: str, task: str) -> random.Random:
    """Per-record RNG stream keyed on (seed, dataset, image_id, task)."""
    return random.Random(int(keyed_hash(seed, dataset, image_id, task), 16))


@dataclass(frozen=True)
class ImageRef:
    dataset: str
    image_id: str
    rel_path: str


@dataclass(frozen=True)
class InstructionRecord:
    record_id: str
    image: ImageRef
    task: str
    instruction: str
    response: str
    split: Split
    template_index: int
    category: str
    bbox_text: str | None = None


class CaptionProvider(Protocol):
    def caption(self, image: ImageRef, category: str, prompt: str) -> str: ...


class ProviderError(DataError):
    """A caption provider failed for one record."""


class StubCaptionProvider:
    """Deterministic stand-in for a chat-backed caption service."""

    def caption(self, image: ImageRef, category: str, prompt: str) -> str:
        return f"A colonoscopy image showing {category}."


CAPTION_PROMPT = (
    "This colonoscopy image shows {category}. Describe the surface pattern "
    "of the {category}, characterise the lesion itself, and describe the "
    "surrounding mucosa."
)


def build_caption_prompt(category: str, taxonomy: Taxonomy) -> str:
    """Category-conditioned prompt covering surface pattern, lesion
    character, and surroundings."""
    node = taxonomy.child_by_name(category)
    return CAPTION_PROMPT.format(category=node.name)


@dataclass(frozen=True)
class CompileConfig:
    seed: int
    tasks: frozenset[str] = frozenset(TASKS)
    include_captions: bool = True

    def __post_init__(self):
        unknown = self.tasks - set(TASKS)
        if unknown:
            raise UsageError(f"unknown tasks {sorted(unknown)}")
        if not self.tasks:
            raise UsageError("task subset must be non-empty")

    @property
    def effective_tasks(self) -> tuple[str, ...]:
        tasks = set(self.tasks)
        if not self.include_captions:
            tasks.discard("CAP")
        if not tasks:
            raise UsageError("no tasks left after disabling captions")
        return tuple(t for t in TASKS if t in tasks)


def render_dialogue(
    task: str,
    record: ImageRecord,
    template: str,
    template_index: int,
    category_name: str,
    caption: str | None = None,
) -> InstructionRecord:
    """Render one dialogue; the instruction starts with the image token."""
    if record.polarity is not Polarity.POSITIVE:
        raise DataError(f"record '{record.image_id}': dialogues require a positive record")
    bbox_text = None
    if task in ("REG", "REC"):
        if record.bbox is None:
            raise DataError(f"record '{record.image_id}': {task} requires a bbox")
        bbox_text = encode_bbox(record.bbox, record.width, record.height)

    if task == "CLS":
        question, response = template, category_name
    elif task == "REG":
        question, response = template.replace(COORD_PLACEHOLDER, bbox_text), category_name
    elif task == "REC":
        question, response = template.replace(CATEGORY_PLACEHOLDER, category_name), bbox_text
    elif task == "CAP":
        if caption is None:
            raise DataError(f"record '{record.image_id}': CAP requires a caption")
        question, response = template, caption
    else:
        raise UsageError(f"unknown task '{task}'")

    return InstructionRecord(
        record_id=f"{record.dataset}/{record.image_id}#{task}",
        image=ImageRef(record.dataset, record.image_id, record.rel_path),
        task=task,
        instruction=f"{IMAGE_TOKEN}\n{question}",
        response=response,
        split=record.split,
        template_index=template_index,
        category=category_name,
        bbox_text=bbox_text,
    )


@dataclass
class CompileReport:
    counts: CountSummary
    emitted: dict[str, int] = field(default_factory=lambda: {t: 0 for t in TASKS})
    provider_errors: list[tuple[str, str]] = field(default_factory=list)

    @property
    def total_emitted(self) -> int:
        return sum(self.emitted.values())


def compile_dialogues(
    manifests: Sequence[DatasetManifest],
    bank: TemplateBank,
    provider: CaptionProvider,
    config: CompileConfig,
    taxonomy: Taxonomy,
) -> tuple[list[InstructionRecord], CompileReport]:
    """Compile all manifests into an ordered dialogue list.

    Output order is (dataset, image_id, task) regardless of input order.
    Provider failures skip the CAP record and land in the report's error
    channel; they are never silent.
    """
    counts = summarize(manifests)
    report = CompileReport(counts=counts)
    tasks = config.effective_tasks

    records = sorted(
        (r for m in manifests for r in m.records),
        key=lambda r: (r.dataset, r.image_id),
    )

    out: list[InstructionRecord] = []
    for record in records:
        if record.polarity is not Polarity.POSITIVE:
            continue
        category_name = taxonomy.node(record.child_category).name
        for task in tasks:
            if task in ("REG", "REC") and record.bbox is None:
                continue
            rng = record_rng(config.seed, record.dataset, record.image_id, task)
            index, template = select_template(task, rng, bank)
            caption = None
            if task == "CAP":
                prompt = build_caption_prompt(category_name, taxonomy)
                image = ImageRef(record.dataset, record.image_id, record.rel_path)
                try:
                    caption = provider.caption(image, category_name, prompt)
                except Exception as exc:
                    report.provider_errors.append(
                        (f"{record.dataset}/{record.image_id}", str(exc))
                    )
                    continue
            out.append(render_dialogue(task, record, template, index, category_name, caption))
            report.emitted[task] += 1
    return out, report


# ---------------------------------------------------------------------------
# Instruction file format: line-delimited JSON objects, UTF-8

def _instruction_to_obj(record: InstructionRecord) -> dict:
    obj = {
        "id": record.record_id,
        "image": {
            "dataset": record.image.dataset,
            "image_id": record.image.image_id,
            "rel_path": record.image.rel_path,
        },
        "task": record.task,
        "instruction": record.instruction,
        "response": record.response,
        "split": record.split.value,
        "template_index": record.template_index,
        "category": record.category,
    }
    if record.bbox_text is not None:
        obj["bbox_text"] = record.bbox_text
    return obj


def write_records(records: Iterable[InstructionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(_instruction_to_obj(record), ensure_ascii=False) + "\n")


def read_records(path) -> list[InstructionRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(InstructionRecord(
                    record_id=obj["id"],
                    image=ImageRef(**obj["image"]),
                    task=obj["task"],
                    instruction=obj["instruction"],
                    response=obj["response"],
                    split=Split(obj["split"]),
                    template_index=obj["template_index"],
                    category=obj["category"],
                    bbox_text=obj.get("bbox_text"),
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"instruction file line {line_no}: {exc}") from None
    return records
