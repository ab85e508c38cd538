"""Command-line front door: fixtures, compile, train, eval, report.

Every command is deterministic given its config and seed. Exit codes:
0 success, 1 usage error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .adapter import AdapterConfig, EncoderConfig
from .compiler import (
    CompileConfig,
    InstructionRecord,
    StubCaptionProvider,
    compile_dialogues,
    load_template_bank,
    read_records,
    write_records,
)
from .errors import ColonmmError, DataError, DivergenceError, UsageError
from .evalbench import emit_report, run_benchmark
from .fixtures import generate_fixture, load_image
from .lm import LMConfig
from .parity import write_parity_dump
from .taxonomy import (
    Split,
    SplitPolicy,
    TASKS,
    Taxonomy,
    assign_splits,
    read_manifests,
    read_taxonomy_nodes,
    summarize,
)
from .train import (
    ModelBundle,
    TrainPlan,
    build_train_sample,
    group_hashes,
    init_bundle,
    load_bundle,
    make_generator,
    save_bundle,
    train,
)

INSTRUCTION_FILES = {
    Split.TRAIN: "instructions_train.jsonl",
    Split.VAL: "instructions_val.jsonl",
    Split.TEST: "instructions_test.jsonl",
}
STAGE_CORPUS_TASKS = {"pre_align": ("CAP",), "sft": ("CLS", "REG", "REC")}
STAGE_CORPUS_SPLITS = (Split.TRAIN, Split.VAL)

DEFAULT_CONFIG = {
    "data": {
        "manifest": "manifest.jsonl",
        "taxonomy": "taxonomy.json",
        "image_root": ".",
        "instruction_dir": "instructions",
        "seed": 7,
    },
    "model": {
        "encoder": {"height": 56, "width": 56, "patch": 14, "dim": 32},
        "adapter": {"kernels": [2], "include_global": True, "kind": "pooled"},
        "lm": {"layers": 2, "heads": 4, "model_dim": 64, "context_len": 512},
    },
    "train": {
        "epochs": 3,
        "batch_size": 16,
        "grad_accum": 2,
        "lr_adapter": None,
        "lr_lm": None,
        "lora_rank": 128,
        "lora_alpha": 256.0,
        "seed": 0,
        "max_steps": None,
    },
    "eval": {"tasks": ["CLS", "REG", "REC", "CAP"], "max_len": 48},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


class RunConfig:
    """Four-section run configuration with path resolution relative to the
    config file's directory."""

    def __init__(self, raw: dict, base_dir: Path):
        unknown = raw.keys() - DEFAULT_CONFIG.keys()
        if unknown:
            raise UsageError(f"unknown config sections {sorted(unknown)}")
        self.raw = _merge(DEFAULT_CONFIG, raw)
        self.base_dir = base_dir
        grid = self.encoder_cfg.grid
        kernels = self.adapter_cfg.kernels
        if kernels and kernels[0] > min(grid):
            raise UsageError(
                f"adapter kernel {kernels[0]} exceeds encoder grid {grid}"
            )

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"config {path}: {exc.msg}") from None
        return cls(raw, path.parent)

    def path(self, section: str, key: str) -> Path:
        return self.base_dir / self.raw[section][key]

    @property
    def seed(self) -> int:
        return int(self.raw["data"]["seed"])

    @property
    def encoder_cfg(self) -> EncoderConfig:
        e = self.raw["model"]["encoder"]
        return EncoderConfig(height=e["height"], width=e["width"], patch=e["patch"], dim=e["dim"])

    @property
    def adapter_cfg(self) -> AdapterConfig:
        a = self.raw["model"]["adapter"]
        return AdapterConfig(
            kernels=tuple(a["kernels"]),
            include_global=a["include_global"],
            in_dim=self.raw["model"]["encoder"]["dim"],
            out_dim=self.raw["model"]["lm"]["model_dim"],
        )

    @property
    def adapter_kind(self) -> str:
        return self.raw["model"]["adapter"].get("kind", "pooled")

    @property
    def lm_cfg(self) -> LMConfig:
        m = self.raw["model"]["lm"]
        return LMConfig(layers=m["layers"], heads=m["heads"], model_dim=m["model_dim"],
                        context_len=m["context_len"])

    def plan(self, stage: str) -> TrainPlan:
        t = self.raw["train"]
        return TrainPlan(
            stage=stage,
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            grad_accum=t["grad_accum"],
            lr_adapter=t["lr_adapter"],
            lr_lm=t["lr_lm"],
            lora_rank=t["lora_rank"],
            lora_alpha=t["lora_alpha"],
            seed=t["seed"],
            max_steps=t["max_steps"],
        )

    def require(self, section: str, key: str) -> Path:
        path = self.path(section, key)
        if not path.exists():
            raise UsageError(f"{key} path not found: {path}")
        return path

    def load_taxonomy(self) -> Taxonomy:
        return Taxonomy(read_taxonomy_nodes(self.require("data", "taxonomy")))


def _write_fixture_config(out_dir: Path, seed: int, image_size: int) -> None:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    cfg["data"]["seed"] = seed
    cfg["model"]["encoder"]["height"] = image_size
    cfg["model"]["encoder"]["width"] = image_size
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=1)
        fh.write("\n")


def cmd_fixtures(args) -> int:
    out_dir = Path(args.out)
    generate_fixture(
        seed=args.seed,
        n_images=args.n_images,
        n_categories=args.n_categories,
        boxed_fraction=args.boxed_fraction,
        out_dir=out_dir,
        image_size=args.image_size,
        negative_fraction=args.negative_fraction,
        split_plan=args.split_plan,
    )
    _write_fixture_config(out_dir, args.seed, args.image_size)
    manifests = read_manifests(out_dir / "manifest.jsonl", Taxonomy(read_taxonomy_nodes(out_dir / "taxonomy.json")))
    counts = summarize(manifests)
    print(f"fixtures: {counts.images_total} images "
          f"({counts.positives} positive, {counts.boxed_positives} boxed, "
          f"{counts.negatives} negative) -> {out_dir}")
    return 0


def cmd_compile(args) -> int:
    config = RunConfig.load(args.config)
    taxonomy = config.load_taxonomy()
    manifests = read_manifests(config.require("data", "manifest"), taxonomy)
    manifests = [
        assign_splits(m, config.seed) if m.split_policy is SplitPolicy.PROPORTIONAL else m
        for m in manifests
    ]
    tasks = frozenset(args.tasks.split(",")) if args.tasks else frozenset(TASKS)
    compile_cfg = CompileConfig(seed=config.seed, tasks=tasks, include_captions=not args.no_captions)
    bank = load_template_bank(args.templates)
    records, report = compile_dialogues(manifests, bank, StubCaptionProvider(), compile_cfg, taxonomy)

    out_dir = Path(args.out) if args.out else config.path("data", "instruction_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    for split, filename in INSTRUCTION_FILES.items():
        write_records([r for r in records if r.split is split], out_dir / filename)

    counts = report.counts
    identity = counts.dialogues_total == 2 * counts.positives + 2 * counts.boxed_positives
    print(f"compiled {report.total_emitted} dialogues -> {out_dir}")
    for task in TASKS:
        print(f"  {task}: {report.emitted[task]}")
    print(f"dialogue identity (2*positives + 2*boxed): {'OK' if identity else 'VIOLATED'}")
    if report.provider_errors:
        print(f"caption provider errors: {len(report.provider_errors)}")
        for key, message in report.provider_errors:
            print(f"  {key}: {message}")
    return 0


def _read_instruction_dir(config: RunConfig) -> list[InstructionRecord]:
    instr_dir = config.path("data", "instruction_dir")
    records: list[InstructionRecord] = []
    for filename in INSTRUCTION_FILES.values():
        path = instr_dir / filename
        if path.exists():
            records.extend(read_records(path))
    if not records:
        raise UsageError(f"no instruction files under {instr_dir}; run compile first")
    return records


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    stage = args.stage
    if stage == "sft" and not args.init and not args.from_scratch:
        raise UsageError("sft requires --init CHECKPOINT or --from-scratch")

    if args.init:
        bundle = load_bundle(Path(args.init))
    else:
        bundle = init_bundle(config.encoder_cfg, config.adapter_cfg, config.lm_cfg,
                             seed=config.seed, adapter_kind=config.adapter_kind)

    wanted_tasks = STAGE_CORPUS_TASKS[stage]
    records = [
        r for r in _read_instruction_dir(config)
        if r.task in wanted_tasks and r.split in STAGE_CORPUS_SPLITS
    ]
    if not records:
        raise UsageError(f"no {'/'.join(wanted_tasks)} records in train/val splits")

    image_root = config.path("data", "image_root")
    corpus = [
        build_train_sample(r, load_image(image_root / r.image.rel_path), bundle)
        for r in sorted(records, key=lambda r: r.record_id)
    ]

    plan = config.plan(stage)
    before = group_hashes(bundle)
    result = train(plan, corpus, bundle)
    after = group_hashes(bundle)

    out_dir = Path(args.out) if args.out else config.base_dir / "runs"
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / f"ckpt_{stage}.bin"
    save_bundle(bundle, ckpt_path)
    log_path = out_dir / f"train_{stage}.log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        for entry in result.log:
            fh.write(json.dumps(entry) + "\n")
        fh.write(json.dumps({"event": "group_hashes", "before": before, "after": after}) + "\n")

    changed = sorted(name for name in before if before[name] != after[name])
    frozen = sorted(name for name in before if before[name] == after[name])
    print(f"{stage}: {len(result.log)} steps, "
          f"loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
    print(f"updated groups: {', '.join(changed) or 'none'}")
    print(f"frozen groups:  {', '.join(frozen) or 'none'}")
    print(f"checkpoint: {ckpt_path}")
    print(f"log: {log_path}")
    return 0


def _write_prediction_dump(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record, pred in rows:
            obj = {
                "record_id": pred.record_id,
                "task": pred.task,
                "split": record.split.value,
                "raw": pred.raw,
            }
            if pred.error is not None:
                obj["error"] = pred.error
            elif pred.box is not None:
                obj["parsed"] = [pred.box.x1, pred.box.y1, pred.box.x2, pred.box.y2]
            else:
                obj["parsed"] = pred.category
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def cmd_eval(args) -> int:
    config = RunConfig.load(args.config)
    tasks = set(config.raw["eval"]["tasks"])
    records = [
        r for r in _read_instruction_dir(config)
        if r.task in tasks and r.split in (Split.VAL, Split.TEST)
    ]
    if not records:
        raise UsageError("no validation/test records for the configured tasks")

    if args.gold_echo:
        generate = lambda record: record.response
        label = "gold-echo"
    else:
        if not args.checkpoint:
            raise UsageError("eval requires --checkpoint (or --gold-echo)")
        bundle = load_bundle(Path(args.checkpoint))
        image_root = config.path("data", "image_root")
        generate = make_generator(
            bundle,
            lambda record: load_image(image_root / record.image.rel_path),
            max_len=config.raw["eval"]["max_len"],
        )
        label = Path(args.checkpoint).stem

    sink: list = []
    report = run_benchmark(generate, records, model_label=label, prediction_sink=sink)

    out_dir = Path(args.out) if args.out else config.base_dir / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_prediction_dump(out_dir / "predictions.jsonl", sink)
    table = emit_report(report, "plain-table")
    with open(out_dir / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(table)
    with open(out_dir / "report.csv", "w", encoding="utf-8") as fh:
        fh.write(emit_report(report, "comma-separated"))
    print(table, end="")
    if report.cap_keyword_presence:
        for split_label, value in sorted(report.cap_keyword_presence.items()):
            print(f"CAP keyword presence ({split_label}, diagnostic only): {value:.2%}")
    print(f"predictions: {out_dir / 'predictions.jsonl'}")
    return 0


def cmd_report(args) -> int:
    config = RunConfig.load(args.config)
    records = {r.record_id: r for r in _read_instruction_dir(config)}
    raw_by_id: dict[str, str] = {}
    with open(args.predictions, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                raw_by_id[obj["record_id"]] = obj["raw"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"predictions line {line_no}: {exc}") from None
    missing = [rid for rid in raw_by_id if rid not in records]
    if missing:
        raise DataError(f"predictions reference unknown records, e.g. {missing[0]}")
    subset = [records[rid] for rid in raw_by_id]
    report = run_benchmark(lambda r: raw_by_id[r.record_id], subset,
                           model_label=args.label)
    print(emit_report(report, args.format), end="")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="colonmm", description=__doc__)
    parser.add_argument("--dump-parity", metavar="DIR",
                        help="write numeric parity dumps to DIR and exit")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for commands that take one directly")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap (processing is deterministic regardless)")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("fixtures", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--n-images", type=int, default=40)
    p.add_argument("--n-categories", type=int, default=4)
    p.add_argument("--boxed-fraction", type=float, default=0.6)
    p.add_argument("--negative-fraction", type=float, default=0.0)
    p.add_argument("--split-plan", choices=("proportional", "overfit"), default="proportional")
    p.add_argument("--image-size", type=int, default=56)

    p = sub.add_parser("compile", help="compile instruction dialogues")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--tasks", help="comma-separated subset of CLS,REG,REC,CAP")
    p.add_argument("--templates", help="custom template bank file")
    p.add_argument("--no-captions", action="store_true")

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", required=True, choices=("pre_align", "sft"))
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--out")

    p = sub.add_parser("eval", help="run the benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--gold-echo", action="store_true",
                   help="score the gold responses themselves (debug oracle)")
    p.add_argument("--out")

    p = sub.add_parser("report", help="re-emit a report from a prediction dump")
    p.add_argument("--config", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--format", choices=("plain-table", "comma-separated"), default="plain-table")
    p.add_argument("--label", default="model")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")
    if args.dump_parity:
        write_parity_dump(args.dump_parity, seed=args.seed)
        print(f"parity dump -> {args.dump_parity}")
        return 0
    handlers = {
        "fixtures": cmd_fixtures,
        "compile": cmd_compile,
        "train": cmd_train,
        "eval": cmd_eval,
        "report": cmd_report,
    }
    if args.command is None:
        parser.print_help()
        return 0
    return handlers[args.command](args)


def main(argv=None) -> int:
    try:
        return run(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except ColonmmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
