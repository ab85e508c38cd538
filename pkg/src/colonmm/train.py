"""Two-stage training recipe over the encoder/adapter/LM bundle.

Stage ``pre_align`` tunes the adapter only (encoder and LM frozen); stage
``sft`` tunes the adapter plus LoRA deltas on the LM's attention
projections. Both stages run AdamW with a per-group cosine schedule decaying
to zero, gradient accumulation every two micro-steps, and seeded batch
order, so a fixed (seed, corpus, plan) reproduces checkpoints bit for bit.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adapter import (
    AdapterConfig,
    AdapterParams,
    EncoderConfig,
    MlpAdapterParams,
    adapter_forward,
    init_adapter_params,
    init_encoder_params,
    init_mlp_adapter_params,
    mlp_adapter_forward,
    patch_embed,
    visual_token_count,
)
from .autodiff import Tensor
from .compiler import InstructionRecord
from .errors import DivergenceError, UsageError
from .lm import (
    LMConfig,
    LMParams,
    LoraAdapter,
    MultimodalSample,
    forward_logits_batch,
    greedy_decode,
    init_lm_params,
    init_lora,
    lora_target_names,
    masked_ce_loss,
)
from .tokenizer import ASSISTANT_ID, BOS_ID, HUMAN_ID, detokenize, tokenize
from .checkpoint import load_arrays, save_arrays

STAGES = ("pre_align", "sft")
STAGE_DEFAULT_LR = {"pre_align": {"adapter": 2e-4}, "sft": {"adapter": 2e-3, "lm": 2e-4}}


@dataclass(frozen=True)
class TrainPlan:
    stage: str
    epochs: int = 3
    batch_size: int = 16
    grad_accum: int = 2
    lr_adapter: float | None = None  # stage default when None
    lr_lm: float | None = None
    lora_rank: int = 128
    lora_alpha: float = 256.0
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0
    max_steps: int | None = None  # cap on micro-steps

    def __post_init__(self):
        if self.stage not in STAGES:
            raise UsageError(f"unknown stage '{self.stage}'")
        if self.epochs <= 0 or self.batch_size <= 0 or self.grad_accum <= 0:
            raise UsageError("epochs, batch size, and grad_accum must be positive")

    @property
    def adapter_lr(self) -> float:
        return self.lr_adapter if self.lr_adapter is not None else STAGE_DEFAULT_LR[self.stage]["adapter"]

    @property
    def lm_lr(self) -> float:
        if self.stage != "sft":
            return 0.0
        return self.lr_lm if self.lr_lm is not None else STAGE_DEFAULT_LR["sft"]["lm"]


@dataclass
class ModelBundle:
    encoder_cfg: EncoderConfig
    encoder: dict[str, np.ndarray]  # frozen in both stages
    adapter_cfg: AdapterConfig
    adapter: AdapterParams
    lm: LMParams
    lora: dict[str, LoraAdapter] | None = None
    adapter_kind: str = "pooled"  # or "mlp" for the keep-all-tokens baseline
    mlp_adapter: MlpAdapterParams | None = None

    @property
    def n_visual(self) -> int:
        if self.adapter_kind == "mlp":
            return self.encoder_cfg.tokens
        return visual_token_count(self.adapter_cfg)

    def visual_tokens(self, embedding) -> Tensor:
        if self.adapter_kind == "mlp":
            return mlp_adapter_forward(embedding, self.mlp_adapter)
        return adapter_forward(embedding, self.encoder_cfg.grid, self.adapter_cfg, self.adapter)


def init_bundle(encoder_cfg: EncoderConfig, adapter_cfg: AdapterConfig, lm_cfg: LMConfig,
                seed: int, adapter_kind: str = "pooled") -> ModelBundle:
    if adapter_cfg.out_dim != lm_cfg.model_dim:
        raise UsageError("adapter output dim must equal LM model_dim")
    if adapter_kind not in ("pooled", "mlp"):
        raise UsageError(f"unknown adapter kind '{adapter_kind}'")
    sub = lambda tag: int(hashlib.sha256(f"{seed}:{tag}".encode()).hexdigest()[:12], 16)
    bundle = ModelBundle(
        encoder_cfg=encoder_cfg,
        encoder=init_encoder_params(encoder_cfg, sub("encoder")),
        adapter_cfg=adapter_cfg,
        adapter=init_adapter_params(adapter_cfg, sub("adapter"), trainable=True),
        lm=init_lm_params(lm_cfg, sub("lm"), trainable=False),
        adapter_kind=adapter_kind,
    )
    if adapter_kind == "mlp":
        bundle.mlp_adapter = init_mlp_adapter_params(
            adapter_cfg.in_dim, adapter_cfg.out_dim, sub("mlp_adapter"), trainable=True
        )
    return bundle


# ---------------------------------------------------------------------------
# Sample construction

@dataclass
class TrainSample:
    record_id: str
    embedding: np.ndarray  # frozen patch embedding (n, d)
    sample: MultimodalSample


def instruction_token_ids(text: str) -> list[int]:
    return [BOS_ID, HUMAN_ID] + tokenize(text) + [ASSISTANT_ID]


def build_train_sample(record: InstructionRecord, image: np.ndarray, bundle: ModelBundle) -> TrainSample:
    embedding = patch_embed(image, bundle.encoder_cfg, bundle.encoder)
    sample = MultimodalSample(
        instruction_ids=tuple(instruction_token_ids(record.instruction)),
        response_ids=tuple(tokenize(record.response)),
        n_visual=bundle.n_visual,
    )
    return TrainSample(record_id=record.record_id, embedding=embedding, sample=sample)


# ---------------------------------------------------------------------------
# Optimiser

class AdamW:
    def __init__(self, tensors: Sequence[Tensor], lr0: float, betas: tuple[float, float],
                 weight_decay: float, total_updates: int):
        self.tensors = list(tensors)
        self.lr0 = lr0
        self.b1, self.b2 = betas
        self.weight_decay = weight_decay
        self.total_updates = max(total_updates, 1)
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def lr_at(self, update_index: int) -> float:
        return self.lr0 * 0.5 * (1.0 + math.cos(math.pi * update_index / self.total_updates))

    def step(self, grad_scale: float) -> float:
        lr = self.lr_at(self.t)
        self.t += 1
        for i, tensor in enumerate(self.tensors):
            grad = (tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)) * grad_scale
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * grad
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * grad * grad
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            tensor.data -= lr * (mhat / (np.sqrt(vhat) + 1e-8) + self.weight_decay * tensor.data)
            tensor.grad = None
        return lr


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [entry["loss"] for entry in self.log]


def trainable_groups(plan: TrainPlan, bundle: ModelBundle) -> dict[str, list[Tensor]]:
    if bundle.adapter_kind == "mlp":
        adapter_tensors = list(bundle.mlp_adapter.named().values())
    else:
        adapter_tensors = list(bundle.adapter.named().values())
    groups = {"adapter": adapter_tensors}
    if plan.stage == "sft":
        if bundle.lora is None:
            bundle.lora = init_lora(bundle.lm.cfg, plan.lora_rank, plan.lora_alpha,
                                    seed=plan.seed + 101)
        lora_tensors = []
        for name in sorted(bundle.lora):
            lora_tensors.extend([bundle.lora[name].A, bundle.lora[name].B])
        groups["lm"] = lora_tensors
    return groups


def train(plan: TrainPlan, corpus: Sequence[TrainSample], bundle: ModelBundle) -> TrainResult:
    """Run one stage; mutates the bundle's trainable tensors in place."""
    if not corpus:
        raise UsageError("training corpus is empty")

    groups = trainable_groups(plan, bundle)
    for tensors in groups.values():
        for t in tensors:
            t.requires_grad = True
            t.grad = None

    n = len(corpus)
    batches_per_epoch = math.ceil(n / plan.batch_size)
    total_micro = plan.epochs * batches_per_epoch
    if plan.max_steps is not None:
        total_micro = min(total_micro, plan.max_steps)
    total_updates = math.ceil(total_micro / plan.grad_accum)

    lrs = {"adapter": plan.adapter_lr}
    if "lm" in groups:
        lrs["lm"] = plan.lm_lr
    optimisers = {
        name: AdamW(tensors, lrs[name], plan.betas, plan.weight_decay, total_updates)
        for name, tensors in groups.items()
    }

    result = TrainResult()
    rng = np.random.default_rng(plan.seed)
    micro = 0
    pending = 0
    done = False
    for _ in range(plan.epochs):
        if done:
            break
        order = rng.permutation(n)
        for b in range(batches_per_epoch):
            if micro >= total_micro:
                done = True
                break
            batch = [corpus[i] for i in order[b * plan.batch_size:(b + 1) * plan.batch_size]]
            visuals = [bundle.visual_tokens(Tensor(s.embedding)) for s in batch]
            logits, targets, mask = forward_logits_batch(
                [s.sample for s in batch], bundle.lm, bundle.lora, visuals
            )
            loss = masked_ce_loss(logits, targets, mask)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise DivergenceError(micro)
            loss.backward()
            micro += 1
            pending += 1
            entry = {"step": micro, "stage": plan.stage, "loss": loss_value}
            for name, opt in optimisers.items():
                entry[f"lr_{name}"] = opt.lr_at(opt.t)
            result.log.append(entry)
            if pending == plan.grad_accum or micro == total_micro:
                for opt in optimisers.values():
                    opt.step(grad_scale=1.0 / pending)
                pending = 0
    return result


# ---------------------------------------------------------------------------
# Persistence and hashing

def bundle_arrays(bundle: ModelBundle) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, arr in bundle.encoder.items():
        arrays[f"encoder.{name}"] = arr
    for name, tensor in bundle.adapter.named().items():
        arrays[f"adapter.{name}"] = tensor.data
    if bundle.mlp_adapter is not None:
        for name, tensor in bundle.mlp_adapter.named().items():
            arrays[f"mlp_adapter.{name}"] = tensor.data
    for name, tensor in bundle.lm.tensors.items():
        arrays[f"lm.{name}"] = tensor.data
    if bundle.lora is not None:
        for target, adapter in bundle.lora.items():
            arrays[f"lora.{target}.A"] = adapter.A.data
            arrays[f"lora.{target}.B"] = adapter.B.data
    return arrays


def save_bundle(bundle: ModelBundle, path) -> None:
    meta = {
        "encoder_cfg": {
            "height": bundle.encoder_cfg.height, "width": bundle.encoder_cfg.width,
            "patch": bundle.encoder_cfg.patch, "dim": bundle.encoder_cfg.dim,
        },
        "adapter_cfg": {
            "kernels": list(bundle.adapter_cfg.kernels),
            "include_global": bundle.adapter_cfg.include_global,
            "in_dim": bundle.adapter_cfg.in_dim, "out_dim": bundle.adapter_cfg.out_dim,
        },
        "lm_cfg": {
            "layers": bundle.lm.cfg.layers, "heads": bundle.lm.cfg.heads,
            "model_dim": bundle.lm.cfg.model_dim, "context_len": bundle.lm.cfg.context_len,
            "vocab_size": bundle.lm.cfg.vocab_size,
        },
        "adapter_kind": bundle.adapter_kind,
        "lora": None if bundle.lora is None else {
            "rank": next(iter(bundle.lora.values())).rank,
            "alpha": next(iter(bundle.lora.values())).alpha,
        },
    }
    save_arrays(path, bundle_arrays(bundle), meta=meta)


def load_bundle(path) -> ModelBundle:
    arrays, meta = load_arrays(path)
    encoder_cfg = EncoderConfig(**meta["encoder_cfg"])
    adapter_meta = dict(meta["adapter_cfg"])
    adapter_meta["kernels"] = tuple(adapter_meta["kernels"])
    adapter_cfg = AdapterConfig(**adapter_meta)
    lm_cfg = LMConfig(**meta["lm_cfg"])

    encoder = {name[len("encoder."):]: arr for name, arr in arrays.items() if name.startswith("encoder.")}
    adapter = AdapterParams(**{
        name: Tensor(arrays[f"adapter.{name}"], requires_grad=True)
        for name in ("linear1_w", "linear1_b", "pos_conv_w", "pos_conv_b", "linear2_w", "linear2_b")
    })
    lm_tensors = {
        name[len("lm."):]: Tensor(arr) for name, arr in arrays.items() if name.startswith("lm.")
    }
    bundle = ModelBundle(
        encoder_cfg=encoder_cfg, encoder=encoder,
        adapter_cfg=adapter_cfg, adapter=adapter,
        lm=LMParams(cfg=lm_cfg, tensors=lm_tensors),
        adapter_kind=meta.get("adapter_kind", "pooled"),
    )
    if bundle.adapter_kind == "mlp":
        bundle.mlp_adapter = MlpAdapterParams(**{
            name: Tensor(arrays[f"mlp_adapter.{name}"], requires_grad=True)
            for name in ("w1", "b1", "w2", "b2", "w3", "b3")
        })
    if meta.get("lora"):
        rank, alpha = meta["lora"]["rank"], meta["lora"]["alpha"]
        lora = {}
        for target in lora_target_names(lm_cfg):
            lora[target] = LoraAdapter(
                target=target,
                A=Tensor(arrays[f"lora.{target}.A"], requires_grad=True),
                B=Tensor(arrays[f"lora.{target}.B"], requires_grad=True),
                rank=rank, alpha=alpha,
            )
        bundle.lora = lora
    return bundle


def group_hashes(bundle: ModelBundle) -> dict[str, str]:
    """SHA-256 digest per parameter group, for freeze-contract checks."""
    def digest(pairs) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(pairs):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    groups = {
        "encoder": digest(bundle.encoder.items()),
        "adapter": digest((n, t.data) for n, t in bundle.adapter.named().items()),
        "lm": digest((n, t.data) for n, t in bundle.lm.tensors.items()),
    }
    if bundle.mlp_adapter is not None:
        groups["mlp_adapter"] = digest((n, t.data) for n, t in bundle.mlp_adapter.named().items())
    if bundle.lora is not None:
        groups["lora"] = digest(
            (f"{target}.{part}", getattr(adapter, part).data)
            for target, adapter in bundle.lora.items() for part in ("A", "B")
        )
    return groups


# ---------------------------------------------------------------------------
# Generation interface for evaluation

def make_generator(bundle: ModelBundle, image_loader: Callable[[InstructionRecord], np.ndarray],
                   max_len: int = 48) -> Callable[[InstructionRecord], str]:
    """Wrap the bundle as a ``generate(record) -> text`` model."""

    def generate(record: InstructionRecord) -> str:
        image = image_loader(record)
        embedding = patch_embed(image, bundle.encoder_cfg, bundle.encoder)
        visual = bundle.visual_tokens(Tensor(embedding)).detach()
        ids = instruction_token_ids(record.instruction)
        result = greedy_decode(bundle.lm, visual, ids, max_len, bundle.lora)
        return detokenize(result.ids)

    return generate
