"""Tiny decoder-only causal LM with multimodal splicing and LoRA.

The model is a conventional pre-norm transformer: learned token and position
embeddings, per-layer causal self-attention and a GELU MLP, a final norm,
and an untied output head. Visual tokens from the adapter replace the single
image-placeholder slot of the instruction; the loss covers response tokens
plus the closing <eos> only.

LoRA deltas target the attention query/key/value/output projections; the
effective weight is W + (alpha/r) * B @ A with B zero-initialised, so an
untrained adapter leaves the model bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, ShapeError, SpliceError
from .tokenizer import EOS_ID, IMAGE_TOKEN_ID, VOCAB_SIZE

LN_EPS = 1e-5
NEG_INF = -1e30


@dataclass(frozen=True)
class LMConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    context_len: int = 512
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ShapeError("model_dim must be divisible by heads")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


LORA_TARGET_KINDS = ("wq", "wk", "wv", "wo")


def lora_target_names(cfg: LMConfig) -> list[str]:
    return [f"layers.{i}.attn.{kind}" for i in range(cfg.layers) for kind in LORA_TARGET_KINDS]


@dataclass
class LMParams:
    cfg: LMConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def init_lm_params(cfg: LMConfig, seed: int, trainable: bool = False) -> LMParams:
    # The base LM stays frozen through both training stages, so it must work
    # as a random-feature stack: weights at 1/sqrt(fan_in) keep activation
    # norms stable and give the frozen head enough column norm that tuned
    # inputs (adapter tokens, LoRA deltas) can drive confident logits.
    rng = np.random.default_rng(seed)
    D, V = cfg.model_dim, cfg.vocab_size
    w_std = 1.0 / math.sqrt(D)

    def param(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=trainable)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=trainable)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=trainable)

    tensors: dict[str, Tensor] = {
        "tok_emb": param((V, D), 1.0),
        "pos_emb": param((cfg.context_len, D), 1.0),
        "ln_f.g": ones((D,)),
        "ln_f.b": zeros((D,)),
        "head_w": param((D, V), w_std),
    }
    for i in range(cfg.layers):
        prefix = f"layers.{i}"
        tensors[f"{prefix}.ln1.g"] = ones((D,))
        tensors[f"{prefix}.ln1.b"] = zeros((D,))
        for kind in LORA_TARGET_KINDS:
            tensors[f"{prefix}.attn.{kind}"] = param((D, D), w_std)  # (out, in)
            tensors[f"{prefix}.attn.{kind[1]}b"] = zeros((D,))
        tensors[f"{prefix}.ln2.g"] = ones((D,))
        tensors[f"{prefix}.ln2.b"] = zeros((D,))
        tensors[f"{prefix}.mlp.w1"] = param((D, 4 * D), w_std)
        tensors[f"{prefix}.mlp.b1"] = zeros((4 * D,))
        tensors[f"{prefix}.mlp.w2"] = param((4 * D, D), 1.0 / math.sqrt(4 * D))
        tensors[f"{prefix}.mlp.b2"] = zeros((D,))
    return LMParams(cfg=cfg, tensors=tensors)


@dataclass
class LoraAdapter:
    """Low-rank delta for one target matrix: delta = (alpha/r) * B @ A."""

    target: str
    A: Tensor  # (r, in)
    B: Tensor  # (out, r)
    rank: int
    alpha: float

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def init_lora(cfg: LMConfig, rank: int, alpha: float, seed: int, trainable: bool = True) -> dict[str, LoraAdapter]:
    """Zero-initialised LoRA set over the attention projections."""
    rng = np.random.default_rng(seed)
    D = cfg.model_dim
    adapters = {}
    for target in lora_target_names(cfg):
        adapters[target] = LoraAdapter(
            target=target,
            A=Tensor(rng.normal(0.0, 0.02, size=(rank, D)), requires_grad=trainable),
            B=Tensor(np.zeros((D, rank)), requires_grad=trainable),
            rank=rank,
            alpha=alpha,
        )
    return adapters


def lora_merge(base, adapter: LoraAdapter) -> np.ndarray:
    """Fold the low-rank delta into a base (out, in) matrix."""
    base = base.data if isinstance(base, Tensor) else np.asarray(base, dtype=np.float64)
    delta = adapter.scale * (adapter.B.data @ adapter.A.data)
    if delta.shape != base.shape:
        raise ShapeError(f"LoRA delta shape {delta.shape} != base {base.shape}")
    return base + delta


# ---------------------------------------------------------------------------
# Multimodal sample assembly

@dataclass
class MultimodalSample:
    instruction_ids: tuple[int, ...]
    response_ids: tuple[int, ...]
    n_visual: int
    visual: Tensor | None = None  # (n_visual, D)
    splice_at: int = field(init=False)
    length: int = field(init=False)
    targets: np.ndarray = field(init=False)
    loss_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        placeholders = [i for i, t in enumerate(self.instruction_ids) if t == IMAGE_TOKEN_ID]
        if len(placeholders) != 1:
            raise SpliceError(
                f"instruction must contain exactly one image placeholder, found {len(placeholders)}"
            )
        self.splice_at = placeholders[0]
        self.length = self.n_visual + len(self.instruction_ids) - 1 + len(self.response_ids)

        seq_ids = np.full(self.length, -1, dtype=np.int64)
        k = self.splice_at
        pre = self.instruction_ids[:k]
        post = self.instruction_ids[k + 1:]
        seq_ids[:k] = pre
        text_start = k + self.n_visual
        seq_ids[text_start:text_start + len(post)] = post
        seq_ids[text_start + len(post):] = self.response_ids

        self.targets = np.zeros(self.length, dtype=np.int64)
        self.targets[:-1] = np.maximum(seq_ids[1:], 0)
        self.targets[-1] = EOS_ID

        prefix_len = self.n_visual + len(self.instruction_ids) - 1
        self.loss_mask = np.zeros(self.length, dtype=bool)
        self.loss_mask[prefix_len - 1:] = True
        self._seq_ids = seq_ids


def embed_sample(sample: MultimodalSample, params: LMParams, visual: Tensor | None = None) -> Tensor:
    """Token-embed the text, splicing visual rows into the placeholder slot.

    Position embeddings are added later by the forward pass (positions are
    renumbered over the spliced sequence).
    """
    T_v = visual if visual is not None else sample.visual
    if T_v is None:
        raise DataError("sample has no visual tokens")
    T_v = ad.as_tensor(T_v)
    if T_v.data.shape[0] != sample.n_visual:
        raise ShapeError(
            f"visual token rows {T_v.data.shape[0]} != declared {sample.n_visual}"
        )
    k = sample.splice_at
    text_ids = list(sample.instruction_ids[:k]) + list(sample.instruction_ids[k + 1:]) + list(sample.response_ids)
    pieces = []
    if k > 0:
        pieces.append(ad.take_rows(params["tok_emb"], sample.instruction_ids[:k]))
    pieces.append(T_v)
    if text_ids[k:]:
        pieces.append(ad.take_rows(params["tok_emb"], text_ids[k:]))
    return pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)


def assemble_sequence(T_v, instruction_ids, response_ids, params: LMParams) -> tuple[MultimodalSample, Tensor]:
    T_v = ad.as_tensor(T_v)
    sample = MultimodalSample(
        instruction_ids=tuple(int(t) for t in instruction_ids),
        response_ids=tuple(int(t) for t in response_ids),
        n_visual=T_v.data.shape[0],
        visual=T_v,
    )
    return sample, embed_sample(sample, params)


# ---------------------------------------------------------------------------
# Forward pass

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * ad.power(var + LN_EPS, -0.5) * gamma + beta


def _effective_weight(params: LMParams, name: str, lora: dict[str, LoraAdapter] | None) -> Tensor:
    w = params[name]
    if lora and name in lora:
        a = lora[name]
        return w + ad.matmul(a.B, a.A) * a.scale
    return w


def _causal_mask(length: int) -> np.ndarray:
    mask = np.zeros((length, length))
    mask[np.triu_indices(length, k=1)] = NEG_INF
    return mask


def transformer_hidden(emb: Tensor, params: LMParams, lora: dict[str, LoraAdapter] | None = None) -> Tensor:
    """Run the decoder stack over embedded input of shape (..., T, D)."""
    cfg = params.cfg
    T = emb.data.shape[-2]
    if T > cfg.context_len:
        raise ShapeError(f"sequence length {T} exceeds context {cfg.context_len}")

    positions = Tensor(params["pos_emb"].data[:T]) if not params["pos_emb"].requires_grad \
        else params["pos_emb"][:T]
    x = emb + positions
    mask = Tensor(_causal_mask(T))
    scale = 1.0 / np.sqrt(cfg.head_dim)
    batch_dims = emb.data.shape[:-2]

    def split_heads(t: Tensor) -> Tensor:
        t = t.reshape(batch_dims + (T, cfg.heads, cfg.head_dim))
        axes = tuple(range(len(batch_dims))) + (len(batch_dims) + 1, len(batch_dims), len(batch_dims) + 2)
        return t.transpose(axes)

    def join_heads(t: Tensor) -> Tensor:
        axes = tuple(range(len(batch_dims))) + (len(batch_dims) + 1, len(batch_dims), len(batch_dims) + 2)
        return t.transpose(axes).reshape(batch_dims + (T, cfg.model_dim))

    for i in range(cfg.layers):
        prefix = f"layers.{i}"
        h = layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
        q = split_heads(h @ ad.transpose(_effective_weight(params, f"{prefix}.attn.wq", lora)) + params[f"{prefix}.attn.qb"])
        k = split_heads(h @ ad.transpose(_effective_weight(params, f"{prefix}.attn.wk", lora)) + params[f"{prefix}.attn.kb"])
        v = split_heads(h @ ad.transpose(_effective_weight(params, f"{prefix}.attn.wv", lora)) + params[f"{prefix}.attn.vb"])
        scores = ad.matmul(q, k.transpose(tuple(range(q.data.ndim - 2)) + (q.data.ndim - 1, q.data.ndim - 2))) * scale + mask
        att = ad.softmax(scores, axis=-1)
        ctx = join_heads(ad.matmul(att, v))
        x = x + (ctx @ ad.transpose(_effective_weight(params, f"{prefix}.attn.wo", lora)) + params[f"{prefix}.attn.ob"])
        h2 = layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
        x = x + (ad.gelu(h2 @ params[f"{prefix}.mlp.w1"] + params[f"{prefix}.mlp.b1"]) @ params[f"{prefix}.mlp.w2"] + params[f"{prefix}.mlp.b2"])

    return layer_norm(x, params["ln_f.g"], params["ln_f.b"])


def forward_logits(sample: MultimodalSample, params: LMParams, lora: dict[str, LoraAdapter] | None = None,
                   visual: Tensor | None = None) -> Tensor:
    """Per-position vocabulary logits for one spliced sample, shape (L, V)."""
    emb = embed_sample(sample, params, visual=visual)
    hidden = transformer_hidden(emb, params, lora)
    return hidden @ params["head_w"]


def forward_logits_batch(samples, params: LMParams, lora=None, visuals=None) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Right-pad a batch of samples and run one batched forward.

    Returns (logits (B, Tmax, V), padded targets, padded loss mask). Padding
    is safe under the causal mask because real positions never attend to the
    padded tail.
    """
    if visuals is None:
        visuals = [None] * len(samples)
    embs = [embed_sample(s, params, visual=v) for s, v in zip(samples, visuals)]
    t_max = max(e.data.shape[0] for e in embs)
    D = params.cfg.model_dim
    padded = [
        e if e.data.shape[0] == t_max else ad.concat([e, Tensor(np.zeros((t_max - e.data.shape[0], D)))], axis=0)
        for e in embs
    ]
    emb = ad.stack(padded, axis=0)
    hidden = transformer_hidden(emb, params, lora)
    logits = hidden @ params["head_w"]

    targets = np.zeros((len(samples), t_max), dtype=np.int64)
    mask = np.zeros((len(samples), t_max), dtype=bool)
    for row, s in enumerate(samples):
        targets[row, :s.length] = s.targets
        mask[row, :s.length] = s.loss_mask
    return logits, targets, mask


def masked_ce_loss(logits: Tensor, targets, mask) -> Tensor:
    """Mean next-token cross-entropy over masked positions only."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.data.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ShapeError(
            f"logits {logits.data.shape}, targets {targets.shape}, mask {mask.shape} disagree"
        )
    total = int(mask.sum())
    if total == 0:
        raise DataError("loss undefined: empty mask")
    logp = ad.log_softmax(logits, axis=-1)
    picked = ad.take_along_last(logp, targets)
    return ad.tsum(picked * Tensor(np.where(mask, -1.0, 0.0))) * (1.0 / total)


# ---------------------------------------------------------------------------
# Decoding and scoring

@dataclass(frozen=True)
class DecodeResult:
    ids: tuple[int, ...]
    logprobs: tuple[float, ...]  # per emitted token, log-softmax at the argmax


def frozen_view(params: LMParams) -> LMParams:
    """Gradient-free view sharing the same arrays (fast inference path)."""
    return LMParams(cfg=params.cfg, tensors={k: Tensor(v.data) for k, v in params.tensors.items()})


def greedy_decode(params: LMParams, T_v, instruction_ids, max_len: int,
                  lora: dict[str, LoraAdapter] | None = None) -> DecodeResult:
    """Argmax decoding (ties break to the lowest id); stops at <eos>."""
    params = frozen_view(params)
    T_v = ad.as_tensor(T_v).detach()
    base = MultimodalSample(
        instruction_ids=tuple(int(t) for t in instruction_ids),
        response_ids=(),
        n_visual=T_v.data.shape[0],
        visual=T_v,
    )
    prefix_len = base.length
    if prefix_len + 1 > params.cfg.context_len:
        raise ShapeError(f"prefix length {prefix_len} leaves no room in context")

    out_ids: list[int] = []
    out_logprobs: list[float] = []
    for _ in range(max_len):
        sample = MultimodalSample(
            instruction_ids=base.instruction_ids,
            response_ids=tuple(out_ids),
            n_visual=base.n_visual,
            visual=T_v,
        )
        if sample.length + 1 > params.cfg.context_len:
            raise ShapeError("context overflow during decoding")
        logits = forward_logits(sample, params, lora).data
        step = logits[-1]
        next_id = int(np.argmax(step))
        shifted = step - step.max()
        out_logprobs.append(float(shifted[next_id] - np.log(np.exp(shifted).sum())))
        if next_id == EOS_ID:
            break
        out_ids.append(next_id)
    return DecodeResult(ids=tuple(out_ids), logprobs=tuple(out_logprobs))


def sequence_logprob(params: LMParams, sample: MultimodalSample,
                     lora: dict[str, LoraAdapter] | None = None) -> float:
    """log p(response, <eos> | visual, instruction) under teacher forcing."""
    logits = forward_logits(sample, frozen_view(params), lora).data
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.nonzero(sample.loss_mask)[0]
    return float(logp[rows, sample.targets[rows]].sum())
