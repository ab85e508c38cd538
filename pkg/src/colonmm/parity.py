"""Parity dumps: inputs and outputs of every hand-rolled numeric operator
that has a counterpart in mainstream deep-learning frameworks.

A dump directory holds ``arrays.bin`` (the shared checkpoint container) and
``cases.json`` listing one entry per case: operator name, input array names,
scalar params, output array name, and tolerance. An external harness can
recompute each case with reference operators and compare against the dumped
output.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adapter import adaptive_avg_pool2d, positional_conv
from .autodiff import Tensor
from .checkpoint import save_arrays
from .lm import LoraAdapter, lora_merge, masked_ce_loss

DEFAULT_TOLERANCE = 1e-10
ARRAYS_FILE = "arrays.bin"
CASES_FILE = "cases.json"


def _pool_case(name, rng, h, w, c, s):
    grid = rng.normal(size=(h, w, c))
    out = adaptive_avg_pool2d(Tensor(grid), s).data
    return {
        "name": name,
        "operator": "adaptive_avg_pool2d",
        "inputs": {"grid": f"{name}.grid"},
        "params": {"s": s},
        "output": f"{name}.out",
        "tolerance": DEFAULT_TOLERANCE,
    }, {f"{name}.grid": grid, f"{name}.out": out}


def build_parity_cases(seed: int = 0) -> tuple[list[dict], dict[str, np.ndarray]]:
    rng = np.random.default_rng(seed)
    cases: list[dict] = []
    arrays: dict[str, np.ndarray] = {}

    case, arrs = _pool_case("pool_even", rng, 4, 4, 3, 2)
    cases.append(case); arrays.update(arrs)
    case, arrs = _pool_case("pool_uneven", rng, 5, 7, 3, 3)
    cases.append(case); arrays.update(arrs)
    case, arrs = _pool_case("pool_identity", rng, 3, 3, 2, 3)
    cases.append(case); arrays.update(arrs)

    grid = rng.normal(size=(4, 5, 3))
    weight = rng.normal(size=(6, 3, 3, 3))
    bias = rng.normal(size=6)
    out = positional_conv(Tensor(grid), Tensor(weight), Tensor(bias)).data
    cases.append({
        "name": "conv3x3", "operator": "conv3x3_same",
        "inputs": {"grid": "conv3x3.grid", "weight": "conv3x3.weight", "bias": "conv3x3.bias"},
        "params": {}, "output": "conv3x3.out", "tolerance": DEFAULT_TOLERANCE,
    })
    arrays.update({"conv3x3.grid": grid, "conv3x3.weight": weight, "conv3x3.bias": bias,
                   "conv3x3.out": out})

    x = rng.normal(size=(6, 9)) * 3.0
    cases.append({
        "name": "gelu", "operator": "gelu_exact",
        "inputs": {"x": "gelu.x"}, "params": {},
        "output": "gelu.out", "tolerance": DEFAULT_TOLERANCE,
    })
    arrays.update({"gelu.x": x, "gelu.out": ad.gelu(Tensor(x)).data})

    lx = rng.normal(size=(5, 4))
    lw = rng.normal(size=(4, 6))
    lb = rng.normal(size=6)
    cases.append({
        "name": "linear", "operator": "linear_xw_plus_b",
        "inputs": {"x": "linear.x", "weight": "linear.weight", "bias": "linear.bias"},
        "params": {}, "output": "linear.out", "tolerance": DEFAULT_TOLERANCE,
    })
    arrays.update({"linear.x": lx, "linear.weight": lw, "linear.bias": lb,
                   "linear.out": (Tensor(lx) @ Tensor(lw) + Tensor(lb)).data})

    base = rng.normal(size=(6, 5))
    A = rng.normal(size=(2, 5))
    B = rng.normal(size=(6, 2))
    adapter = LoraAdapter(target="w", A=Tensor(A), B=Tensor(B), rank=2, alpha=4.0)
    cases.append({
        "name": "lora_merge", "operator": "lora_merge",
        "inputs": {"base": "lora_merge.base", "A": "lora_merge.A", "B": "lora_merge.B"},
        "params": {"rank": 2, "alpha": 4.0},
        "output": "lora_merge.out", "tolerance": DEFAULT_TOLERANCE,
    })
    arrays.update({"lora_merge.base": base, "lora_merge.A": A, "lora_merge.B": B,
                   "lora_merge.out": lora_merge(base, adapter)})

    logits = rng.normal(size=(7, 11)) * 2.0
    targets = rng.integers(0, 11, size=7)
    mask = np.zeros(7, dtype=bool)
    mask[[1, 3, 4, 6]] = True
    loss = masked_ce_loss(Tensor(logits), targets, mask)
    cases.append({
        "name": "masked_ce", "operator": "masked_cross_entropy",
        "inputs": {"logits": "masked_ce.logits", "targets": "masked_ce.targets",
                   "mask": "masked_ce.mask"},
        "params": {}, "output": "masked_ce.out", "tolerance": DEFAULT_TOLERANCE,
    })
    arrays.update({
        "masked_ce.logits": logits,
        "masked_ce.targets": targets.astype(np.int64),
        "masked_ce.mask": mask,
        "masked_ce.out": np.asarray(loss.data).reshape(1),
    })
    return cases, arrays


def write_parity_dump(out_dir, seed: int = 0) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases, arrays = build_parity_cases(seed)
    save_arrays(out_dir / ARRAYS_FILE, arrays)
    with open(out_dir / CASES_FILE, "w", encoding="utf-8") as fh:
        json.dump(cases, fh, indent=1)
        fh.write("\n")
    return out_dir
