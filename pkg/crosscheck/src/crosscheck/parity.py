"""Recompute dumped operator cases with PyTorch and compare outputs.

Each case names an operator, its input arrays, scalar params, the producer's
output array, and a tolerance. The reference side runs in float64; GELU is
pinned to the exact (erf) mode to match the producer. The suite never writes
to the dump directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .container import load_arrays

CASES_FILE = "cases.json"
ARRAYS_FILE = "arrays.bin"


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class ParityCase:
    name: str
    operator: str
    inputs: dict[str, np.ndarray]
    params: dict
    expected: np.ndarray
    tolerance: float


@dataclass(frozen=True)
class CaseResult:
    name: str
    operator: str
    max_abs: float
    max_rel: float
    passed: bool
    note: str = ""


@dataclass
class ParityReport:
    results: list[CaseResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results)

    def failed_cases(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def render(self) -> str:
        lines = []
        for r in self.results:
            status = "ok  " if r.passed else "FAIL"
            lines.append(f"{status} {r.name:<14} {r.operator:<22} "
                         f"max_abs={r.max_abs:.3e} max_rel={r.max_rel:.3e}{r.note}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} "
                     f"({len(self.results)} cases)")
        return "\n".join(lines)


def compare_tensors(a: np.ndarray, b: np.ndarray, tol: float) -> tuple[float, float, bool]:
    """Max absolute and max relative deviation; pass iff abs within tol."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    max_abs = float(diff.max()) if diff.size else 0.0
    denom = np.maximum(1e-300, np.abs(a) + np.abs(b))
    max_rel = float((diff / denom).max()) if diff.size else 0.0
    return max_abs, max_rel, max_abs <= tol


def _t(array: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(array, dtype=np.float64))


def reference_output(case: ParityCase) -> np.ndarray:
    op = case.operator
    x = case.inputs
    if op == "adaptive_avg_pool2d":
        grid = _t(x["grid"]).permute(2, 0, 1).unsqueeze(0)  # (1, C, h, w)
        out = F.adaptive_avg_pool2d(grid, case.params["s"])
        return out.squeeze(0).permute(1, 2, 0).numpy()
    if op == "conv3x3_same":
        grid = _t(x["grid"]).permute(2, 0, 1).unsqueeze(0)
        out = F.conv2d(grid, _t(x["weight"]), _t(x["bias"]), padding=1)
        return out.squeeze(0).permute(1, 2, 0).numpy()
    if op == "gelu_exact":
        return F.gelu(_t(x["x"]), approximate="none").numpy()
    if op == "linear_xw_plus_b":
        # producer convention: y = x @ W + b with W shaped (in, out)
        return F.linear(_t(x["x"]), _t(x["weight"]).T, _t(x["bias"])).numpy()
    if op == "lora_merge":
        scale = case.params["alpha"] / case.params["rank"]
        return (_t(x["base"]) + scale * _t(x["B"]) @ _t(x["A"])).numpy()
    if op == "masked_cross_entropy":
        logits = _t(x["logits"])
        targets = torch.from_numpy(np.asarray(x["targets"], dtype=np.int64))
        mask = torch.from_numpy(np.asarray(x["mask"], dtype=bool))
        loss = F.cross_entropy(logits[mask], targets[mask])
        return loss.reshape(1).numpy()
    raise UsageError(f"case '{case.name}': unknown operator '{op}'")


def load_cases(dump_dir) -> list[ParityCase]:
    dump_dir = Path(dump_dir)
    cases_path = dump_dir / CASES_FILE
    arrays_path = dump_dir / ARRAYS_FILE
    if not cases_path.exists() or not arrays_path.exists():
        raise UsageError(f"dump directory {dump_dir} is missing "
                         f"{CASES_FILE} or {ARRAYS_FILE}")
    arrays, _ = load_arrays(arrays_path)
    with open(cases_path, encoding="utf-8") as fh:
        raw = json.load(fh)
    cases = []
    for entry in raw:
        cases.append(ParityCase(
            name=entry["name"],
            operator=entry["operator"],
            inputs={arg: arrays[ref] for arg, ref in entry["inputs"].items()},
            params=entry.get("params", {}),
            expected=arrays[entry["output"]],
            tolerance=entry["tolerance"],
        ))
    return cases


REQUIRED_OPERATORS = {
    "adaptive_avg_pool2d",
    "conv3x3_same",
    "gelu_exact",
    "linear_xw_plus_b",
    "lora_merge",
    "masked_cross_entropy",
}


def run_parity_suite(dump_dir) -> ParityReport:
    cases = load_cases(dump_dir)
    present = {c.operator for c in cases}
    missing = REQUIRED_OPERATORS - present
    if missing:
        raise UsageError(f"dump lacks cases for operators: {sorted(missing)}")

    report = ParityReport()
    for case in sorted(cases, key=lambda c: c.name):
        try:
            reference = reference_output(case)
            max_abs, max_rel, passed = compare_tensors(reference, case.expected,
                                                       case.tolerance)
            report.results.append(CaseResult(
                name=case.name, operator=case.operator,
                max_abs=max_abs, max_rel=max_rel, passed=passed,
            ))
        except UsageError:
            raise
        except Exception as exc:  # a broken case fails, the suite continues
            report.results.append(CaseResult(
                name=case.name, operator=case.operator,
                max_abs=float("inf"), max_rel=float("inf"), passed=False,
                note=f" error={exc}",
            ))
    return report
