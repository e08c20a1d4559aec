"""Budgeted per-tag INT2/INT4 bitwidth assignment.

Two solvers: exhaustive enumeration of all 2^|tags| configurations
(tractable up to 22 tags) and a greedy walk over per-bit gains. Tie-breaks
are fully pinned so identical inputs always produce identical allocations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .calibration import SensitivityTable
from .errors import InfeasibleBudgetError, ValidationError

EXHAUSTIVE_TAG_LIMIT = 22
FEASIBILITY_EPS = 1e-9


def per_bit_gain(d2: float, d4: float, n: int) -> float:
    """Distortion reduction per extra cache bit when upgrading 2 -> 4."""
    if n < 1:
        raise ValidationError("token count must be >= 1")
    return (d2 - d4) / (2.0 * n)


def realized_average_bitwidth(bits: dict[int, int], counts: dict[int, int]) -> float:
    if not counts:
        raise ValidationError("empty counts")
    missing = set(counts) - set(bits)
    if missing:
        raise ValidationError(f"allocation missing tags {sorted(missing)}")
    total = sum(counts.values())
    return sum(counts[k] * bits[k] for k in counts) / total


@dataclass
class Allocation:
    budget: float
    bits: dict[int, int]
    realized_avg: float
    objective: float
    solver: str = "exhaustive"

    def to_json(self) -> dict:
        return {
            "budget": self.budget,
            "bits": {str(code): self.bits[code] for code in sorted(self.bits)},
            "realized_avg": self.realized_avg,
            "objective": self.objective,
            "solver": self.solver,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Allocation":
        return cls(
            budget=float(obj["budget"]),
            bits={int(code): int(b) for code, b in obj["bits"].items()},
            realized_avg=float(obj["realized_avg"]),
            objective=float(obj["objective"]),
            solver=obj.get("solver", "exhaustive"),
        )


def save_allocation(alloc: Allocation, path) -> None:
    Path(path).write_text(json.dumps(alloc.to_json(), sort_keys=True, indent=1))


def load_allocation(path) -> Allocation:
    return Allocation.from_json(json.loads(Path(path).read_text()))


def _table_arrays(table: SensitivityTable):
    codes = table.tags()
    d2 = np.array([table.distortion[(k, 2)] for k in codes], dtype=np.float64)
    d4 = np.array([table.distortion[(k, 4)] for k in codes], dtype=np.float64)
    n = np.array([table.counts[k] for k in codes], dtype=np.float64)
    return codes, d2, d4, n


def _check_budget(budget: float) -> None:
    if budget < 2.0 - FEASIBILITY_EPS:
        raise InfeasibleBudgetError(f"budget {budget} < 2 admits no allocation")
    if budget > 4.0 + FEASIBILITY_EPS:
        raise ValidationError(f"budget {budget} > 4 is outside the INT2/INT4 menu")


def _finish(codes, mask, d2, d4, n, budget, solver) -> Allocation:
    bits = {code: 4 if mask[i] else 2 for i, code in enumerate(codes)}
    objective = float(np.where(mask, d4, d2).sum())
    avg = float((np.where(mask, 4.0, 2.0) * n).sum() / n.sum())
    return Allocation(budget=float(budget), bits=bits, realized_avg=avg,
                      objective=objective, solver=solver)


def allocate_exhaustive(table: SensitivityTable, budget: float) -> Allocation:
    """Enumerate every {2,4} assignment and keep the feasible minimum.

    Ties go to the smallest realized average bitwidth, then to the
    lexicographically smallest sorted tuple of tag codes held at 4 bits.
    """
    table.validate()
    _check_budget(budget)
    codes, d2, d4, n = _table_arrays(table)
    n_tags = len(codes)
    if n_tags > EXHAUSTIVE_TAG_LIMIT:
        raise ValidationError(
            f"{n_tags} active tags exceed the exhaustive limit {EXHAUSTIVE_TAG_LIMIT}"
        )
    total = n.sum()
    slack = (budget - 2.0) * total  # budget for upgrade costs of 2*N_k
    upgrade_cost = 2.0 * n
    gain = d2 - d4

    best = None  # (objective, avg, four_bit_tuple, mask)
    chunk = 1 << 16
    for start in range(0, 1 << n_tags, chunk):
        masks = np.arange(start, min(start + chunk, 1 << n_tags), dtype=np.uint64)
        bitmat = ((masks[:, None] >> np.arange(n_tags, dtype=np.uint64)) & 1).astype(bool)
        cost = bitmat @ upgrade_cost
        feasible = cost <= slack + FEASIBILITY_EPS
        if not feasible.any():
            continue
        objective = d2.sum() - bitmat @ gain
        objective[~feasible] = np.inf
        idx = int(objective.argmin())
        # Resolve ties deterministically: smallest realized average first,
        # then lexicographically smallest 4-bit tag-code tuple.
        tied = np.flatnonzero(objective == objective[idx])
        avgs = 2.0 + cost[tied] / total
        tied = tied[avgs == avgs.min()]
        for j in tied:
            mask = bitmat[j]
            avg = float((np.where(mask, 4.0, 2.0) * n).sum() / total)
            key = (float(objective[j]), avg, tuple(codes[i] for i in np.flatnonzero(mask)))
            if best is None or key < best[0]:
                best = (key, mask.copy())
    if best is None:
        raise InfeasibleBudgetError(f"no feasible allocation at budget {budget}")
    return _finish(codes, best[1], d2, d4, n, budget, "exhaustive")


def allocate_greedy(table: SensitivityTable, budget: float) -> Allocation:
    """Start all-INT2, upgrade tags in descending per-bit-gain order.

    Ties break on larger absolute gain, then smaller tag code; zero-gain
    upgrades are skipped. A tag is upgraded whenever its extra cost 2*N_k
    fits the remaining budget.
    """
    table.validate()
    _check_budget(budget)
    codes, d2, d4, n = _table_arrays(table)
    gains = d2 - d4
    rhos = gains / (2.0 * n)
    order = sorted(range(len(codes)), key=lambda i: (-rhos[i], -gains[i], codes[i]))
    remaining = (budget - 2.0) * n.sum()
    mask = np.zeros(len(codes), dtype=bool)
    for i in order:
        if rhos[i] <= 0:
            continue
        cost = 2.0 * n[i]
        if cost <= remaining + FEASIBILITY_EPS:
            mask[i] = True
            remaining -= cost
    return _finish(codes, mask, d2, d4, n, budget, "greedy")


def allocate(table: SensitivityTable, budget: float, solver: str = "auto") -> Allocation:
    """Dispatch: exhaustive when the tag space is small enough."""
    if solver == "auto":
        solver = "exhaustive" if len(table.counts) <= EXHAUSTIVE_TAG_LIMIT else "greedy"
    if solver == "exhaustive":
        return allocate_exhaustive(table, budget)
    if solver == "greedy":
        return allocate_greedy(table, budget)
    raise ValidationError(f"unknown solver {solver!r}")


def default_budget_grid() -> list[float]:
    """0.1-bit steps over [2.0, 4.0]."""
    return [round(2.0 + 0.1 * i, 1) for i in range(21)]


@dataclass
class SweepResult:
    chosen: float
    flagged: bool  # True when no candidate met the threshold and 4.0 was forced
    curve: list[tuple[float, float]] = field(default_factory=list)
    baseline_score: float = 0.0


def sweep_budget(
    table: SensitivityTable,
    candidates: Sequence[float],
    evaluator: Callable[[Allocation], float],
    stability_threshold: float,
    solver: str = "auto",
) -> SweepResult:
    """Pick the smallest budget whose quality stays near the B=4 baseline.

    ``evaluator`` scores an allocation (lower is better); a candidate is
    stable when its score is within ``stability_threshold`` of the score at
    budget 4. Returns budget 4 with a flag when nothing qualifies.
    """
    if not candidates:
        raise ValidationError("empty candidate list")
    for b in candidates:
        if not 2.0 - FEASIBILITY_EPS <= b <= 4.0 + FEASIBILITY_EPS:
            raise ValidationError(f"candidate budget {b} outside [2, 4]")
    baseline = evaluator(allocate(table, 4.0, solver))
    curve = []
    chosen = None
    for b in sorted(candidates):
        score = evaluator(allocate(table, b, solver))
        curve.append((float(b), float(score)))
        if chosen is None and score <= baseline + stability_threshold:
            chosen = float(b)
    if chosen is None:
        return SweepResult(chosen=4.0, flagged=True, curve=curve, baseline_score=baseline)
    return SweepResult(chosen=chosen, flagged=False, curve=curve, baseline_score=baseline)
