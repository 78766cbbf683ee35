"""Budgeted per-layer expert allocation, inverse to layer similarity.

Each layer's share of the budget is proportional to the reciprocal of its
indicated similarity, rounded up. Ceiling pushes the total above the budget,
so the plan is reconciled by repeatedly decrementing the layer with the
highest similarity among those still holding more than one expert (ties go
to the lower index) until the total matches the budget exactly. Both the
pre- and post-reconciliation vectors are kept.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BudgetError, FormatError, UnsupportedSimilarityError

__all__ = [
    "AllocationPlan",
    "allocate",
    "load_plan",
    "save_plan",
    "uniform_plan",
    "validate",
]


@dataclass(frozen=True)
class AllocationPlan:
    """Per-layer new-expert counts summing exactly to the budget."""

    budget: int
    similarities: tuple[float, ...]
    raw: tuple[float, ...]  # fractional shares before rounding
    pre_reconciliation: tuple[int, ...]  # ceil of raw
    new_experts: tuple[int, ...]
    classifier_layers: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)

    @property
    def layer_count(self) -> int:
        return len(self.new_experts)


def allocate(similarities: Sequence[float], budget: int) -> AllocationPlan:
    """Turn a strictly positive per-layer similarity vector and a total budget
    into an allocation plan. Requires budget >= layer count so every layer
    keeps at least one new expert."""
    values = np.asarray(similarities, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise UnsupportedSimilarityError("similarity vector must be non-empty and 1-d")
    if not np.isfinite(values).all() or (values <= 0.0).any():
        raise UnsupportedSimilarityError(
            "inverse-proportional allocation needs strictly positive similarities"
        )
    layers = values.size
    if budget < layers:
        raise BudgetError(f"budget {budget} cannot give {layers} layers one expert each")

    inverse = 1.0 / values
    raw = inverse / inverse.sum() * budget
    counts = [int(math.ceil(r)) for r in raw]

    while sum(counts) > budget:
        candidates = [i for i in range(layers) if counts[i] > 1]
        # cannot be empty: sum(counts) > budget >= layers forces some count > 1
        best = max(candidates, key=lambda i: (values[i], -i))
        counts[best] -= 1

    return AllocationPlan(
        budget=int(budget),
        similarities=tuple(float(v) for v in values),
        raw=tuple(float(r) for r in raw),
        pre_reconciliation=tuple(int(math.ceil(r)) for r in raw),
        new_experts=tuple(counts),
    )


def uniform_plan(layer_count: int, per_layer: int) -> AllocationPlan:
    """The uniform baseline: the same number of new experts on every layer."""
    if layer_count < 1 or per_layer < 0:
        raise BudgetError("need at least one layer and a non-negative count")
    counts = (per_layer,) * layer_count
    share = float(per_layer)
    return AllocationPlan(
        budget=per_layer * layer_count,
        similarities=(1.0,) * layer_count,
        raw=(share,) * layer_count,
        pre_reconciliation=counts,
        new_experts=counts,
        meta={"uniform": True},
    )


def validate(plan: AllocationPlan, layer_count: int) -> list[str]:
    """Check plan invariants; returns human-readable violations (empty = ok)."""
    problems: list[str] = []
    if plan.layer_count != layer_count:
        problems.append(f"plan covers {plan.layer_count} layers, expected {layer_count}")
    if sum(plan.new_experts) != plan.budget:
        problems.append(
            f"new experts sum to {sum(plan.new_experts)}, budget is {plan.budget}"
        )
    if any(c < 1 for c in plan.new_experts):
        problems.append("a layer has fewer than one new expert")
    if len(plan.similarities) == plan.layer_count and len(plan.pre_reconciliation) == plan.layer_count:
        for i in range(plan.layer_count):
            for j in range(plan.layer_count):
                if (
                    plan.similarities[i] <= plan.similarities[j]
                    and plan.pre_reconciliation[i] < plan.pre_reconciliation[j]
                ):
                    problems.append(
                        f"pre-reconciliation counts not anti-monotone at layers {i},{j}"
                    )
                    break
            else:
                continue
            break
    return problems


def save_plan(plan: AllocationPlan, path: str | Path, *, csv_path: str | Path | None = None) -> None:
    record = {
        "budget": plan.budget,
        "layers": [
            {
                "index": i,
                "similarity": plan.similarities[i],
                "new_experts": plan.new_experts[i],
                "raw": plan.raw[i],
                "pre_reconciliation": plan.pre_reconciliation[i],
            }
            for i in range(plan.layer_count)
        ],
        "classifier_layers": list(plan.classifier_layers),
        "mode": plan.meta,
    }
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "similarity", "new_experts"])
            for i in range(plan.layer_count):
                writer.writerow([i, repr(plan.similarities[i]), plan.new_experts[i]])


def load_plan(path: str | Path) -> AllocationPlan:
    try:
        record = json.loads(Path(path).read_text(encoding="utf-8"))
        layers = sorted(record["layers"], key=lambda row: row["index"])
        return AllocationPlan(
            budget=int(record["budget"]),
            similarities=tuple(float(row["similarity"]) for row in layers),
            raw=tuple(float(row.get("raw", row["new_experts"])) for row in layers),
            pre_reconciliation=tuple(
                int(row.get("pre_reconciliation", row["new_experts"])) for row in layers
            ),
            new_experts=tuple(int(row["new_experts"]) for row in layers),
            classifier_layers=tuple(record.get("classifier_layers", ())),
            meta=record.get("mode", {}),
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not a valid plan file: {exc}") from exc
