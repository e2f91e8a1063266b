"""Gradient-based layer freezing.

During non-private warm-start the squared gradients are summed per parameter.
Each layer is then scored by its accumulated squared-gradient mass divided by
its size, layers are taken greedily in descending score order until the next
one would overflow a budget of ``p * M`` parameters, and either that prefix or
its complement is frozen for the private phase.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from dppt.errors import ConfigError, ShapeError
from dppt.params import ParamTree

DEFAULT_P = 0.01
SWEEP_GRID = (0.00015, 0.001, 0.01, 0.1)
DIRECTION_LABELS = {True: "Freeze P", False: "Freeze 1-P"}


class SqGradAccumulator:
    def __init__(self, u, steps_seen=0):
        self.u = {k: np.asarray(v, dtype=np.float64) for k, v in u.items()}
        self.steps_seen = int(steps_seen)

    @classmethod
    def zeros_like(cls, tree: ParamTree):
        return cls({l.name: np.zeros_like(l.value) for l in tree if not l.frozen})

    def copy(self):
        return SqGradAccumulator({k: v.copy() for k, v in self.u.items()}, self.steps_seen)


def accumulate(acc: SqGradAccumulator, g) -> SqGradAccumulator:
    """Add the elementwise square of one step's gradient, in place."""
    if set(g) != set(acc.u):
        raise ShapeError("gradient layers do not match the accumulator")
    for name, u in acc.u.items():
        gi = np.asarray(g[name])
        if gi.shape != u.shape:
            raise ShapeError(f"layer {name!r}: gradient {gi.shape} vs accumulator {u.shape}")
        u += gi * gi
    acc.steps_seen += 1
    return acc


def layer_scores(acc: SqGradAccumulator, tree: ParamTree) -> dict[str, float]:
    """Size-normalised accumulated squared gradient per layer, in tree order."""
    if acc.steps_seen < 1:
        raise ConfigError("accumulator has seen no steps")
    scores = {}
    for layer in tree:
        if layer.name not in acc.u:
            continue
        if layer.dim == 0:
            raise ConfigError(f"layer {layer.name!r} is empty")
        scores[layer.name] = float(np.sum(acc.u[layer.name])) / layer.dim
    return scores


def rank_layers(scores) -> list[str]:
    """Names by descending score; equal scores keep their layer order."""
    index = {n: i for i, n in enumerate(scores)}
    return sorted(index, key=lambda n: (-scores[n], index[n]))


def select_layers(scores, dims, p, M) -> list[str]:
    """Greedy prefix of the ranking whose total size stays within ``p * M``.

    Stops at the first layer that would overflow the budget rather than
    skipping it, so a large top-ranked layer yields an empty selection.
    """
    if not 0 < p <= 1:
        raise ConfigError(f"p must lie in (0, 1], got {p}")
    budget = p * M
    chosen, used = [], 0
    for name in rank_layers(scores):
        if used + dims[name] <= budget:
            chosen.append(name)
            used += dims[name]
        else:
            break
    return chosen


@dataclass
class FreezePlan:
    scores: dict
    dims: dict
    top_layers: list
    freeze_top: bool
    p: float
    M: int
    frozen_set: list | None = None

    def __post_init__(self):
        if self.frozen_set is None:
            if self.freeze_top:
                self.frozen_set = list(self.top_layers)
            else:
                top = set(self.top_layers)
                self.frozen_set = [n for n in self.scores if n not in top]


def plan_freeze(acc, tree, p=DEFAULT_P, freeze_top=True) -> FreezePlan:
    scores = layer_scores(acc, tree)
    dims = {n: tree[n].dim for n in scores}
    M = sum(dims.values())
    top = select_layers(scores, dims, p, M)
    return FreezePlan(scores=scores, dims=dims, top_layers=top, freeze_top=freeze_top, p=p, M=M)


def apply_freeze(tree: ParamTree, plan: FreezePlan) -> ParamTree:
    for name in plan.frozen_set:
        if name not in tree:
            raise ConfigError(f"plan names unknown layer {name!r}")
    return tree.set_frozen(plan.frozen_set)


def write_freeze_report(path, plan: FreezePlan) -> None:
    ranking = rank_layers(plan.scores)
    rank = {n: i + 1 for i, n in enumerate(ranking)}
    top, frozen = set(plan.top_layers), set(plan.frozen_set)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "dim", "score", "rank", "selected", "frozen"])
        for name, score in plan.scores.items():
            w.writerow([name, plan.dims[name], repr(score), rank[name], int(name in top), int(name in frozen)])
