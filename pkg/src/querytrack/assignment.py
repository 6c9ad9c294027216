"""Bipartite matching between query slots and ground-truth objects.

Three layers: a minimum-cost assignment solver, the class/box matching cost,
and the per-frame label-assignment rules the tracker trains with — newborn
objects are matched to detect queries only, while track queries inherit the
assignment of the object they already carry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from querytrack.boxes import Box, giou, l1_box

__all__ = [
    "Assignment",
    "GtObject",
    "assign_newborn",
    "build_match_cost",
    "hungarian",
    "propagate_assignment",
]

PAD_COST = 1e6  # rectangular padding; must exceed any feasible real cost


@dataclass(frozen=True)
class GtObject:
    """One annotated object in one frame."""

    identity: int
    box: Box
    class_id: int = 0
    visible: bool = True


@dataclass
class Assignment:
    """One-to-one map from query slots to ground-truth identities.

    Slots absent from `pairs` are background. Slot indices are local to a
    query block (track block or detect block), not to their concatenation.
    """

    pairs: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        slots = [s for s, _ in self.pairs]
        ids = [i for _, i in self.pairs]
        if len(set(slots)) != len(slots):
            raise ValueError(f"duplicate query slots in assignment: {slots}")
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate identities in assignment: {ids}")

    def identities(self) -> set[int]:
        return {i for _, i in self.pairs}

    def slots(self) -> set[int]:
        return {s for s, _ in self.pairs}

    def identity_of(self, slot: int) -> int | None:
        for s, i in self.pairs:
            if s == slot:
                return i
        return None

    def __len__(self) -> int:
        return len(self.pairs)


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-total-cost one-to-one assignment of a rectangular cost matrix.

    Returns min(rows, cols) (row, col) pairs sorted by row. Rectangular
    inputs are padded internally to square with PAD_COST. Shortest
    augmenting path formulation with dual potentials, O(n^3); ties resolve
    deterministically toward lower column indices.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix entries must be finite")
    rows, cols = cost.shape
    n = max(rows, cols)
    a = np.full((n + 1, n + 1), PAD_COST, dtype=np.float64)
    a[1 : rows + 1, 1 : cols + 1] = cost

    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match_row = np.zeros(n + 1, dtype=np.intp)  # column -> assigned row
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        match_row[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_row[j0]
            free = ~used
            free[0] = False
            cur = a[i0, free] - u[i0] - v[free]
            idx = np.flatnonzero(free)
            better = cur < minv[idx]
            minv[idx[better]] = cur[better]
            way[idx[better]] = j0
            j1 = idx[np.argmin(minv[idx])]
            delta = minv[j1]
            u[match_row[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if match_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_row[j0] = match_row[j1]
            j0 = j1

    out = []
    for j in range(1, n + 1):
        r, c = int(match_row[j]) - 1, j - 1
        if r < rows and c < cols:
            out.append((r, c))
    out.sort()
    return out


def build_match_cost(
    pred_probs: np.ndarray,
    pred_boxes: list[Box],
    targets: list[GtObject],
    weights,
) -> np.ndarray:
    """Pairwise query/target matching cost.

    cost(q, t) = lambda_cls * (-p_q[class_t]) + lambda_l1 * l1 + lambda_giou * (-giou),
    the same weights the box/class losses use.
    """
    pred_probs = np.asarray(pred_probs, dtype=np.float64)
    m, n = pred_probs.shape[0], len(targets)
    cost = np.zeros((m, n))
    for q in range(m):
        for t, tgt in enumerate(targets):
            cost[q, t] = (
                weights.lambda_cls * -pred_probs[q, tgt.class_id]
                + weights.lambda_l1 * l1_box(pred_boxes[q], tgt.box)
                + weights.lambda_giou * -giou(pred_boxes[q], tgt.box)
            )
    return cost


def assign_newborn(
    pred_probs: np.ndarray,
    pred_boxes: list[Box],
    gt_frame: list[GtObject],
    already_tracked_ids: set[int],
    weights,
) -> Assignment:
    """Match detect queries against objects not yet carried by a track query.

    Unmatched detect queries stay background. Identities in
    `already_tracked_ids` are excluded from the candidate set entirely.
    """
    newborn = [t for t in gt_frame if t.identity not in already_tracked_ids]
    if not newborn:
        return Assignment()
    cost = build_match_cost(pred_probs, pred_boxes, newborn, weights)
    pairs = [(q, newborn[t].identity) for q, t in hungarian(cost)]
    pairs.sort()
    return Assignment(pairs)


def propagate_assignment(prev_tr: Assignment, prev_det: Assignment) -> Assignment:
    """Next frame's track-query assignment from the previous frame's results.

    The surviving track pairs (ordered by slot) come first, then the newborn
    pairs (ordered by detect slot); slots are renumbered consecutively to
    match the next frame's track-query order. Identities never change.
    """
    overlap = prev_tr.identities() & prev_det.identities()
    if overlap:
        raise ValueError(f"identities {sorted(overlap)} present in both assignments")
    ordered = sorted(prev_tr.pairs) + sorted(prev_det.pairs)
    return Assignment([(slot, ident) for slot, (_, ident) in enumerate(ordered)])
