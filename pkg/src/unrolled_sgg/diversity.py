"""Relationship prediction with a group-wise l2,1 diversity bonus."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Node

# grouping strategies: per image, per (subject, object) category pair across
# the batch, and the latter with groups below ``min_group_size`` dropped
GROUPINGS = ("image", "batch", "batch_pruned")


class CategoryLookupError(KeyError):
    pass


@dataclass
class FusionParams:
    W_x: Node  # d x d
    W_y: Node  # d x d
    W_r: Node  # R x d


@dataclass
class FrequencyBias:
    """Log relationship frequencies per (subject, object) category pair.

    ``table`` has shape ``(O, O, R)``.
    """

    table: np.ndarray

    @property
    def num_object_cats(self) -> int:
        return self.table.shape[0]

    @property
    def num_rel_cats(self) -> int:
        return self.table.shape[2]

    @classmethod
    def from_triplets(cls, subj_cats, obj_cats, rel_labels, num_object_cats: int, num_rel_cats: int):
        """Add-one smoothed log P(rel | subject cat, object cat)."""
        counts = np.ones((num_object_cats, num_object_cats, num_rel_cats))
        np.add.at(counts, (np.asarray(subj_cats), np.asarray(obj_cats), np.asarray(rel_labels)), 1.0)
        return cls(np.log(counts / counts.sum(axis=2, keepdims=True)))

    @classmethod
    def zeros(cls, num_object_cats: int, num_rel_cats: int):
        return cls(np.zeros((num_object_cats, num_object_cats, num_rel_cats)))

    def flat(self) -> np.ndarray:
        O, _, R = self.table.shape
        return self.table.reshape(O * O, R)

    def keys(self, subj_cats, obj_cats) -> np.ndarray:
        """Row index into :meth:`flat` for each (subject, object) pair."""
        s = np.asarray(subj_cats, dtype=np.int64)
        o = np.asarray(obj_cats, dtype=np.int64)
        O = self.num_object_cats
        bad = (s < 0) | (s >= O) | (o < 0) | (o >= O)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise CategoryLookupError(f"no frequency entry for categories ({s[i]}, {o[i]})")
        return s * O + o


@dataclass
class PredictionMatrix:
    P: np.ndarray
    pair_index: list
    group_key: list


@dataclass
class GroupPartition:
    groups: "OrderedDict[tuple, list[int]]"
    min_group_size: int = 3
    dropped: list = field(default_factory=list)

    @property
    def num_groups(self) -> int:
        return len(self.groups)


def fuse(x: Node, y: Node, params: FusionParams) -> Node:
    """``relu(Wx x + Wy y) - (Wx x - Wy y)^2`` on row vectors."""
    if x.shape != y.shape:
        raise DimensionError(f"fuse: {x.shape} vs {y.shape}")
    wx = x @ ad.transpose(params.W_x)
    wy = y @ ad.transpose(params.W_y)
    diff = wx - wy
    return ad.relu(wx + wy) - diff * diff


def relationship_logits(
    Y_hat: Node,
    union_pairs: np.ndarray,
    subj: Sequence[int],
    obj: Sequence[int],
    bias_rows: Node,
    params: FusionParams,
) -> Node:
    """``W_r((y_s * y_o) * u_so) + f_so`` for each sampled pair.

    ``bias_rows`` holds the frequency-bias row of every pair.
    """
    ys = ad.gather_rows(Y_hat, subj)
    yo = ad.gather_rows(Y_hat, obj)
    u = Y_hat.tape.const(union_pairs)
    if u.shape != ys.shape:
        raise DimensionError(f"union features {u.shape} vs pair features {ys.shape}")
    fused = fuse(fuse(ys, yo, params), u, params)
    return fused @ ad.transpose(params.W_r) + bias_rows


def relationship_scores(
    Y_hat: Node,
    U: np.ndarray,
    pairs: Sequence[tuple[int, int]],
    labels: Sequence[int],
    params: FusionParams,
    bias: FrequencyBias,
) -> tuple[Node, PredictionMatrix]:
    """Score every listed (subject, object) pair; returns logits node and P."""
    pairs = [(int(s), int(o)) for s, o in pairs]
    if not pairs:
        raise ContractError("no node pairs to score")
    subj = np.array([s for s, _ in pairs])
    obj = np.array([o for _, o in pairs])
    labels = np.asarray(labels)
    keys = bias.keys(labels[subj], labels[obj])
    U = np.asarray(U, dtype=np.float64)
    union_pairs = U[subj, obj]
    bias_rows = Y_hat.tape.const(bias.flat()[keys])
    logits = relationship_logits(Y_hat, union_pairs, subj, obj, bias_rows, params)
    P = ad.row_softmax(logits).value
    group_key = [(int(labels[s]), int(labels[o])) for s, o in pairs]
    return logits, PredictionMatrix(P, pairs, group_key)


def l21_norm(P) -> float:
    """Sum over columns of the column l2 norms."""
    P = np.asarray(P, dtype=np.float64)
    return float(np.sqrt((P**2).sum(axis=0)).sum())


def l21_norm_node(P: Node) -> Node:
    return ad.sum_all(ad.sqrt(ad.column_sums(P * P)))


def partition_groups(pair_keys, image_of=None, variant: str = "batch_pruned", min_group_size: int = 3) -> GroupPartition:
    """Group scored rows for the diversity bonus.

    ``pair_keys`` are (subject category, object category) per row;
    ``image_of`` the scene id per row (needed for ``variant="image"``).
    Group order follows first appearance, so the result is deterministic.
    """
    if variant not in GROUPINGS:
        raise ValueError(f"unknown grouping {variant!r}; choose from {GROUPINGS}")
    if variant == "image":
        if image_of is None:
            raise ContractError("image grouping needs image ids")
        keys = [("image", k) for k in image_of]
    else:
        keys = [tuple(k) for k in pair_keys]
    groups: OrderedDict = OrderedDict()
    for row, key in enumerate(keys):
        groups.setdefault(key, []).append(row)
    dropped = []
    if variant == "batch_pruned":
        for key in [k for k, rows in groups.items() if len(rows) < min_group_size]:
            dropped.append(key)
            del groups[key]
    return GroupPartition(groups, min_group_size, dropped)


def cross_entropy_sum(logits: Node, targets: Sequence[int]) -> Node:
    return -ad.sum_all(ad.pick(ad.row_log_softmax(logits), targets))


def diversity_bonus(P: Node, partition: GroupPartition) -> Node | None:
    """``(1/B) sum_b ||P_b||_{2,1} / N_b``, or None when there are no groups."""
    terms = []
    for rows in partition.groups.values():
        Pb = ad.gather_rows(P, rows)
        terms.append(ad.scale(l21_norm_node(Pb), 1.0 / len(rows)))
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ad.scale(total, 1.0 / len(terms))


def diversity_loss(logits: Node, partition: GroupPartition, tau: float, rel_targets: Sequence[int]) -> Node:
    """Mean relationship cross-entropy minus ``tau`` times the group bonus."""
    if logits.shape[0] == 0:
        raise ContractError("empty batch")
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    loss = ad.scale(cross_entropy_sum(logits, rel_targets), 1.0 / logits.shape[0])
    if tau > 0:
        bonus = diversity_bonus(ad.row_softmax(logits), partition)
        if bonus is not None:
            loss = loss - ad.scale(bonus, tau)
    return loss


def total_loss(node_logits: Node, node_targets: Sequence[int], rel_loss: Node, n_b: int) -> Node:
    if n_b <= 0:
        raise ContractError("n_b must be positive")
    return ad.scale(cross_entropy_sum(node_logits, node_targets), 1.0 / n_b) + rel_loss


def infer(T, P) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise argmax of node and relationship probabilities (ties -> lowest index)."""
    return np.argmax(np.asarray(T), axis=1), np.argmax(np.asarray(P), axis=1)
