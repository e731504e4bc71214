"""Training objectives for the retrieval path."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from .diffmath import (
    AffineParams,
    InvalidArgument,
    Tensor,
    abs_,
    as_tensor,
    init_mlp,
    l2_dist,
    log,
    mean,
    mlp_forward,
    relu,
    sum_,
)
from .scenegraph import BBox

GT_LOG_EPS = 1e-12
IN_SCOPE = {"lambda_sel_gt": "sel_gt", "lambda_sel_occur": "sel_occur", "lambda_bbx": "bbx"}


class UnsupportedTerm(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"step {step}: {message}")


@dataclass(frozen=True)
class LossWeights:
    lambda_sel_gt: float = 0.1
    lambda_sel_occur: float = 0.001
    lambda_bbx: float = 10.0
    # image-generation terms; accepted for config compatibility, must stay 0
    lambda_img_adv: float = 0.0
    lambda_img_recon: float = 0.0
    lambda_img_p: float = 0.0
    lambda_obj_adv: float = 0.0
    lambda_obj_ac: float = 0.0
    lambda_obj_p: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value < 0:
                raise InvalidArgument(f"{f.name} must be nonnegative")
            if f.name not in IN_SCOPE and value != 0:
                raise UnsupportedTerm(f"{f.name} needs the image generator, which is not available")


@dataclass
class CoocParams:
    layers: list[AffineParams]
    margin: float = 0.2

    def __post_init__(self):
        if not self.margin > 0:
            raise InvalidArgument("triplet margin must be positive")


def init_cooc(rng: np.random.Generator, dims: Sequence[int], margin: float = 0.2) -> CoocParams:
    return CoocParams(init_mlp(rng, dims), margin)


def cooc_embed(params: CoocParams, x) -> Tensor:
    return mlp_forward(params.layers, x)


def selection_gt_loss(selection, gt_indices: Sequence[int | None], skip_groups: Sequence[int] = ()) -> Tensor:
    """Mean negative log score of each group's ground-truth candidate.

    ``gt_indices`` holds one flat index per group; groups listed in
    ``skip_groups`` (e.g. the one whose GT seeded the query) are left out.
    """
    scores = as_tensor(getattr(selection, "scores", selection))
    n_groups = len(selection.selected_hard) if hasattr(selection, "selected_hard") else len(gt_indices)
    if len(gt_indices) != n_groups or any(i is None for i in gt_indices):
        raise InvalidArgument("a ground-truth index is required for every group")
    keep = [int(i) for g, i in enumerate(gt_indices) if g not in set(skip_groups)]
    if not keep:
        return Tensor(0.0)
    if any(not 0 <= i < scores.shape[0] for i in keep):
        raise InvalidArgument("ground-truth index out of range")
    return -mean(log(scores[np.array(keep)] + GT_LOG_EPS))


def triplet_loss(params: CoocParams, anchor, positive, negative) -> Tensor:
    """Hinge ``max(0, d(F a, F p) - d(F a, F n) + margin)``; batches are averaged."""
    fa = cooc_embed(params, anchor)
    fp = cooc_embed(params, positive)
    fn = cooc_embed(params, negative)
    hinge = relu(l2_dist(fa, fp) - l2_dist(fa, fn) + params.margin)
    return mean(hinge) if hinge.ndim else hinge


def cooccurrence_loss(params: CoocParams, selected_features) -> Tensor:
    """Sum of pairwise embedding distances over unordered pairs of selected patches."""
    feats = as_tensor(selected_features)
    n = feats.shape[0]
    if n < 2:
        return Tensor(0.0)
    emb = cooc_embed(params, feats)
    i, j = np.triu_indices(n, k=1)
    return sum_(l2_dist(emb[i], emb[j]))


def _boxes(boxes) -> Tensor:
    if isinstance(boxes, Tensor):
        return boxes
    return Tensor([b.as_tuple() if isinstance(b, BBox) else b for b in boxes])


def bbox_l1_loss(predicted, target) -> Tensor:
    """Sum over objects of the coordinate-wise absolute box error."""
    p, t = _boxes(predicted), _boxes(target)
    if p.shape != t.shape:
        raise InvalidArgument(f"box lists differ in shape: {p.shape} vs {t.shape}")
    return sum_(abs_(p - t))


def total_retrieval_loss(weights: LossWeights, parts: Mapping[str, Tensor]) -> Tensor:
    """Weighted sum of the in-scope terms ``sel_gt``, ``sel_occur``, ``bbx``."""
    total = Tensor(0.0)
    for attr, key in IN_SCOPE.items():
        w = getattr(weights, attr)
        part = parts.get(key)
        if part is None:
            if w != 0:
                raise InvalidArgument(f"missing loss part {key!r}")
            continue
        v = float(as_tensor(part).value)
        if not math.isfinite(v):
            raise TrainingDiverged(f"loss part {key!r} is {v}")
        total = total + as_tensor(part) * w
    return total
