"""Normalized cross-attention from language queries to super-segments.

The logits are plain dot products of unit-norm queries and keys: no
1/sqrt(d) scaling and no temperature. Part-aware attention applies the
softmax twice, over part names first (rows, producing Y) and then over
super-segments (columns, producing W); the alternative orders exist only
as ablation switches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import InvalidInputError
from .geometry import SuperSegmentSet

SOFTMAX_MODES = ("pn_then_ss", "ss_only", "pn_only", "ss_then_pn")


def _check_finite(t: torch.Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise InvalidInputError(f"{name} contains NaN or Inf")


def attend_pn_agnostic(query: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    """Softmax over segments of q . k_i, for a single utterance query."""
    _check_finite(query, "query")
    _check_finite(keys, "keys")
    if keys.shape[0] < 1:
        raise InvalidInputError("need at least one segment")
    logits = keys @ query
    return torch.softmax(logits, dim=0)


@dataclass
class PartAttention:
    """Output of part-aware attention.

    ``weights`` are the final attention weights used for aggregation and
    segmentation. ``row_dist`` is the row-stochastic matrix (each segment's
    distribution over parts) that the cross-entropy regularizer consumes;
    it is None for the ``ss_only`` ablation, which never normalizes over
    parts.
    """

    weights: torch.Tensor
    row_dist: Optional[torch.Tensor]


def attend_pn_aware(
    queries: torch.Tensor, keys: torch.Tensor, mode: str = "pn_then_ss"
) -> PartAttention:
    """Double-softmax attention over an S x K logit matrix.

    X_ik = q_k . k_i; in the default mode Y = softmax over parts of each
    row, W = softmax over segments of each Y column.
    """
    if mode not in SOFTMAX_MODES:
        raise InvalidInputError(f"unknown softmax mode {mode!r}")
    if queries.shape[0] < 2:
        raise InvalidInputError("part-aware attention needs K >= 2 queries")
    if keys.shape[0] < 1:
        raise InvalidInputError("need at least one segment")
    _check_finite(queries, "queries")
    _check_finite(keys, "keys")
    x = keys @ queries.T  # S x K
    if mode == "pn_then_ss":
        y = torch.softmax(x, dim=1)
        return PartAttention(weights=torch.softmax(y, dim=0), row_dist=y)
    if mode == "pn_only":
        y = torch.softmax(x, dim=1)
        return PartAttention(weights=y, row_dist=y)
    if mode == "ss_only":
        return PartAttention(weights=torch.softmax(x, dim=0), row_dist=None)
    # ss_then_pn: reverse order; the final row softmax doubles as row_dist.
    col = torch.softmax(x, dim=0)
    y = torch.softmax(col, dim=1)
    return PartAttention(weights=y, row_dist=y)


def aggregate(values: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted mean of value rows with simplex weights (pre-MLP aggregate)."""
    if values.shape[0] != weights.shape[0]:
        raise InvalidInputError("values and weights disagree on segment count")
    return weights @ values


@dataclass
class Segmentation:
    """Per-super-segment part ids and their per-point expansion."""

    segment_parts: np.ndarray
    point_parts: np.ndarray


def extract_segmentation(attention: np.ndarray, segments: SuperSegmentSet) -> Segmentation:
    """Label each segment with its argmax part column (ties -> lowest index)."""
    att = np.asarray(
        attention.detach().cpu().numpy() if isinstance(attention, torch.Tensor) else attention
    )
    if att.ndim != 2 or att.shape[1] < 2:
        raise InvalidInputError("attention must be S x K with K >= 2")
    if att.shape[0] != segments.num_segments:
        raise InvalidInputError("attention rows must match segment count")
    segment_parts = np.argmax(att, axis=1).astype(np.int64)
    point_parts = segment_parts[segments.assignment]
    return Segmentation(segment_parts=segment_parts, point_parts=point_parts)
