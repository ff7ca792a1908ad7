"""The listener: encoders + cross-attention + classification head.

One model instance covers both training regimes. In the part-agnostic
regime the attention query is the utterance feature and attention is a
single softmax over segments; in the part-aware regime the queries are the
learned part-name embeddings and the double softmax applies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .attention import PartAttention, attend_pn_aware, extract_segmentation
from .encoders import EncoderConfig, PartNameEncoder, SegmentEncoder, UtteranceEncoder
from .errors import InvalidInputError
from .geometry import ShapeRecord, SuperSegmentSet
from .language import Vocabulary, template_query

MODES = ("pn_agnostic", "pn_aware")
INPUT_MODES = ("super_segments", "raw_points")


@dataclass
class EncodedShape:
    """Per-shape tensors ready for the segment encoder.

    ``points`` stacks the (capped) point lists of all segments;
    ``segment_ids`` maps each row to its local segment index.
    """

    shape_id: str
    points: torch.Tensor
    segment_ids: torch.Tensor
    num_segments: int

    @classmethod
    def from_record(cls, record: ShapeRecord, input_mode: str = "super_segments") -> "EncodedShape":
        if input_mode not in INPUT_MODES:
            raise InvalidInputError(f"unknown input mode {input_mode!r}")
        pts = torch.from_numpy(record.cloud.points)
        if input_mode == "raw_points":
            # Every point is its own singleton segment; same code path as
            # super-segments, used by the points-only baseline.
            return cls(
                shape_id=record.id,
                points=pts,
                segment_ids=torch.arange(len(record.cloud)),
                num_segments=len(record.cloud),
            )
        idx = np.concatenate(record.segments.per_segment_points)
        seg_ids = np.concatenate(
            [
                np.full(len(p), s, dtype=np.int64)
                for s, p in enumerate(record.segments.per_segment_points)
            ]
        )
        return cls(
            shape_id=record.id,
            points=pts[torch.from_numpy(idx)],
            segment_ids=torch.from_numpy(seg_ids),
            num_segments=record.segments.num_segments,
        )


@dataclass
class ListenerOutput:
    logits: torch.Tensor            # (B, 3)
    attention: torch.Tensor         # (3B, S_max) selected weights, zero-padded
    row_dist: Optional[torch.Tensor]  # (3B, S_max, K) Y for the CE regularizer
    segment_mask: torch.Tensor      # (3B, S_max) True on real segments
    descriptors: torch.Tensor       # (total_S, d) flat per-segment descriptors
    flat_slices: list = field(default_factory=list)  # per-shape (start, end) in descriptors


class ListenerModel(nn.Module):
    def __init__(self, config: EncoderConfig, mode: str = "pn_aware",
                 softmax_mode: str = "pn_then_ss"):
        super().__init__()
        if mode not in MODES:
            raise InvalidInputError(f"unknown mode {mode!r}")
        self.mode = mode
        self.softmax_mode = softmax_mode
        self.config = config
        d = config.attention_dim
        self.segment_encoder = SegmentEncoder(config)
        self.classification_encoder = UtteranceEncoder(config, normalize_output=False)
        if mode == "pn_agnostic":
            self.attention_encoder = UtteranceEncoder(config, normalize_output=True)
        else:
            self.attention_encoder = PartNameEncoder(config)
        # Post-attention head: MLP then LayerNorm on the aggregate.
        self.aggregate_head = nn.Sequential(
            nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d), nn.LayerNorm(d)
        )
        self.listener_head = nn.Sequential(
            nn.Linear(2 * d, 64), nn.ReLU(), nn.Linear(64, 1)
        )

    # ------------------------------------------------------------------
    # batched encoding
    # ------------------------------------------------------------------

    def encode_segments(self, entries: list[EncodedShape]):
        """Flat per-segment descriptors, keys, values for a list of shapes.

        Returns (descriptors, keys, values, slices) where ``slices[j]`` is
        the (start, end) row range of shape j. Shapes repeated across
        rounds are encoded once.
        """
        unique: dict[str, int] = {}
        uniq_entries: list[EncodedShape] = []
        for e in entries:
            if e.shape_id not in unique:
                unique[e.shape_id] = len(uniq_entries)
                uniq_entries.append(e)
        points = torch.cat([e.points for e in uniq_entries])
        offsets = np.cumsum([0] + [e.num_segments for e in uniq_entries])
        seg_ids = torch.cat(
            [e.segment_ids + int(offsets[j]) for j, e in enumerate(uniq_entries)]
        )
        total = int(offsets[-1])
        flat = self.segment_encoder.descriptors(points, seg_ids, total)
        uniq_slices = [(int(offsets[j]), int(offsets[j + 1])) for j in range(len(uniq_entries))]
        if len(uniq_entries) == len(entries):
            descriptors, slices = flat, uniq_slices
        else:
            # Re-expand to one row block per requested entry.
            rows = []
            slices = []
            cursor = 0
            for e in entries:
                a, b = uniq_slices[unique[e.shape_id]]
                rows.append(flat[a:b])
                slices.append((cursor, cursor + (b - a)))
                cursor += b - a
            descriptors = torch.cat(rows)
        keys, values = self.segment_encoder.keys_values(descriptors, shape_slices=slices)
        return descriptors, keys, values, slices

    @staticmethod
    def _pad(flat: torch.Tensor, slices) -> tuple[torch.Tensor, torch.Tensor]:
        """Stack variable-length shape rows into (J, S_max, d) plus a mask."""
        s_max = max(b - a for a, b in slices)
        j = len(slices)
        out = flat.new_zeros((j, s_max, flat.shape[1]))
        mask = torch.zeros((j, s_max), dtype=torch.bool)
        for row, (a, b) in enumerate(slices):
            out[row, : b - a] = flat[a:b]
            mask[row, : b - a] = True
        return out, mask

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def forward(
        self,
        token_ids: torch.Tensor,
        entries: list[EncodedShape],
        mentioned_part: Optional[torch.Tensor] = None,
        attention_override: Optional[str] = None,
        override_seed: int = 0,
    ) -> ListenerOutput:
        """Score a batch of rounds.

        ``entries`` holds 3 shapes per round in round order (target slot
        included). ``attention_override`` in {'uniform', 'random'} replaces
        the learned attention weights at evaluation time.
        """
        b = token_ids.shape[0]
        if len(entries) != 3 * b:
            raise InvalidInputError("need exactly 3 encoded shapes per round")
        descriptors, keys_flat, values_flat, slices = self.encode_segments(entries)
        keys, mask = self._pad(keys_flat, slices)
        values, _ = self._pad(values_flat, slices)
        cls_feat, _ = self.classification_encoder(token_ids)
        neg_inf = float("-inf")

        row_dist = None
        if self.mode == "pn_agnostic":
            query, _ = self.attention_encoder(token_ids)
            q3 = query.repeat_interleave(3, dim=0)
            logits = (keys * q3.unsqueeze(1)).sum(dim=2)
            logits = logits.masked_fill(~mask, neg_inf)
            weights = torch.softmax(logits, dim=1)
        else:
            if mentioned_part is None:
                raise InvalidInputError("part-aware forward needs mentioned_part")
            queries = self.attention_encoder.all_queries()  # (K, d)
            x = keys @ queries.T  # (3B, S_max, K)
            weights_k, row_dist = self._part_softmax(x, mask)
            k3 = mentioned_part.repeat_interleave(3)
            weights = weights_k[torch.arange(3 * b), :, k3]
            weights = weights * mask

        if attention_override is not None:
            weights = _override_weights(weights, mask, attention_override, override_seed)

        agg = torch.bmm(weights.unsqueeze(1), values).squeeze(1)
        agg = self.aggregate_head(agg)
        joint = torch.cat([cls_feat.repeat_interleave(3, dim=0), agg], dim=1)
        logits3 = self.listener_head(joint).reshape(b, 3)
        return ListenerOutput(
            logits=logits3,
            attention=weights,
            row_dist=row_dist,
            segment_mask=mask,
            descriptors=descriptors,
            flat_slices=slices,
        )

    def _part_softmax(self, x: torch.Tensor, mask: torch.Tensor):
        """Batched, padding-aware version of the double softmax modes."""
        neg_inf = float("-inf")
        pad = ~mask.unsqueeze(2)
        if self.softmax_mode == "pn_then_ss":
            y = torch.softmax(x, dim=2)
            w = torch.softmax(y.masked_fill(pad, neg_inf), dim=1)
            return w, y.masked_fill(pad, 0.0)
        if self.softmax_mode == "pn_only":
            y = torch.softmax(x, dim=2).masked_fill(pad, 0.0)
            return y, y
        if self.softmax_mode == "ss_only":
            return torch.softmax(x.masked_fill(pad, neg_inf), dim=1), None
        if self.softmax_mode == "ss_then_pn":
            col = torch.softmax(x.masked_fill(pad, neg_inf), dim=1)
            y = torch.softmax(col.masked_fill(pad, neg_inf), dim=2).masked_fill(pad, 0.0)
            return y, y
        raise InvalidInputError(f"unknown softmax mode {self.softmax_mode!r}")

    # ------------------------------------------------------------------
    # single-shape segmentation
    # ------------------------------------------------------------------

    def attention_matrix(
        self, record: ShapeRecord, vocab: Optional[Vocabulary] = None,
        part_names: Optional[list[str]] = None, input_mode: str = "super_segments",
        category: str = "chair",
    ) -> torch.Tensor:
        """S x K attention used for segmentation extraction.

        Part-aware: final weights of the double softmax for all part
        queries. Part-agnostic: one single-softmax attention vector per
        template expression ("a <category> with <part>"), stacked.
        """
        entry = EncodedShape.from_record(record, input_mode=input_mode)
        _, keys, _, _ = self.encode_segments([entry])
        if self.mode == "pn_aware":
            queries = self.attention_encoder.all_queries()
            return attend_pn_aware(queries, keys, mode=self.softmax_mode).weights
        if vocab is None or part_names is None:
            raise InvalidInputError("part-agnostic segmentation needs vocab and part names")
        cols = []
        for name in part_names:
            ids = torch.from_numpy(
                vocab.encode(template_query(name, category=category), self.config.max_tokens)
            ).unsqueeze(0)
            query, _ = self.attention_encoder(ids)
            logits = keys @ query.squeeze(0)
            cols.append(torch.softmax(logits, dim=0))
        return torch.stack(cols, dim=1)

    def segment_shape(self, record: ShapeRecord, **kwargs):
        with torch.no_grad():
            att = self.attention_matrix(record, **kwargs)
        segments = record.segments
        if kwargs.get("input_mode", "super_segments") == "raw_points":
            # Attention rows are per point in this mode; extract over a
            # singleton partition instead of the stored segments.
            segments = SuperSegmentSet.from_assignment(
                record.id, np.arange(len(record.cloud))
            )
        return extract_segmentation(att.numpy(), segments)


def _override_weights(weights, mask, kind: str, seed: int) -> torch.Tensor:
    counts = mask.sum(dim=1, keepdim=True).clamp(min=1)
    if kind == "uniform":
        return mask.float() / counts
    if kind == "random":
        gen = torch.Generator().manual_seed(seed)
        logits = torch.randn(weights.shape, generator=gen)
        logits = logits.masked_fill(~mask, float("-inf"))
        return torch.softmax(logits, dim=1)
    raise InvalidInputError(f"unknown attention override {kind!r}")
