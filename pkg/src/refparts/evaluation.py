"""Segmentation and classification evaluation.

IoU conventions follow standard part-segmentation practice: a part that is
empty in both prediction and ground truth scores 1, a part predicted where
it does not exist (or missed where it does) scores 0, and the instance
mIoU is the mean over all K parts, averaged afterwards over the corpus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .attention import Segmentation
from .errors import InvalidInputError
from .geometry import PartLabels, ShapeRecord, SuperSegmentSet
from .model import EncodedShape, ListenerModel


def part_iou(pred_points: set | np.ndarray, gt_points: set | np.ndarray) -> float:
    """|pred n gt| / |pred u gt| with both-empty = 1 and one-empty = 0."""
    pred = set(np.asarray(list(pred_points)).tolist()) if not isinstance(pred_points, set) else pred_points
    gt = set(np.asarray(list(gt_points)).tolist()) if not isinstance(gt_points, set) else gt_points
    if not pred and not gt:
        return 1.0
    if not pred or not gt:
        return 0.0
    return len(pred & gt) / len(pred | gt)


def instance_miou(
    point_parts: np.ndarray,
    gt: PartLabels,
    num_parts: int,
    average_set: str = "all",
) -> float:
    """Mean part IoU of one shape's per-point prediction.

    ``average_set='all'`` averages over all K parts (pinned default);
    ``'present'`` averages only over parts occurring in gt or prediction.
    """
    point_parts = np.asarray(point_parts)
    ious = []
    for k in range(num_parts):
        pred = point_parts == k
        true = gt.labels == k
        if average_set == "present" and not pred.any() and not true.any():
            continue
        inter = np.count_nonzero(pred & true)
        union = np.count_nonzero(pred | true)
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(ious)) if ious else 1.0


@dataclass
class IoUReport:
    part_names: list[str]
    per_part_iou: np.ndarray          # corpus mean IoU per part
    per_instance_miou: np.ndarray     # one mIoU per shape
    average_miou: float
    cross_part: Optional[np.ndarray] = None

    def as_dict(self) -> dict:
        d = {
            "part_names": self.part_names,
            "per_part_iou": self.per_part_iou.tolist(),
            "average_miou": self.average_miou,
            "per_instance_miou": self.per_instance_miou.tolist(),
        }
        if self.cross_part is not None:
            d["cross_part_miou"] = self.cross_part.tolist()
        return d

    def as_table(self) -> str:
        head = ["part".ljust(10)] + [n.ljust(8) for n in self.part_names] + ["avg"]
        row = ["mIoU".ljust(10)] + [
            f"{v * 100:6.1f}  " for v in self.per_part_iou
        ] + [f"{self.average_miou * 100:6.1f}"]
        return "".join(head) + "\n" + "".join(row)


def segmentation_report(
    segmentations: list[Segmentation],
    shapes: list[ShapeRecord],
    part_names: list[str],
    average_set: str = "all",
) -> IoUReport:
    k = len(part_names)
    per_instance = []
    per_part = np.zeros(k)
    for seg, shape in zip(segmentations, shapes):
        per_instance.append(instance_miou(seg.point_parts, shape.gt, k, average_set))
        for part in range(k):
            pred = seg.point_parts == part
            true = shape.gt.labels == part
            union = np.count_nonzero(pred | true)
            per_part[part] += 1.0 if union == 0 else np.count_nonzero(pred & true) / union
    per_instance = np.asarray(per_instance)
    return IoUReport(
        part_names=part_names,
        per_part_iou=per_part / max(len(shapes), 1),
        per_instance_miou=per_instance,
        average_miou=float(per_instance.mean()) if len(per_instance) else 0.0,
    )


def cross_part_miou(
    segmentations: list[Segmentation],
    shapes: list[ShapeRecord],
    pred_part_names: list[str],
    gt_part_names: list[str],
) -> np.ndarray:
    """K_pred x K_gt matrix of corpus-average IoU between predicted part k
    and ground-truth part k' (used for out-of-distribution transfer)."""
    out = np.zeros((len(pred_part_names), len(gt_part_names)))
    for seg, shape in zip(segmentations, shapes):
        for kp in range(len(pred_part_names)):
            pred = seg.point_parts == kp
            for kg in range(len(gt_part_names)):
                true = shape.gt.labels == kg
                union = np.count_nonzero(pred | true)
                out[kp, kg] += 1.0 if union == 0 else np.count_nonzero(pred & true) / union
    return out / max(len(shapes), 1)


def upper_bound_segmentation(segments: SuperSegmentSet, gt: PartLabels) -> Segmentation:
    """Best segment-level labeling: majority gt part per segment (ties ->
    lowest part index)."""
    k = len(gt.part_names)
    seg_parts = np.empty(segments.num_segments, dtype=np.int64)
    for s in range(segments.num_segments):
        votes = np.bincount(gt.labels[segments.assignment == s], minlength=k)
        seg_parts[s] = int(np.argmax(votes))
    return Segmentation(segment_parts=seg_parts, point_parts=seg_parts[segments.assignment])


def point_projection_baseline(
    point_predictions: np.ndarray, segments: SuperSegmentSet, num_parts: int
) -> Segmentation:
    """Project raw per-point predictions onto segments by majority vote."""
    point_predictions = np.asarray(point_predictions)
    seg_parts = np.empty(segments.num_segments, dtype=np.int64)
    for s in range(segments.num_segments):
        votes = np.bincount(point_predictions[segments.assignment == s], minlength=num_parts)
        seg_parts[s] = int(np.argmax(votes))
    return Segmentation(segment_parts=seg_parts, point_parts=seg_parts[segments.assignment])


def baseline_attention(mode: str, num_segments: int, num_parts: int, seed: int = 0) -> np.ndarray:
    """Uniform or random S x K attention columns on the segment simplex."""
    if num_segments < 1 or num_parts < 1:
        raise InvalidInputError("need at least one segment and one part")
    if mode == "uniform":
        return np.full((num_segments, num_parts), 1.0 / num_segments)
    if mode == "random":
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((num_segments, num_parts))
        e = np.exp(logits - logits.max(axis=0, keepdims=True))
        return e / e.sum(axis=0, keepdims=True)
    raise InvalidInputError(f"unknown baseline attention mode {mode!r}")


def classification_accuracy(
    model: ListenerModel,
    rounds,
    shapes: dict[str, ShapeRecord],
    vocab,
    input_mode: str = "super_segments",
    attention_override: Optional[str] = None,
    override_seed: int = 0,
    batch_size: int = 64,
    entry_cache: Optional[dict] = None,
) -> float:
    """Fraction of rounds where the listener's argmax hits the target."""
    model.eval()
    cache = entry_cache if entry_cache is not None else {}
    correct = 0
    with torch.no_grad():
        for start in range(0, len(rounds), batch_size):
            chunk = rounds[start : start + batch_size]
            tokens = torch.stack(
                [torch.from_numpy(vocab.encode(r.utterance.tokens, model.config.max_tokens)) for r in chunk]
            )
            mentioned = None
            if model.mode == "pn_aware":
                mentioned = torch.tensor(
                    [r.utterance.mentioned_part or 0 for r in chunk], dtype=torch.long
                )
            entries = []
            for r in chunk:
                for sid in r.shape_ids:
                    if sid not in cache:
                        cache[sid] = EncodedShape.from_record(shapes[sid], input_mode)
                    entries.append(cache[sid])
            out = model(
                tokens,
                entries,
                mentioned_part=mentioned,
                attention_override=attention_override,
                override_seed=override_seed + start,
            )
            pred = out.logits.argmax(dim=1)
            targets = torch.tensor([r.target_index for r in chunk])
            correct += int((pred == targets).sum())
    return correct / max(len(rounds), 1)


def evaluate_segmentation(
    model: ListenerModel,
    shapes: list[ShapeRecord],
    part_names: list[str],
    vocab=None,
    input_mode: str = "super_segments",
    average_set: str = "all",
    category: str = "chair",
) -> IoUReport:
    model.eval()
    segs = [
        model.segment_shape(
            s, vocab=vocab, part_names=part_names, input_mode=input_mode, category=category
        )
        if model.mode == "pn_agnostic"
        else model.segment_shape(s, input_mode=input_mode)
        for s in shapes
    ]
    return segmentation_report(segs, shapes, part_names, average_set=average_set)


def export_word_attention(model: ListenerModel, tokens: list[str], vocab) -> dict:
    """Token-level attention weights of both utterance encoders as JSON-able
    records (the part-aware attention encoder has no word attention)."""
    ids = torch.from_numpy(vocab.encode(tokens, model.config.max_tokens)).unsqueeze(0)
    n = len(tokens)
    model.eval()
    out = {"tokens": tokens}
    with torch.no_grad():
        _, cls_attn = model.classification_encoder(ids)
        out["classification_weights"] = cls_attn.squeeze(0)[:n].tolist()
        if model.mode == "pn_agnostic":
            _, att_attn = model.attention_encoder(ids)
            out["attention_weights"] = att_attn.squeeze(0)[:n].tolist()
    return out


def write_report(path, report: IoUReport, extra: Optional[dict] = None) -> None:
    d = report.as_dict()
    if extra:
        d.update(extra)
    with open(path, "w") as f:
        json.dump(d, f, indent=2)
