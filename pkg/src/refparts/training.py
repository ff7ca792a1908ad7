"""Training loop: balanced sampling, polynomial LR decay, loss assembly,
per-epoch checkpoints and metrics, optional few-shot refinement."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .encoders import EncoderConfig, save_checkpoint
from .errors import InvalidInputError
from .evaluation import classification_accuracy, evaluate_segmentation
from .geometry import ShapeRecord
from .language import GameRound, PartNameSet, Vocabulary, balanced_weights
from .losses import ce_regularization, classification_loss, group_consistency_loss
from .model import EncodedShape, ListenerModel

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    lambda_ce: float = 1e-2
    lambda_coseg: float = 1e-2
    label_smoothing: float = 0.1
    use_ce_reg: bool = True
    use_coseg: bool = False  # found not to help; off by default
    ce_warmup_epochs: int = 0  # delay the exclusivity term this many epochs

    def __post_init__(self):
        if self.lambda_ce < 0 or self.lambda_coseg < 0:
            raise InvalidInputError("loss weights must be >= 0")
        if self.ce_warmup_epochs < 0:
            raise InvalidInputError("ce_warmup_epochs must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise InvalidInputError("label smoothing must be in [0, 1)")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    lr_power: float = 0.9
    seed: int = 0
    mode: str = "pn_aware"
    softmax_mode: str = "pn_then_ss"
    input_mode: str = "super_segments"
    no_normalization: bool = False
    with_global_feature: bool = False
    no_ce_reg: bool = False
    balanced_sampling: bool = True
    few_shot_shapes: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)

    def as_dict(self) -> dict:
        return asdict(self)


def polynomial_lr(lr0: float, step: int, total: int, power: float = 0.9) -> float:
    """lr0 * (1 - t/T)^power; reaches 0 at t = T."""
    frac = min(max(step / total, 0.0), 1.0)
    return lr0 * (1.0 - frac) ** power


@dataclass
class TrainData:
    shapes: dict[str, ShapeRecord]
    train_rounds: list[GameRound]
    val_rounds: list[GameRound]
    vocab: Vocabulary
    parts: PartNameSet
    category: str = "chair"


@dataclass
class TrainResult:
    model: ListenerModel
    history: list[dict]
    run_dir: Optional[Path]


def build_model(config: TrainConfig, vocab_size: int, num_parts: int) -> ListenerModel:
    enc = EncoderConfig(
        **{
            **asdict(config.encoder),
            "vocab_size": vocab_size,
            "num_parts": num_parts,
            "normalize": not config.no_normalization,
            "with_global_feature": config.with_global_feature,
        }
    )
    return ListenerModel(enc, mode=config.mode, softmax_mode=config.softmax_mode)


def _make_batch(rounds, idx, data: TrainData, cache, config: TrainConfig):
    chunk = [rounds[i] for i in idx]
    tokens = torch.stack(
        [
            torch.from_numpy(data.vocab.encode(r.utterance.tokens, config.encoder.max_tokens))
            for r in chunk
        ]
    )
    mentioned = None
    if config.mode == "pn_aware":
        mentioned = torch.tensor(
            [r.utterance.mentioned_part for r in chunk], dtype=torch.long
        )
    entries = []
    for r in chunk:
        for sid in r.shape_ids:
            if sid not in cache:
                cache[sid] = EncodedShape.from_record(data.shapes[sid], config.input_mode)
            entries.append(cache[sid])
    targets = torch.tensor([r.target_index for r in chunk], dtype=torch.long)
    return tokens, mentioned, entries, targets


def few_shot_step(
    model: ListenerModel,
    annotated: list[ShapeRecord],
    optimizer: torch.optim.Optimizer,
    input_mode: str = "super_segments",
) -> float:
    """One refinement step on fully annotated shapes.

    Per-segment cross entropy between the part distribution rows and each
    segment's ground-truth majority part (ties -> lowest part index).
    """
    if not annotated:
        raise InvalidInputError("need at least one annotated shape")
    for s in annotated:
        if s.gt is None:
            raise InvalidInputError(f"shape {s.id} has no ground-truth labels")
    if model.mode != "pn_aware":
        raise InvalidInputError("few-shot refinement applies to the part-aware mode only")
    model.train()
    losses = []
    optimizer.zero_grad()
    for shape in annotated:
        entry = EncodedShape.from_record(shape, input_mode)
        _, keys, _, _ = model.encode_segments([entry])
        queries = model.attention_encoder.all_queries()
        from .attention import attend_pn_aware

        att = attend_pn_aware(queries, keys, mode=model.softmax_mode)
        y = att.row_dist if att.row_dist is not None else att.weights
        k = len(shape.gt.part_names)
        majority = np.array(
            [
                np.argmax(
                    np.bincount(
                        shape.gt.labels[shape.segments.assignment == s], minlength=k
                    )
                )
                for s in range(shape.segments.num_segments)
            ]
        )
        target = torch.from_numpy(majority)
        losses.append(torch.nn.functional.nll_loss(torch.log(y.clamp(min=1e-12)), target))
    loss = torch.stack(losses).mean()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def train(
    config: TrainConfig,
    data: TrainData,
    run_dir=None,
    eval_shape_limit: int = 64,
    checkpoint_every_epoch: bool = True,
) -> TrainResult:
    """Run the full training schedule; deterministic under config.seed."""
    torch.manual_seed(config.seed)
    np.random.seed(config.seed % (1 << 31))
    model = build_model(config, len(data.vocab), len(data.parts.names))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    rounds = data.train_rounds
    if config.mode == "pn_aware":
        for r in rounds:
            if r.utterance.mentioned_part is None:
                raise InvalidInputError("part-aware training rounds need mentioned_part")
    weights = (
        balanced_weights(rounds, data.parts)
        if (config.balanced_sampling and config.mode == "pn_aware")
        else None
    )

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(config.as_dict(), indent=2))

    cache: dict[str, EncodedShape] = {}
    gt_shapes = [s for s in data.shapes.values() if s.gt is not None]
    eval_shapes = gt_shapes[:eval_shape_limit]
    annotated = gt_shapes[: config.few_shot_shapes] if config.few_shot_shapes else []

    history: list[dict] = []
    last_good_state = None
    for epoch in range(config.epochs):
        lr = polynomial_lr(config.lr, epoch, config.epochs, config.lr_power)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng(config.seed * 100003 + epoch)
        if weights is not None:
            order = rng.choice(len(rounds), size=len(rounds), replace=True, p=weights)
        else:
            order = rng.permutation(len(rounds))

        model.train()
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            tokens, mentioned, entries, targets = _make_batch(
                rounds, idx, data, cache, config
            )
            out = model(tokens, entries, mentioned_part=mentioned)
            loss = classification_loss(out.logits, targets, config.loss.label_smoothing)
            if (
                config.mode == "pn_aware"
                and not config.no_ce_reg
                and config.loss.use_ce_reg
                and epoch >= config.loss.ce_warmup_epochs
                and out.row_dist is not None
            ):
                # Regularize the described shape only: distractors in
                # existence/absence rounds may genuinely lack the mentioned
                # part, and pushing their part rows toward one-hot degrades
                # the attention geometry.
                tgt_rows = torch.arange(len(targets)) * 3 + targets
                loss = loss + config.loss.lambda_ce * ce_regularization(
                    out.row_dist[tgt_rows], out.segment_mask[tgt_rows]
                )
            if config.loss.use_coseg and out.row_dist is not None:
                flat_parts = []
                for j, (a, b) in enumerate(out.flat_slices):
                    w = out.row_dist[j, : b - a]
                    flat_parts.append(w.argmax(dim=1))
                loss = loss + config.loss.lambda_coseg * group_consistency_loss(
                    out.descriptors, torch.cat(flat_parts)
                )
            if not torch.isfinite(loss):
                log.error("loss diverged at epoch %d; aborting with last checkpoint", epoch)
                if last_good_state is not None:
                    model.load_state_dict(last_good_state)
                return TrainResult(model=model, history=history, run_dir=run_dir)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))

        if annotated:
            few_shot_step(model, annotated, optimizer, input_mode=config.input_mode)

        val_acc = classification_accuracy(
            model,
            data.val_rounds,
            data.shapes,
            data.vocab,
            input_mode=config.input_mode,
            entry_cache=cache,
        )
        report = evaluate_segmentation(
            model,
            eval_shapes,
            data.parts.names,
            vocab=data.vocab,
            input_mode=config.input_mode,
            category=data.category,
        )
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(epoch_losses)) if epoch_losses else None,
            "val_accuracy": val_acc,
            "val_miou": report.average_miou,
        }
        history.append(record)
        last_good_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if run_dir is not None:
            with open(run_dir / "metrics.jsonl", "a") as f:
                f.write(json.dumps(record) + "\n")
            if checkpoint_every_epoch or epoch == config.epochs - 1:
                save_checkpoint(run_dir / f"checkpoint_{epoch:03d}", model, model.config)
    return TrainResult(model=model, history=history, run_dir=run_dir)
