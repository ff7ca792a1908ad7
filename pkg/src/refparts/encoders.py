"""Feature encoders: super-segment geometry, utterances, and part names.

The segment encoder is a pared-down point MLP: shared per-point linear
layers with batch normalization and ReLU, max-pooled strictly within each
segment so no information crosses segment boundaries. Keys and values come
from separate linear heads and are L2-normalized to unit norm unless the
``no_normalization`` ablation is active.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

warnings.filterwarnings("ignore", message="index_reduce")

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError
from .language import PAD

NORM_EPS = 1e-12


@dataclass
class EncoderConfig:
    vocab_size: int = 32
    num_parts: int = 4
    word_embedding_dim: int = 100
    lstm_hidden_dim: int = 64
    segment_feature_dim: int = 64
    attention_dim: int = 64
    part_embedding_dim: int = 100
    point_mlp_layers: int = 2
    max_tokens: int = 33
    normalize: bool = True
    with_global_feature: bool = False

    def __post_init__(self):
        for name in (
            "vocab_size",
            "num_parts",
            "word_embedding_dim",
            "lstm_hidden_dim",
            "segment_feature_dim",
            "attention_dim",
            "part_embedding_dim",
            "point_mlp_layers",
            "max_tokens",
        ):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")


def unit_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x / (x.norm(dim=dim, keepdim=True) + NORM_EPS)


class SegmentEncoder(nn.Module):
    """Per-point MLP + within-segment max pool, plus key/value heads."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.segment_feature_dim
        layers = []
        in_dim = 3
        for _ in range(config.point_mlp_layers):
            layers += [nn.Linear(in_dim, d), nn.BatchNorm1d(d), nn.ReLU()]
            in_dim = d
        self.point_mlp = nn.Sequential(*layers)
        head_in = 2 * d if config.with_global_feature else d
        self.key_head = nn.Linear(head_in, config.attention_dim)
        self.value_head = nn.Linear(head_in, config.attention_dim)

    def descriptors(
        self, points: torch.Tensor, segment_ids: torch.Tensor, num_segments: int
    ) -> torch.Tensor:
        """Max-pooled per-segment descriptors G, one row per segment.

        ``points`` is the flat (P, 3) tensor of all segment points and
        ``segment_ids`` maps each point row to its segment index.
        """
        if points.shape[0] == 0:
            raise InvalidInputError("cannot encode an empty segment set")
        feats = self.point_mlp(points)
        out = feats.new_full((num_segments, feats.shape[1]), float("-inf"))
        out = out.index_reduce(0, segment_ids, feats, "amax", include_self=True)
        if torch.isinf(out).any():
            raise InvalidInputError("some segment received no points")
        return out

    def keys_values(
        self, descriptors: torch.Tensor, shape_slices=None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Linear key/value heads with optional unit-norm constraint.

        With ``with_global_feature`` each row is concatenated with the max
        pool over all rows of its own shape before the heads; this is the
        one (deliberately broken) configuration where information crosses
        segments. ``shape_slices`` delimits shapes when descriptors of
        several shapes are stacked.
        """
        if self.config.with_global_feature:
            if shape_slices is None:
                shape_slices = [(0, descriptors.shape[0])]
            glob = torch.cat(
                [
                    descriptors[a:b].max(dim=0, keepdim=True).values.expand(b - a, -1)
                    for a, b in shape_slices
                ]
            )
            descriptors = torch.cat([descriptors, glob], dim=1)
        keys = self.key_head(descriptors)
        values = self.value_head(descriptors)
        if self.config.normalize:
            keys = unit_norm(keys)
            values = unit_norm(values)
        return keys, values


class UtteranceEncoder(nn.Module):
    """Word embeddings -> LSTM -> bilinear word attention -> linear head.

    Attention scores are h_t^T B c with a learned bilinear form B and
    context vector c, softmaxed over non-pad positions; the feature is the
    attention-weighted sum of hidden states. The attention-encoder variant
    L2-normalizes its head output, the classification variant does not.
    """

    def __init__(self, config: EncoderConfig, normalize_output: bool):
        super().__init__()
        self.config = config
        self.normalize_output = normalize_output and config.normalize
        self.embedding = nn.Embedding(config.vocab_size, config.word_embedding_dim, padding_idx=PAD)
        self.lstm = nn.LSTM(
            config.word_embedding_dim, config.lstm_hidden_dim, batch_first=True
        )
        h = config.lstm_hidden_dim
        self.bilinear = nn.Parameter(torch.randn(h, h) / h**0.5)
        self.context = nn.Parameter(torch.randn(h) / h**0.5)
        self.head = nn.Linear(h, config.attention_dim)

    def forward(self, token_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(features (B, d), word attention (B, T)) for padded id batches."""
        if token_ids.ndim == 1:
            token_ids = token_ids.unsqueeze(0)
        mask = token_ids != PAD
        if (~mask.any(dim=1)).any():
            raise InvalidInputError("all-pad token sequence")
        emb = self.embedding(token_ids)
        hidden, _ = self.lstm(emb)
        scores = hidden @ self.bilinear @ self.context
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(scores, dim=1)
        feature = self.head((attn.unsqueeze(2) * hidden).sum(dim=1))
        if self.normalize_output:
            feature = unit_norm(feature)
        return feature, attn


class PartNameEncoder(nn.Module):
    """Learned part embedding -> single linear layer -> unit-norm query."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.num_parts, config.part_embedding_dim)
        self.head = nn.Linear(config.part_embedding_dim, config.attention_dim)

    def forward(self, part_ids: torch.Tensor) -> torch.Tensor:
        if (part_ids < 0).any() or (part_ids >= self.config.num_parts).any():
            raise InvalidInputError("part index out of range")
        q = self.head(self.embedding(part_ids))
        return unit_norm(q) if self.config.normalize else q

    def all_queries(self) -> torch.Tensor:
        ids = torch.arange(self.config.num_parts, device=self.embedding.weight.device)
        return self(ids)


def save_checkpoint(path, model: nn.Module, config) -> None:
    """Flat archive of named float32 parameter arrays plus the config JSON."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {
        name: tensor.detach().cpu().numpy().astype("<f4")
        for name, tensor in model.state_dict().items()
    }
    np.savez(path / "params.npz", **arrays)
    (path / "config.json").write_text(json.dumps(asdict(config), indent=2))


def load_checkpoint(path, model: nn.Module) -> dict:
    """Load parameters saved by :func:`save_checkpoint`; returns the config dict."""
    path = Path(path)
    with np.load(path / "params.npz") as npz:
        state = {
            name: torch.from_numpy(npz[name].astype(np.float32))
            for name in npz.files
        }
    current = model.state_dict()
    for name, tensor in current.items():
        if name not in state:
            raise InvalidInputError(f"checkpoint missing parameter {name!r}")
        state[name] = state[name].to(tensor.dtype).reshape(tensor.shape)
    model.load_state_dict(state)
    return json.loads((path / "config.json").read_text())
