"""Utterance preprocessing, vocabulary, game rounds, and synthetic games."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources as importlib_resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .geometry import ShapeRecord

log = logging.getLogger(__name__)

PAD, UNK, SOS, EOS = 0, 1, 2, 3
RESERVED_TOKENS = ["<pad>", "<unk>", "<sos>", "<eos>"]
MAX_UTTERANCE_TOKENS = 33

_PUNCT = re.compile(r"[^a-z0-9' ]+")


def load_word_map(path) -> dict[str, str]:
    """Two-column UTF-8 TSV: source token -> replacement (may be multi-word)."""
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise InvalidInputError(f"bad map line (expected 2 columns): {line!r}")
        out[cols[0]] = cols[1]
    return out


def _resource_path(name: str) -> Path:
    return Path(importlib_resources.files("refparts.resources") / name)


def default_maps() -> tuple[dict, dict, dict]:
    """(typo_map, plural_map, compound_map) shipped with the package."""
    return (
        load_word_map(_resource_path("typos.tsv")),
        load_word_map(_resource_path("plurals.tsv")),
        load_word_map(_resource_path("compounds.tsv")),
    )


def preprocess_utterance(
    raw: str,
    typo_map: Optional[dict] = None,
    plural_map: Optional[dict] = None,
    compound_map: Optional[dict] = None,
) -> list[str]:
    """Lowercase, strip punctuation, then apply typo -> compound -> plural maps."""
    typo_map = typo_map or {}
    plural_map = plural_map or {}
    compound_map = compound_map or {}
    text = _PUNCT.sub(" ", raw.lower())
    tokens = text.split()
    tokens = [typo_map.get(t, t) for t in tokens]
    expanded: list[str] = []
    for t in tokens:
        expanded.extend(compound_map.get(t, t).split())
    tokens = [plural_map.get(t, t) for t in expanded]
    if not tokens:
        log.warning("utterance %r preprocessed to an empty token list", raw)
    return tokens


@dataclass
class Utterance:
    raw: str
    tokens: list[str]
    mentioned_part: Optional[int] = None


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]
    min_count: int = 1

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]], min_count: int = 1) -> "Vocabulary":
        counts: dict[str, int] = {}
        for toks in token_lists:
            for t in toks:
                counts[t] = counts.get(t, 0) + 1
        mapping = {t: i for i, t in enumerate(RESERVED_TOKENS)}
        for t in sorted(counts):
            if counts[t] >= min_count and t not in mapping:
                mapping[t] = len(mapping)
        return cls(token_to_id=mapping, min_count=min_count)

    def __len__(self):
        return len(self.token_to_id)

    def encode(self, tokens: Sequence[str], max_len: int = MAX_UTTERANCE_TOKENS) -> np.ndarray:
        ids = [self.token_to_id.get(t, UNK) for t in tokens]
        if len(ids) > max_len:
            log.warning("utterance truncated from %d to %d tokens", len(ids), max_len)
            ids = ids[:max_len]
        return np.array(ids + [PAD] * (max_len - len(ids)), dtype=np.int64)

    def decode(self, ids: Sequence[int]) -> list[str]:
        rev = {i: t for t, i in self.token_to_id.items()}
        return [rev[int(i)] for i in ids if int(i) != PAD]


@dataclass
class PartNameSet:
    """Ordered part names plus a per-part synonym lexicon."""

    names: list[str]
    lexicon: dict[str, set] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.names) < 2:
            raise InvalidInputError("need at least 2 part names")
        if len(set(self.names)) != len(self.names):
            raise InvalidInputError("part names must be unique")
        for name in self.names:
            self.lexicon.setdefault(name, set()).add(name)

    @classmethod
    def chairs(cls) -> "PartNameSet":
        lex: dict[str, set] = {}
        for line in _resource_path("part_lexicon.tsv").read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            word, part = line.split("\t")
            lex.setdefault(part, set()).add(word)
        return cls(names=["back", "seat", "leg", "arm"], lexicon=lex)

    def index(self, name: str) -> int:
        return self.names.index(name)


def detect_mentioned_part(tokens: Sequence[str], parts: PartNameSet) -> Optional[int]:
    """The unique mentioned part index, or None when zero or several parts match."""
    toks = set(tokens)
    hits = [k for k, name in enumerate(parts.names) if parts.lexicon[name] & toks]
    return hits[0] if len(hits) == 1 else None


@dataclass
class GameRound:
    shape_ids: tuple[str, str, str]
    target_index: int
    utterance: Utterance

    def __post_init__(self):
        if len(set(self.shape_ids)) != 3:
            raise InvalidInputError("round shape ids must be distinct")
        if self.target_index not in (0, 1, 2):
            raise InvalidInputError("target_index must be 0, 1, or 2")


def split_rounds(rounds, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Disjoint (train, val, test) partition of rounds, deterministic under seed."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidInputError("split ratios must sum to 1")
    n = len(rounds)
    if n < len(ratios):
        raise InvalidInputError(f"need at least {len(ratios)} rounds to split, got {n}")
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_train = min(n_train, n - 2)
    n_val = max(1, min(n_val, n - n_train - 1))
    perm = np.random.default_rng(seed).permutation(n)
    train = [rounds[i] for i in perm[:n_train]]
    val = [rounds[i] for i in perm[n_train : n_train + n_val]]
    test = [rounds[i] for i in perm[n_train + n_val :]]
    return train, val, test


def split_rounds_shape_disjoint(rounds, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Alternative split keeping every shape id inside a single split."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidInputError("split ratios must sum to 1")
    ids = sorted({sid for r in rounds for sid in r.shape_ids})
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(ratios[0] * len(ids)))
    n_val = int(round(ratios[1] * len(ids)))
    buckets = {}
    for rank, i in enumerate(perm):
        buckets[ids[i]] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
    splits = ([], [], [])
    for r in rounds:
        marks = {buckets[sid] for sid in r.shape_ids}
        if len(marks) == 1:
            splits[marks.pop()].append(r)
        # Rounds straddling splits are dropped: shape disjointness is strict.
    if any(len(s) == 0 for s in splits):
        raise InvalidInputError("shape-disjoint split produced an empty split")
    return splits


def balanced_weights(rounds, parts: PartNameSet) -> np.ndarray:
    """Per-round sampling weights inversely proportional to part frequency."""
    k_of = []
    for r in rounds:
        if r.utterance.mentioned_part is None:
            raise InvalidInputError("balanced sampling needs mentioned_part on every round")
        k_of.append(r.utterance.mentioned_part)
    k_of = np.asarray(k_of)
    counts = np.bincount(k_of, minlength=len(parts.names))
    # Parts with zero rounds contribute nothing, so they drop out of the
    # normalization automatically.
    w = 1.0 / counts[k_of]
    return w / w.sum()


def template_query(part_name: str, category: str = "chair") -> list[str]:
    """Attention-probe expression used at test time without part supervision."""
    return ["a", category, "with", part_name]


EXIST_TEMPLATES = ["a {category} with {part}", "a {category} that has a {part}"]
ABSENT_TEMPLATES = ["a {category} without {part}", "a {category} that has no {part}"]


def part_presence(shape: ShapeRecord, num_parts: int) -> np.ndarray:
    counts = np.bincount(shape.gt.labels, minlength=num_parts)
    return counts > 0


def synthesize_reference_games(
    shapes: list[ShapeRecord],
    parts: PartNameSet,
    count: int,
    seed: int,
    min_rate: float = 0.1,
) -> list[GameRound]:
    """Template existence/absence games from ground-truth part presence.

    Parts that are present, or absent, in fewer than ``min_rate`` of the
    shapes are excluded: existence games need both positive and negative
    examples. Each round's target satisfies the utterance predicate and
    neither distractor does.
    """
    for s in shapes:
        if s.gt is None:
            raise InvalidInputError("synthesized games need ground-truth part labels")
    k_names = parts.names
    presence = np.stack([part_presence(s, len(k_names)) for s in shapes])
    rates = presence.mean(axis=0)
    eligible = [k for k in range(len(k_names)) if min_rate <= rates[k] <= 1.0 - min_rate]
    if not eligible:
        raise InvalidInputError("no part has both presence and absence above the cutoff")
    rng = np.random.default_rng(seed)
    rounds: list[GameRound] = []
    failures = {k: 0 for k in eligible}
    active = list(eligible)
    while len(rounds) < count and active:
        k = int(rng.choice(active))
        exist = bool(rng.random() < 0.5)
        pool_true = np.nonzero(presence[:, k] == exist)[0]
        pool_false = np.nonzero(presence[:, k] != exist)[0]
        if pool_true.size < 1 or pool_false.size < 2:
            failures[k] += 1
            if failures[k] >= 100:
                log.warning("skipping part %r: no valid games found", k_names[k])
                active.remove(k)
            continue
        target = int(rng.choice(pool_true))
        d1, d2 = rng.choice(pool_false, size=2, replace=False)
        templates = EXIST_TEMPLATES if exist else ABSENT_TEMPLATES
        raw = templates[int(rng.integers(len(templates)))].format(
            category=shapes[target].category, part=k_names[k]
        )
        slot = int(rng.integers(3))
        ids = [shapes[int(d1)].id, shapes[int(d2)].id]
        ids.insert(slot, shapes[target].id)
        rounds.append(
            GameRound(
                shape_ids=tuple(ids),
                target_index=slot,
                utterance=Utterance(raw=raw, tokens=preprocess_utterance(raw), mentioned_part=k),
            )
        )
    return rounds


def write_rounds(path, rounds: list[GameRound]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rounds:
            f.write(
                json.dumps(
                    {
                        "shape_ids": list(r.shape_ids),
                        "target_index": r.target_index,
                        "raw": r.utterance.raw,
                        "tokens": r.utterance.tokens,
                        "mentioned_part": r.utterance.mentioned_part,
                    }
                )
                + "\n"
            )


def read_rounds(path) -> list[GameRound]:
    rounds = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        rounds.append(
            GameRound(
                shape_ids=tuple(d["shape_ids"]),
                target_index=d["target_index"],
                utterance=Utterance(
                    raw=d["raw"], tokens=d["tokens"], mentioned_part=d.get("mentioned_part")
                ),
            )
        )
    return rounds
