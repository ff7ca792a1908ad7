"""Command-line experiment harness.

Subcommands: prepare (validate and split a dataset), synth (generate a
synthetic corpus), train, eval, visualize. Exit codes: 0 success, 1
runtime failure, 2 invalid input or config.
"""

import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from .bundle import read_bundle, write_bundle
from .errors import BundleFormatError, InvalidInputError, RefPartsError
from .evaluation import (
    baseline_attention,
    classification_accuracy,
    cross_part_miou,
    evaluate_segmentation,
    export_word_attention,
    segmentation_report,
    upper_bound_segmentation,
    write_report,
)
from .language import (
    PartNameSet,
    Utterance,
    Vocabulary,
    default_maps,
    detect_mentioned_part,
    preprocess_utterance,
    read_rounds,
    split_rounds,
    split_rounds_shape_disjoint,
    synthesize_reference_games,
    write_rounds,
)
from .model import ListenerModel
from .plyio import part_colors, write_colored_ply
from .synthetic import default_chair_catalog, generate_synthetic_shapes
from .training import TrainConfig, TrainData, build_model, train
from .encoders import load_checkpoint

log = logging.getLogger("refparts")

DATA_ROOT_VAR = "PARTGLOT_DATA"

ABLATIONS = (
    "no_normalization",
    "with_global_feature",
    "no_ce_reg",
)


def resolve_data_path(value: str) -> Path:
    """Resolve a path, falling back to the $PARTGLOT_DATA root."""
    p = Path(value)
    if p.exists():
        return p
    root = os.environ.get(DATA_ROOT_VAR)
    if root and not p.is_absolute():
        candidate = Path(root) / value
        if candidate.exists():
            return candidate
    return p


def load_parts(lexicon_path: str | None) -> PartNameSet:
    if lexicon_path is None:
        return PartNameSet.chairs()
    lex: dict[str, set] = {}
    names: list[str] = []
    for line in Path(lexicon_path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        word, part = line.split("\t")
        if part not in names:
            names.append(part)
        lex.setdefault(part, set()).add(word)
    return PartNameSet(names=names, lexicon=lex)


def save_run_data(run_dir: Path, vocab: Vocabulary, parts: PartNameSet) -> None:
    (run_dir / "vocab.json").write_text(json.dumps(vocab.token_to_id, indent=2))
    (run_dir / "parts.json").write_text(
        json.dumps(
            {
                "names": parts.names,
                "lexicon": {k: sorted(v) for k, v in parts.lexicon.items()},
            },
            indent=2,
        )
    )


def load_run(run_dir: Path):
    """Rebuild the trained model plus vocab and parts from a run directory."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise InvalidInputError(f"no config.json in {run_dir}")
    config = TrainConfig(**json.loads(cfg_path.read_text()))
    vocab = Vocabulary(token_to_id=json.loads((run_dir / "vocab.json").read_text()))
    parts_raw = json.loads((run_dir / "parts.json").read_text())
    parts = PartNameSet(
        names=parts_raw["names"],
        lexicon={k: set(v) for k, v in parts_raw["lexicon"].items()},
    )
    checkpoints = sorted(run_dir.glob("checkpoint_*"))
    if not checkpoints:
        raise InvalidInputError(f"no checkpoints in {run_dir}")
    model = build_model(config, len(vocab), len(parts.names))
    load_checkpoint(checkpoints[-1], model)
    model.eval()
    return model, config, vocab, parts


@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


def run_command(fn):
    """Map library errors to the documented exit codes."""
    try:
        fn()
    except (InvalidInputError, BundleFormatError) as exc:
        click.echo(f"invalid input: {exc}", err=True)
        sys.exit(2)
    except RefPartsError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@main.command()
@click.option("--bundle", required=True, help="Shape bundle directory.")
@click.option("--rounds", "rounds_path", required=True, help="Game rounds JSONL.")
@click.option("--lexicon", default=None, help="TSV word->part lexicon (default: chairs).")
@click.option("--out", required=True, type=click.Path(), help="Output directory for split manifests.")
@click.option("--require-gt", is_flag=True, help="Fail if any shape lacks part labels.")
@click.option("--shape-disjoint", is_flag=True, help="Use the strict shape-disjoint split.")
@click.option("--seed", default=0, show_default=True)
def prepare(bundle, rounds_path, lexicon, out, require_gt, shape_disjoint, seed):
    """Validate a dataset, detect part mentions, and write split manifests."""

    def body():
        shapes = read_bundle(resolve_data_path(bundle))
        if require_gt:
            missing = [s.id for s in shapes if s.gt is None]
            if missing:
                raise InvalidInputError(
                    f"{len(missing)} shapes missing part labels, e.g. {missing[:4]}"
                )
        rounds = read_rounds(resolve_data_path(rounds_path))
        known = {s.id for s in shapes}
        bad = [
            i for i, r in enumerate(rounds)
            if any(sid not in known for sid in r.shape_ids)
        ]
        if bad:
            raise InvalidInputError(
                f"{len(bad)} rounds reference unknown shapes, first at line {bad[0] + 1}"
            )
        parts = load_parts(lexicon)
        typos, plurals, compounds = default_maps()
        counts = {name: 0 for name in parts.names}
        unmentioned = 0
        processed = []
        for r in rounds:
            tokens = preprocess_utterance(r.utterance.raw, typos, plurals, compounds)
            mentioned = detect_mentioned_part(tokens, parts)
            processed.append(
                type(r)(
                    shape_ids=r.shape_ids,
                    target_index=r.target_index,
                    utterance=Utterance(r.utterance.raw, tokens, mentioned),
                )
            )
            if mentioned is None:
                unmentioned += 1
            else:
                counts[parts.names[mentioned]] += 1
        splitter = split_rounds_shape_disjoint if shape_disjoint else split_rounds
        tr, va, te = splitter(processed, seed=seed)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, chunk in (("train", tr), ("val", va), ("test", te)):
            write_rounds(out_dir / f"{name}.jsonl", chunk)
        click.echo(f"shapes: {len(shapes)}  rounds: {len(rounds)}")
        click.echo(f"split sizes: {len(tr)}/{len(va)}/{len(te)}")
        click.echo("part".ljust(10) + "rounds")
        for name in parts.names:
            click.echo(name.ljust(10) + str(counts[name]))
        click.echo("none".ljust(10) + str(unmentioned))

    run_command(body)


@main.command()
@click.option("--parts", "parts_kind", default="chairs", show_default=True,
              type=click.Choice(["chairs"]), help="Synthetic part catalog.")
@click.option("--shapes", "num_shapes", default=300, show_default=True)
@click.option("--rounds", "num_rounds", default=3000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
def synth(parts_kind, num_shapes, num_rounds, seed, out):
    """Generate a synthetic shape bundle plus template game rounds."""

    def body():
        catalog = default_chair_catalog()
        part_set = PartNameSet.chairs()
        shapes = generate_synthetic_shapes(catalog, num_shapes, seed=seed)
        rounds = synthesize_reference_games(shapes, part_set, num_rounds, seed=seed + 1)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_bundle(out_dir / "bundle", shapes)
        write_rounds(out_dir / "rounds.jsonl", rounds)
        click.echo(f"wrote {len(shapes)} shapes and {len(rounds)} rounds to {out_dir}")

    run_command(body)


@main.command(name="train")
@click.option("--config", "config_path", default=None, help="Training config JSON.")
@click.option("--bundle", required=True, help="Shape bundle directory.")
@click.option("--rounds", "rounds_path", required=True, help="Game rounds JSONL.")
@click.option("--out", "run_dir", required=True, type=click.Path(), help="Run directory.")
@click.option("--ablate", multiple=True, type=click.Choice(ABLATIONS),
              help="Flip one ablation switch (repeatable).")
@click.option("--seed", default=None, type=int, help="Override the config seed.")
@click.option("--epochs", default=None, type=int, help="Override the epoch count.")
def train_cmd(config_path, bundle, rounds_path, run_dir, ablate, seed, epochs):
    """Train a listener and write checkpoints plus metrics to a run directory."""

    def body():
        raw = json.loads(Path(config_path).read_text()) if config_path else {}
        for switch in ablate:
            raw[switch] = True
        if seed is not None:
            raw["seed"] = seed
        if epochs is not None:
            raw["epochs"] = epochs
        try:
            config = TrainConfig(**raw)
        except TypeError as exc:
            raise InvalidInputError(f"bad training config: {exc}") from exc

        shapes = read_bundle(resolve_data_path(bundle))
        rounds = read_rounds(resolve_data_path(rounds_path))
        parts = PartNameSet.chairs()
        for r in rounds:
            if r.utterance.mentioned_part is None:
                r.utterance.mentioned_part = detect_mentioned_part(
                    r.utterance.tokens, parts
                )
        vocab = Vocabulary.build([r.utterance.tokens for r in rounds])
        tr, va, te = split_rounds(rounds, seed=config.seed)
        data = TrainData(
            shapes={s.id: s for s in shapes},
            train_rounds=tr,
            val_rounds=va,
            vocab=vocab,
            parts=parts,
        )
        out_dir = Path(run_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_run_data(out_dir, vocab, parts)
        write_rounds(out_dir / "test.jsonl", te)
        result = train(config, data, run_dir=out_dir)
        final = result.history[-1] if result.history else {}
        click.echo(f"run directory: {out_dir}")
        click.echo(f"final metrics: {json.dumps(final)}")

    run_command(body)


@main.command(name="eval")
@click.option("--run", "run_dir", required=True, help="Training run directory.")
@click.option("--bundle", required=True, help="Shape bundle directory.")
@click.option("--rounds", "rounds_path", default=None,
              help="Rounds JSONL (default: the run's held-out test split).")
@click.option("--baseline", multiple=True, type=click.Choice(["uniform", "random"]),
              help="Also score an attention-override baseline (repeatable).")
@click.option("--ood-bundle", default=None, help="Second bundle for cross-part transfer.")
@click.option("--upper-bound/--no-upper-bound", default=True, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(), help="Report JSON path.")
def eval_cmd(run_dir, bundle, rounds_path, baseline, ood_bundle, upper_bound, out_path):
    """Score classification accuracy and part segmentation for a trained run."""

    def body():
        model, config, vocab, parts = load_run(Path(run_dir))
        shapes = read_bundle(resolve_data_path(bundle))
        shape_map = {s.id: s for s in shapes}
        rounds_file = (
            resolve_data_path(rounds_path) if rounds_path else Path(run_dir) / "test.jsonl"
        )
        rounds = read_rounds(rounds_file)
        for r in rounds:
            if r.utterance.mentioned_part is None:
                r.utterance.mentioned_part = detect_mentioned_part(
                    r.utterance.tokens, parts
                )

        extra = {
            "accuracy": classification_accuracy(
                model, rounds, shape_map, vocab, input_mode=config.input_mode
            ),
            "num_rounds": len(rounds),
            "num_shapes": len(shapes),
        }
        for kind in baseline:
            extra[f"accuracy_{kind}_attention"] = classification_accuracy(
                model, rounds, shape_map, vocab,
                input_mode=config.input_mode, attention_override=kind,
            )

        gt_shapes = [s for s in shapes if s.gt is not None]
        report = None
        if gt_shapes:
            report = evaluate_segmentation(
                model, gt_shapes, parts.names, vocab=vocab,
                input_mode=config.input_mode,
            )
            if upper_bound:
                ub = segmentation_report(
                    [upper_bound_segmentation(s.segments, s.gt) for s in gt_shapes],
                    gt_shapes, parts.names,
                )
                extra["upper_bound_miou"] = ub.average_miou
        if ood_bundle:
            ood_shapes = [
                s for s in read_bundle(resolve_data_path(ood_bundle)) if s.gt is not None
            ]
            if not ood_shapes:
                raise InvalidInputError("ood bundle has no labeled shapes")
            gt_names = ood_shapes[0].gt.part_names
            segs = [
                model.segment_shape(s, input_mode=config.input_mode)
                if model.mode == "pn_aware"
                else model.segment_shape(
                    s, vocab=vocab, part_names=parts.names,
                    input_mode=config.input_mode,
                )
                for s in ood_shapes
            ]
            extra["ood_part_names"] = gt_names
            extra["ood_cross_part_miou"] = cross_part_miou(
                segs, ood_shapes, parts.names, gt_names
            ).tolist()

        if report is None:
            Path(out_path).write_text(json.dumps(extra, indent=2))
        else:
            write_report(out_path, report, extra=extra)
            click.echo(report.as_table())
        click.echo(f"accuracy: {extra['accuracy']:.4f}")
        for kind in baseline:
            click.echo(f"accuracy ({kind} attention): {extra[f'accuracy_{kind}_attention']:.4f}")
        click.echo(f"report: {out_path}")

    run_command(body)


@main.command()
@click.option("--run", "run_dir", required=True, help="Training run directory.")
@click.option("--bundle", required=True, help="Shape bundle directory.")
@click.option("--shape-id", required=True, help="Shape to visualize.")
@click.option("--utterance", default=None, help="Utterance for word-attention export.")
@click.option("--out-dir", required=True, type=click.Path())
def visualize(run_dir, bundle, shape_id, utterance, out_dir):
    """Export a colored PLY, attention heat plot, and word-attention JSON."""

    def body():
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        model, config, vocab, parts = load_run(Path(run_dir))
        shapes = {s.id: s for s in read_bundle(resolve_data_path(bundle))}
        if shape_id not in shapes:
            raise InvalidInputError(f"shape {shape_id!r} not in bundle")
        record = shapes[shape_id]
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

        if model.mode == "pn_agnostic":
            seg = model.segment_shape(
                record, vocab=vocab, part_names=parts.names, input_mode=config.input_mode
            )
            att = model.attention_matrix(
                record, vocab=vocab, part_names=parts.names, input_mode=config.input_mode
            )
        else:
            seg = model.segment_shape(record, input_mode=config.input_mode)
            att = model.attention_matrix(record, input_mode=config.input_mode)
        write_colored_ply(out / f"{shape_id}.ply", record.cloud.points, seg.point_parts)

        fig, ax = plt.subplots(figsize=(6, 4))
        im = ax.imshow(att.detach().numpy().T, aspect="auto", cmap="viridis")
        ax.set_xlabel("super-segment")
        ax.set_ylabel("part")
        ax.set_yticks(range(len(parts.names)), parts.names)
        fig.colorbar(im, ax=ax, label="attention")
        fig.tight_layout()
        fig.savefig(out / f"{shape_id}_attention.png", dpi=120)
        plt.close(fig)

        if utterance is not None:
            typos, plurals, compounds = default_maps()
            tokens = preprocess_utterance(utterance, typos, plurals, compounds)
            word_att = export_word_attention(model, tokens, vocab)
            (out / f"{shape_id}_word_attention.json").write_text(
                json.dumps(word_att, indent=2)
            )
        click.echo(f"wrote visualization artifacts to {out}")

    run_command(body)


if __name__ == "__main__":
    main()
