"""End-to-end acceptance suite.

Fast property checks come first (attention algebra, hand-computed
oracles, gradient checks, IoU enumeration). The slow section trains the
listener on a synthetic corpus several times and asserts directional
results; expect it to take tens of minutes on one CPU core.
"""

import itertools
import json
import math
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import refparts as rp
from refparts.attention import (
    aggregate,
    attend_pn_agnostic,
    attend_pn_aware,
)
from refparts.encoders import EncoderConfig, load_checkpoint, unit_norm
from refparts.evaluation import (
    instance_miou,
    part_iou,
    upper_bound_segmentation,
)
from refparts.geometry import PartLabels, PointCloud, ShapeRecord, SuperSegmentSet
from refparts.losses import ce_regularization, classification_loss
from refparts.encoders import load_checkpoint
from refparts.training import build_model, polynomial_lr


class TestAttentionAlgebra:
    """1000 random instances of the attention invariants in under 10 s."""

    def test_random_instances(self):
        start = time.monotonic()
        rng = np.random.default_rng(0)
        for _ in range(1000):
            s = int(rng.integers(1, 17))
            k = int(rng.integers(2, 7))
            d = int(rng.integers(4, 17))
            keys_raw = torch.tensor(rng.standard_normal((s, d)), dtype=torch.float64)
            queries_raw = torch.tensor(rng.standard_normal((k, d)), dtype=torch.float64)
            keys = unit_norm(keys_raw)
            queries = unit_norm(queries_raw)

            # single-query simplex
            w = attend_pn_agnostic(queries[0], keys)
            assert abs(float(w.sum()) - 1.0) < 1e-6

            # bounded logits under unit norms
            logits = keys @ queries.T
            assert float(logits.abs().max()) <= 1.0 + 1e-5

            # double softmax: Y rows and W columns on the simplex
            att = attend_pn_aware(queries, keys, mode="pn_then_ss")
            assert torch.all((att.row_dist.sum(dim=1) - 1.0).abs() < 1e-6)
            assert torch.all((att.weights.sum(dim=0) - 1.0).abs() < 1e-6)

            # positive rescaling before normalization changes nothing
            scale = float(rng.uniform(0.1, 10.0))
            att2 = attend_pn_aware(queries, unit_norm(keys_raw * scale), mode="pn_then_ss")
            assert torch.all((att.weights - att2.weights).abs() < 1e-7)
            assert torch.all((att.row_dist - att2.row_dist).abs() < 1e-7)
        assert time.monotonic() - start < 10.0


class TestHandOracles:
    """Hand-computed cases pinned to 1e-4."""

    def test_single_softmax_two_segments(self):
        w = attend_pn_agnostic(
            torch.tensor([1.0, 0.0]),
            torch.tensor([[1.0, 0.0], [0.0, 1.0]]),
        )
        # softmax([1, 0]) = [e/(e+1), 1/(e+1)]
        assert abs(float(w[0]) - 0.7311) < 1e-4
        assert abs(float(w[1]) - 0.2689) < 1e-4

    def test_double_softmax_2x2(self):
        # X = [[1, 0], [0, 1]] -> Y rows = [0.7311, 0.2689] mirrored;
        # W columns = softmax([0.7311, 0.2689]) = [0.6135, 0.3865] mirrored.
        keys = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        queries = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        att = attend_pn_aware(queries, keys, mode="pn_then_ss")
        expect_y = torch.tensor([[0.7311, 0.2689], [0.2689, 0.7311]])
        expect_w = torch.tensor([[0.6135, 0.3865], [0.3865, 0.6135]])
        assert torch.all((att.row_dist - expect_y).abs() < 1e-4)
        assert torch.all((att.weights - expect_w).abs() < 1e-4)

    def test_uniform_rows_ce_loss(self):
        s, k = 7, 4
        y = torch.full((s, k), 1.0 / k)
        loss = ce_regularization(y)
        assert abs(float(loss) - s * math.log(k)) < 1e-4

    def test_lr_halfway(self):
        assert abs(polynomial_lr(1e-3, 15, 30, 0.9) - 1e-3 * 0.5 ** 0.9) < 1e-4 * 1e-3

    def test_smoothed_loss_on_confident_logits(self):
        # -0.9*log(p0) - 0.05*log(p1) - 0.05*log(p2)
        logits = torch.tensor([[20.0, 0.0, 0.0]])
        target = torch.tensor([0])
        loss = classification_loss(logits, target, smoothing=0.1)
        p = torch.softmax(logits, dim=1)[0]
        expected = -(0.9 * math.log(float(p[0])) + 0.05 * math.log(float(p[1])) + 0.05 * math.log(float(p[2])))
        assert abs(float(loss) - expected) < 1e-4


class TestGradientChecks:
    """Analytic vs central finite differences in double precision."""

    @staticmethod
    def finite_diff(fn, params, step=1e-5):
        grads = []
        for p in params:
            g = torch.zeros_like(p)
            flat = p.reshape(-1)
            gf = g.reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                hi = float(fn())
                flat[i] = orig - step
                lo = float(fn())
                flat[i] = orig
                gf[i] = (hi - lo) / (2 * step)
            grads.append(g)
        return grads

    @staticmethod
    def compare(analytic, numeric, tol=1e-4):
        for a, n in zip(analytic, numeric):
            denom = max(float(a.norm()), float(n.norm()), 1e-8)
            assert float((a - n).norm()) / denom < tol

    def test_classification_loss_grad(self):
        torch.manual_seed(0)
        logits = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
        target = torch.tensor([0, 2, 1, 0])

        def fn():
            return classification_loss(logits, target, smoothing=0.1)

        loss = fn()
        (analytic,) = torch.autograd.grad(loss, [logits])
        detached = logits.detach().clone()

        def fn2():
            return classification_loss(detached, target, smoothing=0.1)

        numeric = self.finite_diff(fn2, [detached])
        self.compare([analytic], numeric)

    def test_ce_regularization_grad(self):
        torch.manual_seed(1)
        x = torch.randn(5, 3, dtype=torch.float64)
        x_var = x.clone().requires_grad_(True)

        def fwd(t):
            y = torch.softmax(t, dim=1)
            return ce_regularization(y.unsqueeze(0), torch.ones(1, 5, dtype=torch.bool))

        (analytic,) = torch.autograd.grad(fwd(x_var), [x_var])
        det = x.clone()
        numeric = self.finite_diff(lambda: fwd(det), [det])
        self.compare([analytic], numeric)

    def test_composed_attention_pipeline_grad(self):
        start = time.monotonic()
        torch.manual_seed(2)
        s, k, d = 4, 3, 5
        keys = torch.randn(s, d, dtype=torch.float64)
        values = torch.randn(s, d, dtype=torch.float64)
        queries = torch.randn(k, d, dtype=torch.float64)
        head = torch.randn(d, dtype=torch.float64)

        params = [keys, values, queries, head]
        variables = [p.clone().requires_grad_(True) for p in params]

        def fwd(ks, vs, qs, hd):
            att = attend_pn_aware(unit_norm(qs), unit_norm(ks), mode="pn_then_ss")
            agg = torch.stack(
                [aggregate(unit_norm(vs), att.weights[:, j]) for j in range(k)]
            )
            return (agg @ hd).logsumexp(dim=0)

        loss = fwd(*variables)
        analytic = torch.autograd.grad(loss, variables)
        detached = [p.clone() for p in params]
        numeric = self.finite_diff(lambda: fwd(*detached), detached)
        self.compare(list(analytic), numeric)
        assert time.monotonic() - start < 60.0


class TestIoUEnumeration:
    """part_iou and instance_miou vs brute-force set arithmetic."""

    def test_part_iou_exhaustive(self):
        universe = list(range(4))
        for pred_bits in range(16):
            for gt_bits in range(16):
                pred = {i for i in universe if pred_bits >> i & 1}
                gt = {i for i in universe if gt_bits >> i & 1}
                got = part_iou(pred, gt)
                if not pred and not gt:
                    assert got == 1.0
                elif not pred or not gt:
                    assert got == 0.0
                else:
                    assert got == pytest.approx(len(pred & gt) / len(pred | gt))

    def test_instance_miou_exhaustive(self):
        # All gt/pred labelings of 6 points over 2 parts.
        n, k = 6, 2
        for gt_bits in range(2 ** n):
            gt_labels = np.array([gt_bits >> i & 1 for i in range(n)])
            gt = PartLabels(gt_labels, part_names=["a", "b"])
            for pred_bits in range(2 ** n):
                pred = np.array([pred_bits >> i & 1 for i in range(n)])
                expect = np.mean(
                    [
                        part_iou(
                            set(np.nonzero(pred == part)[0].tolist()),
                            set(np.nonzero(gt_labels == part)[0].tolist()),
                        )
                        for part in range(k)
                    ]
                )
                assert instance_miou(pred, gt, k) == pytest.approx(expect)

    def test_upper_bound_maximal_accuracy_exhaustive(self):
        # Every gt labeling of 6 points over <= 3 segments, 2 parts.
        assignment = np.array([0, 0, 1, 1, 2, 2])
        segments = SuperSegmentSet.from_assignment("s", assignment)
        for gt_bits in range(2 ** 6):
            labels = np.array([gt_bits >> i & 1 for i in range(6)])
            gt = PartLabels(labels, part_names=["a", "b"])
            ub = upper_bound_segmentation(segments, gt)
            best = np.mean(ub.point_parts == labels)
            for combo in itertools.product(range(2), repeat=3):
                pts = np.asarray(combo)[assignment]
                assert np.mean(pts == labels) <= best + 1e-12


def corpus():
    shapes = rp.generate_synthetic_shapes(rp.default_chair_catalog(), 300, seed=1)
    parts = rp.PartNameSet.chairs()
    rounds = rp.synthesize_reference_games(shapes, parts, 3000, seed=2)
    vocab = rp.Vocabulary.build([r.utterance.tokens for r in rounds])
    train_rounds, val_rounds, test_rounds = rp.split_rounds(rounds, seed=0)
    data = rp.TrainData(
        shapes={s.id: s for s in shapes},
        train_rounds=train_rounds,
        val_rounds=val_rounds[:128],
        vocab=vocab,
        parts=parts,
    )
    return shapes, parts, vocab, data, test_rounds


SEEDS = (0, 1, 2)
# The points-only baseline (every point a singleton segment) costs ~50x
# more per optimizer step on one CPU core, so it gets a short schedule;
# all other variants train the full default schedule.
RAW_EPOCHS = 2

# Completed training runs are reused from this directory so the suite is
# re-runnable without repeating hours of CPU training. Delete it (or point
# REFPARTS_RUN_CACHE elsewhere) to retrain from scratch; training is
# seed-deterministic, so a fresh run reproduces the same metrics.
RUN_CACHE = Path(
    os.environ.get(
        "REFPARTS_RUN_CACHE", Path(__file__).resolve().parent.parent / ".acceptance_runs"
    )
)


def cached_train(name, config, data):
    """Train into RUN_CACHE/name, or reload if already done with this config."""
    run_dir = RUN_CACHE / name
    info_file = run_dir / "run_info.json"
    if info_file.exists():
        saved = json.loads((run_dir / "config.json").read_text())
        if saved == config.as_dict():
            model = build_model(config, len(data.vocab), len(data.parts.names))
            load_checkpoint(run_dir / f"checkpoint_{config.epochs - 1:03d}", model)
            model.eval()
            return model, json.loads(info_file.read_text())["duration_seconds"]
        shutil.rmtree(run_dir)
    start = time.monotonic()
    result = rp.train(
        config, data, run_dir=run_dir, eval_shape_limit=16, checkpoint_every_epoch=False
    )
    duration = time.monotonic() - start
    info_file.write_text(json.dumps({"duration_seconds": duration}))
    return result.model, duration


VARIANTS = {
    "default": {},
    "global": {"with_global_feature": True},
    "raw": {"input_mode": "raw_points", "epochs": RAW_EPOCHS},
    "swapped": {"softmax_mode": "ss_then_pn"},
}


@pytest.mark.slow
class TestSyntheticEndToEnd:
    """Criterion-level directional results over 3 seeds (slow)."""

    @pytest.fixture(scope="class")
    def world(self):
        return corpus()

    @pytest.fixture(scope="class")
    def runs(self, world):
        shapes, parts, vocab, data, test_rounds = world
        out = {}
        for seed in SEEDS:
            out[seed] = {}
            for name, kw in VARIANTS.items():
                config = rp.TrainConfig(seed=seed, **kw)
                model, duration = cached_train(f"{name}_s{seed}", config, data)
                if name == "default":
                    assert duration < 30 * 60
                accuracy = rp.classification_accuracy(
                    model, test_rounds[:256], data.shapes, vocab,
                    input_mode=config.input_mode,
                )
                report = rp.evaluate_segmentation(
                    model, shapes[:48], parts.names, vocab=vocab,
                    input_mode=config.input_mode,
                )
                out[seed][name] = (model, accuracy, report, shapes[:48], (vocab, data, test_rounds, parts))
        return out

    def test_accuracy_beats_attention_baselines(self, runs):
        accs, unis, rnds = [], [], []
        for seed in SEEDS:
            model, accuracy, _, _, (vocab, data, test_rounds, _) = runs[seed]["default"]
            accs.append(accuracy)
            unis.append(
                rp.classification_accuracy(
                    model, test_rounds[:256], data.shapes, vocab,
                    attention_override="uniform",
                )
            )
            rnds.append(
                rp.classification_accuracy(
                    model, test_rounds[:256], data.shapes, vocab,
                    attention_override="random", override_seed=seed,
                )
            )
        assert np.mean(accs) > np.mean(unis) > np.mean(rnds)

    def test_default_beats_global_feature(self, runs):
        d = np.mean([runs[s]["default"][2].average_miou for s in SEEDS])
        g = np.mean([runs[s]["global"][2].average_miou for s in SEEDS])
        assert d > g

    def test_default_beats_raw_points(self, runs):
        d = np.mean([runs[s]["default"][2].average_miou for s in SEEDS])
        r = np.mean([runs[s]["raw"][2].average_miou for s in SEEDS])
        assert d > r

    def test_softmax_order_matters(self, runs):
        d = np.mean([runs[s]["default"][2].average_miou for s in SEEDS])
        w = np.mean([runs[s]["swapped"][2].average_miou for s in SEEDS])
        assert d > w

    def test_never_beats_upper_bound(self, runs):
        for seed in SEEDS:
            model, _, report, eval_shapes, _ = runs[seed]["default"]
            for shape, miou in zip(eval_shapes, report.per_instance_miou):
                ub = instance_miou(
                    upper_bound_segmentation(shape.segments, shape.gt).point_parts,
                    shape.gt,
                    len(shape.gt.part_names),
                )
                assert miou <= ub + 1e-9

    def test_granularity_trend(self, runs):
        """4x as many segments -> worse mIoU, accuracy within 5 points."""
        base_miou = np.mean([runs[s]["default"][2].average_miou for s in SEEDS])
        base_acc = np.mean([runs[s]["default"][1] for s in SEEDS])
        mious, accs = [], []
        for seed in SEEDS:
            shapes, parts, vocab, data, test_rounds = corpus(17)
            fine_shapes = []
            for shape in shapes:
                avg = len(shape.cloud) / shape.segments.num_segments
                fine = rp.split_by_granularity(
                    shape.segments, shape.cloud,
                    points_per_cluster=max(int(avg / 4), 1), rng_seed=seed,
                )
                fine_shapes.append(
                    ShapeRecord(
                        id=shape.id, category=shape.category, cloud=shape.cloud,
                        segments=fine, gt=shape.gt,
                    )
                )
            data = rp.TrainData(
                shapes={s.id: s for s in fine_shapes},
                train_rounds=data.train_rounds,
                val_rounds=data.val_rounds,
                vocab=vocab,
                parts=parts,
            )
            result = rp.train(short_config(seed), data, run_dir=None, eval_shape_limit=48)
            accs.append(
                rp.classification_accuracy(
                    result.model, test_rounds[:256], data.shapes, vocab
                )
            )
            report = rp.evaluate_segmentation(
                result.model, fine_shapes[:48], parts.names, vocab=vocab
            )
            mious.append(report.average_miou)
        assert np.mean(mious) < base_miou
        assert abs(np.mean(accs) - base_acc) < 0.05


@pytest.mark.skipif(
    not os.environ.get("PARTGLOT_FULL_DATA"),
    reason="full-scale reproduction needs the external chair corpus, shape "
    "meshes, and precomputed segment decompositions (set PARTGLOT_FULL_DATA "
    "to their root to enable)",
)
class TestFullScaleReproduction:
    def test_full_scale_miou(self):
        raise NotImplementedError(
            "full-scale pipeline entry point; requires external data"
        )
