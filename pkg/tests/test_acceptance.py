"""
End-to-end properties of the whole pipeline. Tests marked ``slow`` train
real models and only run with ``--runslow``.
"""

import pytest
import torch

from pvseg.cli import main
from pvseg.config import OUTPUT_ROOT_ENV
from pvseg.data.manifest import SplitSpec, Split, split_dataset
from pvseg.metrics.confusion import ConfusionCounts, accuracy, confusion, f1, iou
from pvseg.metrics.evaluate import evaluate_dataset
from pvseg.model.backbone import Backbone
from pvseg.model.config import BackboneConfig, ModelConfig
from pvseg.model.mask_decoder import DecoderLayer, masked_cross_attention
from pvseg.model.pixel_decoder import PerPixelEmbedding
from pvseg.model.segmenter import SegmentationModel, pad_to_multiple
from pvseg.synthgen.scene import SceneSpec, generate_scene, write_dataset
from pvseg.training.trainer import TrainConfig, train


def _naive_counts(pred, gt):
    tp = tn = fp = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def test_metrics_match_pixel_loop(rng):
    for _ in range(1000):
        density = rng.random()
        pred = rng.random((32, 32)) < density
        gt = rng.random((32, 32)) < rng.random()
        tp, tn, fp, fn = _naive_counts(pred, gt)
        c = confusion(pred, gt)
        assert (c.tp, c.tn, c.fp, c.fn) == (tp, tn, fp, fn)
        assert abs(iou(c) - (tp / (tp + fp + fn) if tp + fp + fn else 1.0)) <= 1e-12
        assert abs(f1(c) - (2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0)) <= 1e-12
        assert abs(accuracy(c) - (tp + tn) / 1024) <= 1e-12


def test_f1_is_monotone_in_iou(rng):
    for tp, tn, fp, fn in rng.integers(0, 1000, size=(10_000, 4)).tolist():
        c = ConfusionCounts(tp, tn, fp, fn)
        assert abs(f1(c) - 2 * iou(c) / (1 + iou(c))) <= 1e-12
        assert iou(c) <= f1(c) + 1e-12


def test_masked_attention_semantics(rng):
    for trial in range(25):
        num_heads = int(rng.integers(1, 3))
        embed_dim = num_heads * int(rng.integers(1, 4))
        n = int(rng.integers(1, 5))
        h, w = (int(v) for v in rng.integers(1, 5, size=2))
        layer = DecoderLayer(embed_dim, num_heads, 2 * embed_dim, "relu")
        queries = torch.randn(1, n, embed_dim)
        query_pos = torch.randn(1, n, embed_dim)
        memory = torch.randn(1, embed_dim, h, w)
        memory_pos = torch.randn(1, embed_dim, h, w)
        prev = torch.randn(1, n, int(rng.integers(1, 9)), int(rng.integers(1, 9))) * 4

        result = masked_cross_attention(queries, query_pos, memory, memory_pos, prev, layer)
        blocked = result.blocked[:, None].expand_as(result.weights)
        assert torch.all(result.weights[blocked] == 0.0), trial
        assert torch.allclose(result.weights.sum(-1), torch.ones(1, num_heads, n), atol=1e-6)

        closed = masked_cross_attention(
            queries, query_pos, memory, memory_pos, torch.full_like(prev, -10.0), layer
        )
        opened = masked_cross_attention(
            queries, query_pos, memory, memory_pos, torch.full_like(prev, 10.0), layer
        )
        assert torch.equal(closed.weights, opened.weights)
        assert torch.equal(closed.queries, opened.queries)


def test_shape_pipeline_at_64(tiny_config):
    model = SegmentationModel(tiny_config)
    images = torch.rand(1, 3, 64, 64)
    pyramid = model.backbone(images)
    assert model.pixel_decoder.encoder.flatten_and_project(pyramid).num_tokens == 340
    with torch.no_grad():
        output = model(images)
    assert output.pixel_embedding.shape == (1, 8, 64, 64)
    assert output.mask_logits.shape == (1, 4, 64, 64)


def test_shape_pipeline_pads_400_to_416():
    padded = pad_to_multiple(torch.rand(1, 3, 400, 400), 32)
    assert padded.shape == (1, 3, 416, 416)
    backbone = Backbone(BackboneConfig(channels=(8, 8, 8, 8)))
    with torch.no_grad():
        d1 = backbone(padded)[0]
        assert d1.shape == (1, 8, 104, 104)
        embedding = PerPixelEmbedding(8, "relu")(d1, out_size=(400, 400))
    assert embedding.shape == (1, 8, 400, 400)


def test_model_accepts_non_divisible_sizes(tiny_config):
    with torch.no_grad():
        output = SegmentationModel(tiny_config)(torch.rand(1, 3, 40, 50))
    assert output.mask_logits.shape == (1, 4, 40, 50)


##############################################################################
# training demonstrations
##############################################################################
def _overfit_config() -> ModelConfig:
    return ModelConfig(
        backbone=BackboneConfig(channels=(32, 64, 128, 256)),
        hidden_dim=32,
        num_heads=4,
        enc_layers=2,
        num_queries=10,
        dec_rounds=1,
    )


@pytest.mark.slow
def test_overfits_eight_scenes(path):
    manifest = write_dataset(SceneSpec(image_size=64, seed=0), 8, path / "data")
    manifest = manifest.model_copy(
        update={"entries": [e.model_copy(update={"split": Split.train}) for e in manifest.entries]}
    )
    config = TrainConfig(learning_rate=1e-4, batch_size=8, epochs=500, max_steps=500)
    result = train(manifest, _overfit_config(), config, path / "run")
    report = evaluate_dataset(result.model, manifest, Split.train, progress=False)
    assert report.iou >= 0.95

    background = generate_scene(SceneSpec(image_size=64, panel_count=(0, 0), seed=99), 0)
    binary, _ = result.model.predict(background.image)
    assert binary.mean() <= 0.01


@pytest.mark.slow
def test_generalizes_on_synthetic_split(path):
    manifest = write_dataset(SceneSpec(image_size=64, seed=1), 200, path / "data")
    manifest = split_dataset(manifest, SplitSpec())
    config = TrainConfig(learning_rate=1e-4, batch_size=4, epochs=20)
    result = train(manifest, _overfit_config(), config, path / "run")
    report = evaluate_dataset(result.model, manifest, Split.test, progress=False)
    assert report.iou >= 0.70
    assert report.iou <= report.f1 <= report.accuracy


@pytest.mark.slow
def test_cli_training_is_bit_reproducible(path, monkeypatch):
    assert main(["synth", "--count=8", f"--out={path / 'data'}", "--seed=2"]) == 0
    assert main(["split", str(path / "data" / "manifest.jsonl")]) == 0
    flags = [
        f"--manifest={path / 'data' / 'manifest.jsonl'}",
        "--epochs=2",
        "--batch_size=2",
        "--backbone_channels=[8,8,16,16]",
        "--num_heads=2",
        "--num_queries=4",
        "--seed=5",
    ]
    # the run config echoed into the checkpoint keeps the relative output_dir
    for root in ("a", "b"):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(path / root))
        assert main(["train", "--output_dir=run", *flags]) == 0
    for name in ("last.ckpt", "history.csv"):
        assert (path / "a" / "run" / name).read_bytes() == (path / "b" / "run" / name).read_bytes()
