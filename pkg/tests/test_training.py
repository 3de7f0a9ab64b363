import itertools
import math
from collections import deque

import numpy as np
import pytest
import torch

from pvseg.cli import load_model
from pvseg.data.manifest import Split, read_manifest
from pvseg.errors import CheckpointError, ConfigError, DivergenceError, NumericalError
from pvseg.model.mask_decoder import DecoderOutput, DecoderStep, MaskSet
from pvseg.model.segmenter import SegmentationModel, SegmentationOutput
from pvseg.synthgen.scene import SceneSpec, write_dataset
from pvseg.training.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from pvseg.training.losses import CriterionConfig, SetCriterion
from pvseg.training.matching import (
    LossWeights,
    connected_components,
    cost_matrix,
    dice_cost,
    hungarian_match,
    match_cost,
    segments_tensor,
)
from pvseg.training.trainer import TrainConfig, build_model, make_optimizer, train
from pvseg.utils.gradcheck import max_relative_error


def _output(mask_logits, class_logits):
    step = DecoderStep(MaskSet(mask_logits), class_logits)
    return SegmentationOutput(DecoderOutput((step,)), pixel_embedding=torch.zeros(1))


def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def _softmax(row):
    exps = [math.exp(v) for v in row]
    return [e / sum(exps) for e in exps]


def _bfs_components(mask):
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    components = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x] or seen[y, x]:
                continue
            comp = np.zeros_like(mask, dtype=bool)
            queue = deque([(y, x)])
            seen[y, x] = True
            while queue:
                cy, cx = queue.popleft()
                comp[cy, cx] = True
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            components.append(comp)
    return components


def _dataset(path, count=4, size=32, seed=0):
    manifest = write_dataset(SceneSpec(image_size=size, seed=seed), count, path / "data")
    splits = [Split.train] * (count - 1) + [Split.val]
    entries = [e.model_copy(update={"split": s}) for e, s in zip(manifest.entries, splits)]
    return manifest.model_copy(update={"entries": entries})


##############################################################################
# segments
##############################################################################
def test_components_match_flood_fill(rng):
    for _ in range(50):
        mask = (rng.random((9, 11)) > 0.55).astype(np.uint8)
        ours = connected_components(mask)
        expected = _bfs_components(mask)
        assert len(ours) == len(expected)
        assert all(np.array_equal(a, b) for a, b in zip(ours, expected))
        if ours:
            stacked = np.stack(ours)
            assert stacked.sum(0).max() == 1
            assert np.array_equal(stacked.any(0), mask.astype(bool))


def test_diagonal_pixels_are_separate_segments():
    assert len(connected_components(np.eye(3, dtype=np.uint8))) == 3
    assert connected_components(np.zeros((3, 3), dtype=np.uint8)) == []


def test_segments_tensor_shapes():
    like = torch.zeros(1, dtype=torch.float64)
    assert segments_tensor(np.zeros((4, 5), dtype=np.uint8), like).shape == (0, 4, 5)
    mask = torch.tensor([[1, 0, 1], [1, 0, 0]], dtype=torch.uint8)
    segments = segments_tensor(mask, like)
    assert segments.shape == (2, 2, 3) and segments.dtype == torch.float64


##############################################################################
# matching
##############################################################################
def test_hungarian_matches_brute_force(rng):
    for _ in range(500):
        num_queries = int(rng.integers(1, 7))
        num_segments = int(rng.integers(0, num_queries + 1))
        cost = rng.random((num_queries, num_segments)) * 10
        assignment = hungarian_match(cost)
        best = min(
            (sum(cost[q, g] for g, q in enumerate(rows)) for rows in itertools.permutations(range(num_queries), num_segments)),
            default=0.0,
        )
        assert len(assignment) == num_segments
        assert len(set(assignment.query_indices.tolist())) == num_segments
        assert assignment.total_cost == pytest.approx(best, abs=1e-9)


def test_hungarian_identity_and_errors():
    assignment = hungarian_match(np.array([[0.0, 5.0], [5.0, 0.0], [3.0, 3.0]]))
    assert assignment.as_dict() == {0: 0, 1: 1}
    assert assignment.total_cost == 0.0
    assert len(hungarian_match(np.zeros((3, 0)))) == 0
    with pytest.raises(ConfigError):
        hungarian_match(np.zeros((2, 3)))
    with pytest.raises(NumericalError):
        hungarian_match(np.array([[np.nan], [1.0]]))


def _queries_per_segment(assignment, num_segments):
    matched = assignment.as_dict()
    return tuple(matched[g] for g in range(num_segments))


def test_hungarian_ties_go_to_lowest_query():
    assert _queries_per_segment(hungarian_match(np.array([[1, 1], [1, 1], [0, 0]])), 2) == (0, 2)
    cost = np.array([[1, 1, 1], [0, 0, 0], [1, 1, 1], [1, 1, 1]])
    assert _queries_per_segment(hungarian_match(cost), 3) == (0, 1, 2)
    assert _queries_per_segment(hungarian_match(np.zeros((4, 2))), 2) == (0, 1)


def test_hungarian_tie_break_matches_first_optimal_permutation(rng):
    for _ in range(300):
        num_queries = int(rng.integers(1, 6))
        num_segments = int(rng.integers(1, num_queries + 1))
        cost = rng.integers(0, 2, size=(num_queries, num_segments)).astype(np.float64)
        # permutations come out in lexicographic order, so the first optimum is the lowest-index one
        candidates = list(itertools.permutations(range(num_queries), num_segments))
        totals = [sum(cost[q, g] for g, q in enumerate(rows)) for rows in candidates]
        expected = candidates[totals.index(min(totals))]
        assignment = hungarian_match(cost)
        assert _queries_per_segment(assignment, num_segments) == expected
        assert assignment.total_cost == min(totals)
        assert assignment.query_indices.tolist() == sorted(assignment.query_indices.tolist())


def test_dice_cost_values():
    zeros = torch.zeros(2, 2)
    ones = torch.ones(2, 2)
    half = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    assert dice_cost(zeros, zeros).item() == 0.0
    assert dice_cost(ones, ones).item() == 0.0
    assert dice_cost(half, 1 - half).item() == 1.0
    assert dice_cost(half, ones).item() == pytest.approx(1 - 4 / 6)
    # equal areas, half of each overlapping
    shifted = torch.tensor([[0.0, 1.0], [0.0, 1.0]])
    assert dice_cost(half, shifted).item() == 0.5


def test_perfect_mask_with_certain_class_costs_nothing():
    segment = torch.tensor([[1.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
    assert match_cost(segment.clone(), 1.0, segment).item() == 0.0
    assert match_cost(segment.clone(), 0.5, segment).item() == pytest.approx(2 * math.log(2))
    assert match_cost(1 - segment, 1.0, segment).item() > 0.0


def test_cost_matrix_agrees_with_pairwise_cost(rng):
    mask_logits = torch.randn(4, 5, 5, dtype=torch.float64)
    class_logits = torch.randn(4, 3, dtype=torch.float64)
    segments = segments_tensor((rng.random((5, 5)) > 0.6).astype(np.uint8), mask_logits)
    weights = LossWeights(class_weight=1.5, bce_weight=2.0, dice_weight=3.0)
    matrix = cost_matrix(mask_logits, class_logits, segments, weights)
    assert matrix.shape == (4, len(segments))
    pv_prob = class_logits.softmax(-1)[:, 0]
    for q in range(4):
        for g in range(len(segments)):
            expected = match_cost(mask_logits[q].sigmoid(), pv_prob[q], segments[g], weights)
            assert matrix[q, g].item() == pytest.approx(expected.item(), rel=1e-9)


##############################################################################
# losses
##############################################################################
def test_hand_computed_loss():
    mask_rows = [[[2.0, -1.0], [0.5, 1.0]], [[-1.0, 1.0], [-2.0, 0.0]]]
    class_rows = [[1.0, 0.2, -0.5], [0.1, -0.3, 0.8]]
    segment = [[1.0, 0.0], [1.0, 1.0]]
    criterion = SetCriterion(CriterionConfig(deep_supervision=False))
    output = _output(
        torch.tensor([mask_rows], dtype=torch.float64), torch.tensor([class_rows], dtype=torch.float64)
    )
    total, breakdown = criterion(output, [torch.tensor([segment], dtype=torch.float64)])

    def terms(q):
        probs = [_sigmoid(v) for row in mask_rows[q] for v in row]
        targets = [t for row in segment for t in row]
        bce = -sum(t * math.log(p) + (1 - t) * math.log(1 - p) for p, t in zip(probs, targets)) / 4
        dice = 1 - 2 * sum(p * t for p, t in zip(probs, targets)) / (sum(probs) + sum(targets))
        return bce, dice

    costs = []
    for q in range(2):
        bce, dice = terms(q)
        costs.append(2 * -math.log(_softmax(class_rows[q])[0]) + 5 * bce + 5 * dice)
    matched = int(np.argmin(costs))
    other = 1 - matched
    ce = (-math.log(_softmax(class_rows[matched])[0]) - 0.1 * math.log(_softmax(class_rows[other])[2])) / 1.1
    bce, dice = terms(matched)

    assert breakdown["loss_ce"].item() == pytest.approx(ce, abs=1e-9)
    assert breakdown["loss_bce"].item() == pytest.approx(bce, abs=1e-9)
    assert breakdown["loss_dice"].item() == pytest.approx(dice, abs=1e-9)
    assert total.item() == pytest.approx(2 * ce + 5 * bce + 5 * dice, abs=1e-6)


def test_empty_ground_truth_only_pushes_no_object():
    class_logits = torch.randn(1, 5, 3, dtype=torch.float64)
    mask_logits = torch.randn(1, 5, 4, 4, dtype=torch.float64, requires_grad=True)
    criterion = SetCriterion(CriterionConfig(deep_supervision=False))
    total, breakdown = criterion(_output(mask_logits, class_logits), [torch.zeros(0, 4, 4, dtype=torch.float64)])
    expected = -class_logits.log_softmax(-1)[0, :, 2].mean()
    assert total.item() == pytest.approx(2 * expected.item(), abs=1e-12)
    assert breakdown["loss_bce"].item() == 0.0 and breakdown["loss_dice"].item() == 0.0
    total.backward()
    assert torch.count_nonzero(mask_logits.grad) == 0


def test_loss_vanishes_only_for_exact_masks_and_certain_classes():
    segment = torch.tensor([[[1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]], dtype=torch.float64)
    confident = 30.0 * (2 * segment - 1)
    mask_logits = torch.cat([confident, -confident]).unsqueeze(0)
    class_logits = torch.tensor([[[30.0, -30.0, -30.0], [-30.0, -30.0, 30.0]]], dtype=torch.float64)
    criterion = SetCriterion(CriterionConfig(deep_supervision=False))

    total, breakdown = criterion(_output(mask_logits, class_logits), [segment])
    assert total.item() < 1e-10
    assert all(v.item() < 1e-10 for v in breakdown.values())

    wrong_pixel = mask_logits.clone()
    wrong_pixel[0, 0, 0, 0] = -30.0
    total, breakdown = criterion(_output(wrong_pixel, class_logits), [segment])
    assert breakdown["loss_bce"].item() > 1.0 and breakdown["loss_dice"].item() > 0.1

    total, breakdown = criterion(_output(mask_logits, torch.zeros_like(class_logits)), [segment])
    assert breakdown["loss_ce"].item() == pytest.approx(math.log(3))


def test_deep_supervision_adds_auxiliary_terms(tiny_config, rng):
    model = SegmentationModel(tiny_config)
    output = model(torch.rand(2, 3, 32, 32))
    masks = [(rng.random((32, 32)) > 0.8).astype(np.uint8) for _ in range(2)]
    segments = [segments_tensor(m, output.mask_logits) for m in masks]
    # keep G <= N
    segments = [s[:4] for s in segments]
    total, breakdown = SetCriterion()(output, segments)
    terms = ("loss_ce", "loss_bce", "loss_dice")
    assert set(breakdown) == {f"{k}{s}" for k in terms for s in ("", "_0", "_1", "_2", "_3")}
    assert total.item() >= 0.0
    assert all(v.item() >= 0.0 for v in breakdown.values())

    final_only, _ = SetCriterion(CriterionConfig(deep_supervision=False))(output, segments)
    assert final_only.item() < total.item()


def test_too_many_segments_is_a_config_error():
    criterion = SetCriterion()
    output = _output(torch.zeros(1, 1, 3, 3), torch.zeros(1, 1, 3))
    segments = segments_tensor(np.eye(3, dtype=np.uint8), torch.zeros(1))
    with pytest.raises(ConfigError):
        criterion(output, [segments])


def _segments_for(mask, like):
    return [segments_tensor(mask, like)]


def test_total_loss_gradient_matches_finite_differences(smooth_config):
    torch.manual_seed(7)
    model = SegmentationModel(smooth_config).double()
    images = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[4:10, 6:20] = 1
    mask[20:26, 22:28] = 1
    segments = _segments_for(mask, images)
    criterion = SetCriterion()

    def fn():
        return criterion(model(images), segments)[0]

    params = dict(model.named_parameters())
    inputs = [
        params["backbone.stages.3.0.conv1.weight"],
        params["pixel_decoder.encoder.input_proj.0.weight"],
        params["pixel_decoder.pixel_embedding.proj.weight"],
        params["decoder.layers.0.cross_attn.q_proj.weight"],
        params["decoder.queries.content.weight"],
        params["decoder.heads.class_embed.weight"],
    ]
    assert max_relative_error(fn, inputs, max_checks=4) <= 1e-3


def test_small_gradient_step_decreases_loss(smooth_config):
    torch.manual_seed(1)
    model = SegmentationModel(smooth_config).double()
    images = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[8:16, 8:24] = 1
    segments = _segments_for(mask, images) * 2
    criterion = SetCriterion()

    loss, _ = criterion(model(images), segments)
    model.zero_grad()
    loss.backward()
    with torch.no_grad():
        for p in model.parameters():
            if p.grad is not None:
                p -= 1e-5 * p.grad
        after, _ = criterion(model(images), segments)
    assert after.item() < loss.item()


##############################################################################
# checkpoints
##############################################################################
def _one_step(model, optimizer, images):
    segments = _segments_for(np.pad(np.ones((4, 4), dtype=np.uint8), 14), images) * images.shape[0]
    loss, _ = SetCriterion()(model(images), segments)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()


def test_checkpoint_restores_model_and_optimizer(path, tiny_config):
    config = TrainConfig(learning_rate=1e-3)
    model = build_model(tiny_config, seed=0)
    optimizer = make_optimizer(model, config)
    images = torch.rand(1, 3, 32, 32)
    _one_step(model, optimizer, images)
    ckpt_path = save_checkpoint(path / "a.ckpt", model, 1, {"note": "test"}, optimizer)

    ckpt = load_checkpoint(ckpt_path)
    assert ckpt.step == 1 and ckpt.config == {"note": "test"}
    restored = SegmentationModel(tiny_config)
    ckpt.load_into(restored)
    restored_optimizer = make_optimizer(restored, config)
    ckpt.load_optimizer(restored_optimizer, restored)

    model.eval()
    restored.eval()
    with torch.no_grad():
        assert torch.equal(model(images).mask_logits, restored(images).mask_logits)

    # the next update is identical too
    model.train()
    restored.train()
    _one_step(model, optimizer, images)
    _one_step(restored, restored_optimizer, images)
    for (name, a), b in zip(model.named_parameters(), restored.parameters()):
        assert torch.equal(a, b), name


def test_corrupt_checkpoints_are_rejected(path, tiny_config):
    model = build_model(tiny_config)
    good = save_checkpoint(path / "good.ckpt", model, 3, {})
    payload = good.read_bytes()
    assert payload.startswith(MAGIC)

    cases = {
        "magic": b"XXXXXXXX" + payload[8:],
        "version": payload[:8] + (99).to_bytes(4, "little") + payload[12:],
        "truncated": payload[: len(payload) // 2],
        "trailing": payload + b"\0",
    }
    for name, data in cases.items():
        (path / f"{name}.ckpt").write_bytes(data)
        with pytest.raises(CheckpointError):
            load_checkpoint(path / f"{name}.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(path / "missing.ckpt")

    other = SegmentationModel(tiny_config.model_copy(update={"num_queries": 5}))
    with pytest.raises(CheckpointError):
        load_checkpoint(good).load_into(other)


##############################################################################
# training loop
##############################################################################
def test_zero_learning_rate_keeps_parameters(path, tiny_config):
    manifest = _dataset(path)
    model = build_model(tiny_config, seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    config = TrainConfig(learning_rate=0.0, batch_size=2, epochs=1, max_steps=2)
    result = train(manifest, tiny_config, config, path / "run", model=model)
    assert result.steps == 2
    for k, v in result.model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_training_writes_history_and_checkpoints(path, tiny_config):
    manifest = _dataset(path)
    config = TrainConfig(learning_rate=1e-3, batch_size=2, epochs=2)
    result = train(manifest, tiny_config, config, path / "run")
    assert list(result.history["epoch"]) == [1, 2]
    assert result.steps == 4
    assert (path / "run" / "history.csv").exists()
    assert result.last_checkpoint.exists() and result.best_checkpoint.exists()
    assert load_checkpoint(result.last_checkpoint).step == 4
    assert result.history["loss"].notna().all()
    assert result.history["val_iou"].between(0, 1).all()


def test_training_is_deterministic(path, tiny_config):
    manifest = _dataset(path)
    config = TrainConfig(learning_rate=1e-3, batch_size=2, epochs=1, seed=3)
    first = train(manifest, tiny_config, config, path / "one")
    second = train(manifest, tiny_config, config, path / "two")
    assert first.last_checkpoint.read_bytes() == second.last_checkpoint.read_bytes()
    assert (path / "one" / "history.csv").read_bytes() == (path / "two" / "history.csv").read_bytes()


def test_library_checkpoint_loads_through_cli(path, tiny_config):
    manifest = _dataset(path)
    model_config = tiny_config.model_copy(update={"activation": "gelu"})
    config = TrainConfig(batch_size=2, epochs=1, max_steps=1)
    result = train(manifest, model_config, config, path / "run")
    model, run_config, step = load_model(result.last_checkpoint)
    assert step == 1
    assert run_config.model == model_config
    assert run_config.train == config
    for k, v in model.state_dict().items():
        assert torch.equal(v, result.model.state_dict()[k]), k


def test_non_finite_loss_dumps_batch(path, tiny_config):
    manifest = _dataset(path)
    model = build_model(tiny_config)
    with torch.no_grad():
        model.decoder.heads.class_embed.bias[0] = float("nan")
    with pytest.raises(DivergenceError) as info:
        train(manifest, tiny_config, TrainConfig(batch_size=2, epochs=1), path / "run", model=model)
    assert info.value.dump_path.exists()
    assert info.value.dump_path.name == "divergence_step000000.pt"
    dump = torch.load(info.value.dump_path)
    assert dump["images"].shape[0] == 2


def test_training_requires_train_split(path, tiny_config):
    manifest = _dataset(path)
    only_val = manifest.model_copy(
        update={"entries": [e.model_copy(update={"split": Split.val}) for e in manifest.entries]}
    )
    with pytest.raises(Exception, match="train split"):
        train(only_val, tiny_config, TrainConfig(), path / "run")


def test_manifest_on_disk_trains(path, tiny_config):
    _dataset(path)
    manifest = read_manifest(path / "data" / "manifest.jsonl")
    manifest = manifest.model_copy(
        update={"entries": [e.model_copy(update={"split": Split.train}) for e in manifest.entries]}
    )
    result = train(manifest, tiny_config, TrainConfig(batch_size=4, epochs=1), path / "run")
    assert result.best_checkpoint is None
    assert result.history["val_iou"].isna().all()
