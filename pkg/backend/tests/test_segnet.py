"""
Network structure, loss, optimizer, training and checkpoints.
"""
import math

import numpy as np
import pytest
import torch
from errors import DataError, NumericalError, ValidationError
from harmonize import linear_normalize
from models import PhantomProfile, Topology, TrainConfig
from phantom import generate_scan
from segnet import (
    AdamState,
    adam_step,
    build_model,
    check_gradients,
    count_parameters,
    forward,
    gradients,
    load_checkpoint,
    predict,
    save_checkpoint,
    split_grouped,
    topology_nodes,
    train,
    weighted_bce,
)
from slicer import SliceProvenance, SliceSample, extract_slices

KINK_MARGIN = 1e-3
SMALL = Topology(depth=2, base_channels=2)


def _kink_margin(model, batch: np.ndarray) -> float:
    """Smallest distance of any ReLU input from 0 or max-pool window from a tie"""
    preactivations, pooled = [], []
    hooks = []
    for name, block in model.blocks.items():
        for conv in (block.conv1, block.conv2):
            hooks.append(
                conv.register_forward_hook(lambda m, i, o: preactivations.append(o))
            )
        i, j = (int(k) for k in name.split("_")[1:])
        if j == 0 and i < model.topology.depth - 1:
            hooks.append(block.register_forward_hook(lambda m, i, o: pooled.append(o)))
    with torch.no_grad():
        forward(model, batch)
    for hook in hooks:
        hook.remove()

    margin = min(float(t.abs().min()) for t in preactivations)
    for t in pooled:
        b, c, h, w = t.shape
        blocks = t.reshape(b, c, h // 2, 2, w // 2, 2).permute(0, 1, 2, 4, 3, 5)
        windows = blocks.reshape(-1, 4)
        top = windows.sort(dim=1, descending=True).values
        live = top[:, 0] > 0
        if live.any():
            margin = min(margin, float((top[live, 0] - top[live, 1]).min()))
    return margin


def _slice(group: str, z: int = 0, side: int = 4) -> SliceSample:
    return SliceSample(
        image=np.zeros((side, side)),
        mask=np.zeros((side, side)),
        provenance=SliceProvenance("d", group, f"{group}_scan", z),
    )


@pytest.mark.unit
class TestStructure:
    def test_nested_dense_node_count(self):
        assert len(topology_nodes(Topology(depth=3))) == 6

    def test_plain_skip_keeps_only_the_diagonal(self):
        nodes = topology_nodes(Topology(kind="plain_skip", depth=3))
        assert nodes == [(0, 0), (1, 0), (2, 0), (1, 1), (0, 2)]

    def test_probability_output(self):
        model = build_model(Topology(depth=3, base_channels=2), seed=0)
        probs = forward(model, np.random.default_rng(0).random((2, 8, 8)))
        assert probs.shape == (2, 8, 8)
        assert torch.all((probs > 0) & (probs < 1))

    def test_seeded_init_is_reproducible(self):
        a = build_model(SMALL, seed=3)
        b = build_model(SMALL, seed=3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_side_not_divisible_by_depth(self):
        model = build_model(Topology(depth=3, base_channels=2))
        with pytest.raises(ValidationError, match="divisible"):
            forward(model, np.zeros((1, 6, 6)))

    def test_non_finite_input(self):
        model = build_model(SMALL)
        batch = np.ones((1, 4, 4))
        batch[0, 1, 1] = np.nan
        with pytest.raises(NumericalError):
            forward(model, batch)

    def test_zero_parameters_give_half_probability(self):
        model = build_model(Topology(depth=3, base_channels=2), seed=0)
        with torch.no_grad():
            for param in model.parameters():
                param.zero_()
        probs = forward(model, np.random.default_rng(1).random((2, 8, 8)))
        assert torch.all(probs == 0.5)
        masks = predict(model, [_slice("p0", side=8)], threshold=0.5)
        assert masks[0].shape == (8, 8)
        assert np.all(masks[0] == 1)

    def test_layouts_coincide_at_depth_two(self):
        nested = build_model(SMALL.model_copy(update={"kind": "nested_dense"}), seed=4)
        plain = build_model(SMALL.model_copy(update={"kind": "plain_skip"}), seed=4)
        assert nested.node_ids == plain.node_ids
        batch = np.random.default_rng(2).random((1, 8, 8))
        assert torch.equal(forward(nested, batch), forward(plain, batch))

    def test_nested_dense_has_more_parameters(self):
        assert count_parameters(build_model(Topology(kind="nested_dense"))) == 32513
        assert count_parameters(build_model(Topology(kind="plain_skip"))) == 29617


@pytest.mark.unit
class TestLoss:
    def test_half_probability_gives_half_log_two(self):
        probs = torch.full((1, 4, 4), 0.5, dtype=torch.float64)
        masks = np.zeros((1, 4, 4))
        masks[0, :2] = 1
        assert weighted_bce(probs, masks, 0.8).item() == pytest.approx(math.log(2) / 2)

    def test_saturated_probabilities_stay_finite(self):
        probs = torch.tensor([[[0.0, 1.0]]], dtype=torch.float64)
        loss = weighted_bce(probs, np.array([[[1, 0]]]), 0.8)
        assert math.isfinite(loss.item())

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            weighted_bce(torch.zeros((1, 4, 4)), np.zeros((1, 4, 5)), 0.8)


@pytest.mark.unit
class TestBackprop:
    def test_dead_relu_passes_no_gradient(self):
        model = build_model(SMALL, seed=0, dtype=torch.float64)
        with torch.no_grad():
            model.blocks["x_0_0"].conv1.bias[0] = -1e3
        rng = np.random.default_rng(0)
        batch = rng.random((1, 8, 8))
        masks = (rng.random((1, 8, 8)) < 0.3).astype(np.float64)
        grads = gradients(model, batch, masks, 0.8)
        assert torch.all(grads["blocks.x_0_0.conv1.weight"][0] == 0.0)
        assert grads["blocks.x_0_0.conv1.bias"][0] == 0.0


@pytest.mark.acceptance
class TestGradients:
    def test_autograd_matches_finite_differences(self):
        topology = SMALL
        rng = np.random.default_rng(0)
        for seed in range(200):
            model = build_model(topology, seed=seed, dtype=torch.float64)
            batch = rng.random((1, 8, 8))
            if _kink_margin(model, batch) > KINK_MARGIN:
                break
        else:
            pytest.fail("no kink-free network found")

        masks = (rng.random((1, 8, 8)) < 0.3).astype(np.float64)
        assert count_parameters(model) == 433
        assert check_gradients(model, batch, masks, 0.8, h=1e-5) < 1e-4


@pytest.mark.unit
class TestOptimizer:
    def test_first_adam_step_moves_by_learning_rate(self):
        model = build_model(SMALL, seed=1, dtype=torch.float64)
        cfg = TrainConfig()
        state = AdamState.create(model, cfg)
        generator = torch.Generator().manual_seed(0)
        grads = {
            name: torch.randn(p.shape, generator=generator, dtype=torch.float64)
            for name, p in model.named_parameters()
        }
        before = {name: p.detach().clone() for name, p in model.named_parameters()}

        adam_step(model, grads, state)

        assert state.t == 1
        for name, param in model.named_parameters():
            g = grads[name] + cfg.weight_decay * before[name]
            expected = before[name] - cfg.lr * g / (g.abs() + cfg.adam_eps)
            torch.testing.assert_close(param.detach(), expected, rtol=0, atol=1e-12)

    def test_two_unit_gradient_steps_move_by_twice_the_learning_rate(self):
        model = build_model(SMALL, seed=1, dtype=torch.float64)
        cfg = TrainConfig(weight_decay=0.0)
        state = AdamState.create(model, cfg)
        before = {name: p.detach().clone() for name, p in model.named_parameters()}
        ones = {name: torch.ones_like(p) for name, p in model.named_parameters()}

        adam_step(model, ones, state)
        adam_step(model, ones, state)

        assert state.t == 2
        for name, param in model.named_parameters():
            expected = before[name] - 2.0 * cfg.lr / (1.0 + cfg.adam_eps)
            torch.testing.assert_close(param.detach(), expected, rtol=0, atol=1e-12)

    def test_zero_gradient_leaves_parameters_unchanged(self):
        model = build_model(SMALL, seed=1, dtype=torch.float64)
        state = AdamState.create(model, TrainConfig(weight_decay=0.0))
        before = {name: p.detach().clone() for name, p in model.named_parameters()}

        zeros = {name: torch.zeros_like(p) for name, p in model.named_parameters()}
        adam_step(model, zeros, state)

        assert state.t == 1
        for name, param in model.named_parameters():
            assert torch.equal(param.detach(), before[name])

    def test_missing_gradient(self):
        model = build_model(SMALL)
        with pytest.raises(ValidationError, match="Missing"):
            adam_step(model, {}, AdamState.create(model, TrainConfig()))


@pytest.mark.unit
class TestSplit:
    def test_groups_never_straddle(self):
        samples = [_slice(f"p{g}", z) for g in range(10) for z in range(3)]
        train_set, val_set = split_grouped(samples, 0.8, seed=5)
        train_groups = {s.group_key for s in train_set}
        val_groups = {s.group_key for s in val_set}
        assert len(train_groups) == 8
        assert len(val_groups) == 2
        assert not train_groups & val_groups
        assert len(train_set) + len(val_set) == len(samples)

    def test_split_is_seeded(self):
        samples = [_slice(f"p{g}") for g in range(6)]
        a = split_grouped(samples, 0.5, seed=2)
        b = split_grouped(samples, 0.5, seed=2)
        assert [s.group_key for s in a[1]] == [s.group_key for s in b[1]]

    def test_single_group(self):
        with pytest.raises(ValidationError):
            split_grouped([_slice("p0", z) for z in range(4)], 0.8, seed=0)

    @pytest.mark.parametrize(
        "n_groups, ratio, n_train",
        [(25, 0.56, 14), (5, 0.8, 4), (10, 0.7, 7), (3, 0.5, 2)],
    )
    def test_train_share_rounds_up_exactly(self, n_groups, ratio, n_train):
        samples = [_slice(f"p{g}") for g in range(n_groups)]
        train_set, val_set = split_grouped(samples, ratio, seed=0)
        assert len(train_set) == n_train
        assert len(val_set) == n_groups - n_train


@pytest.mark.unit
class TestTraining:
    def test_training_is_deterministic(self, ball_pair):
        samples = extract_slices(*ball_pair, size=8)
        cfg = TrainConfig(epochs=2, batch_size=2, topology=SMALL)
        first = train(samples, cfg, val_samples=samples)
        second = train(samples, cfg, val_samples=samples)
        assert [e.train_loss for e in first.log] == [e.train_loss for e in second.log]
        assert first.best_epoch in (1, 2)
        assert len(predict(first.model, samples)) == len(samples)

    def test_checkpoint_restores_predictions(self, tmp_path):
        model = build_model(SMALL, seed=4)
        save_checkpoint(model, tmp_path / "model", TrainConfig(), epoch=3, val_dice=0.5)
        restored, meta = load_checkpoint(tmp_path / "model")
        batch = np.random.default_rng(1).random((1, 8, 8))
        with torch.no_grad():
            torch.testing.assert_close(forward(restored, batch), forward(model, batch))
        assert meta["epoch"] == 3
        assert Topology(**meta["topology"]) == model.topology

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "absent")


@pytest.mark.slow
@pytest.mark.acceptance
class TestOverfit:
    def test_eight_slices_are_memorized(self):
        profile = PhantomProfile(
            site_id="overfit",
            dims=(224, 224, 12),
            spacing=(0.25, 0.25, 1.0),
            lesion_count_range=(4, 6),
            seed=11,
        )
        samples = []
        for scan_index in range(6):
            volume, mask, _ = generate_scan(profile, scan_index)
            slices = extract_slices(linear_normalize(volume), mask, size=224)
            samples += [s for s in slices if s.lesion_pixels]
            if len(samples) >= 8:
                break
        samples = samples[:8]
        assert len(samples) == 8

        cfg = TrainConfig(epochs=50, batch_size=1)
        result = train(samples, cfg, val_samples=samples)

        assert result.log[-1].train_loss < result.log[0].train_loss
        assert result.best_val_dice > 0.95
