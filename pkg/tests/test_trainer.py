import copy
import csv
import dataclasses
import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from outlierflow.core.composer import MixedBatch, PatchSpec
from outlierflow.core.data_io import SplitData, load_split
from outlierflow.core.errors import ConfigurationError, DomainError
from outlierflow.core.flow import bits_per_dim
from outlierflow.core.metrics import evaluate_classifier
from outlierflow.core.options import RunConfig
from outlierflow.core.shapes import generate_shapes_dataset
from outlierflow.core.trainer import (
    JointState,
    TrainSchedule,
    apply_routed_gradients,
    joint_losses,
    joint_step,
    joint_train,
    load_state,
    make_mixed_batch,
    pretrain_classifier,
    pretrain_flow,
    random_crops,
    save_state,
    seed_everything,
    write_histogram,
)
from outlierflow.experiments.pipeline import build_classifier, build_flow, build_gan, initialize_flow


def _joint_state(config, train, gan=False):
    seed_everything(config.seed, config.deterministic)
    schedule = TrainSchedule.from_config(config)
    classifier = build_classifier(config)
    steps = schedule.steps_per_epoch(len(train))
    if gan:
        return JointState.create(classifier, None, schedule, steps, gan=build_gan(config)), schedule
    flow = initialize_flow(build_flow(config), train, config)
    return JointState.create(classifier, flow, schedule, steps), schedule


def _mixed_batch(state, train, schedule):
    return make_mixed_batch(state, train.images[:2], train.labels[:2], schedule.patch_range)


def _snapshot(module: nn.Module):
    return [p.detach().clone() for p in module.parameters()]


def _unchanged(module: nn.Module, snapshot) -> bool:
    return all(torch.equal(p, q) for p, q in zip(module.parameters(), snapshot))


def test_schedule_from_config(tiny_config):
    schedule = TrainSchedule.from_config(tiny_config)
    assert schedule.patch_range == (8, 16)
    assert schedule.lam == tiny_config.lam
    assert schedule.steps_per_epoch(5) == 3
    for bad in ({"lam": -1.0}, {"loss_kind": "tv"}, {"batch_size": 0}, {"joint_epochs": -1}):
        with pytest.raises(ConfigurationError):
            TrainSchedule(**bad)


def test_pretrain_classifier(tiny_config, train_split):
    seed_everything(tiny_config.seed)
    schedule = TrainSchedule.from_config(tiny_config.replace(cls_epochs=2))
    progress = []
    result = pretrain_classifier(build_classifier(tiny_config), train_split, schedule,
                                 lambda pct, msg: progress.append(pct))
    assert len(result.history) == 2
    assert all(math.isfinite(v) for v in result.history)
    assert progress[-1] == 100.0


def test_pretrain_classifier_rejects_outlier_labels(tiny_config, train_split):
    labels = train_split.labels.clone()
    labels[0, 0, 0] = tiny_config.num_classes
    data = SplitData(train_split.images, labels)
    with pytest.raises(DomainError):
        pretrain_classifier(build_classifier(tiny_config), data, TrainSchedule.from_config(tiny_config))


def test_pretrain_flow(tiny_config, train_split):
    seed_everything(tiny_config.seed)
    schedule = TrainSchedule.from_config(tiny_config)
    result = pretrain_flow(build_flow(tiny_config), train_split, tiny_config.crop_size, schedule)
    assert result.model.initialized
    assert math.isfinite(result.initial)
    assert len(result.history) == 1 and math.isfinite(result.history[0])
    with pytest.raises(ConfigurationError):
        pretrain_flow(build_flow(tiny_config), train_split, 128, schedule)


def test_pretrain_classifier_lowers_cross_entropy(tiny_config, train_split):
    config = tiny_config.replace(cls_epochs=4, cls_lr=1e-2, classifier_width=8)
    seed_everything(config.seed)
    result = pretrain_classifier(build_classifier(config), train_split, TrainSchedule.from_config(config))
    assert result.history[-1] < result.history[0]


def test_pretrain_flow_lowers_bits_per_dim(tiny_config, train_split):
    config = tiny_config.replace(flow_epochs=4, flow_lr=3e-3)
    seed_everything(config.seed)
    schedule = TrainSchedule.from_config(config)
    result = pretrain_flow(build_flow(config), train_split, config.crop_size, schedule)
    # Same crops and dequantization noise as the initial measurement.
    reference = random_crops(train_split.images[: schedule.batch_size], config.crop_size,
                             np.random.default_rng(schedule.seed))
    with torch.no_grad():
        after = float(bits_per_dim(result.model, reference, generator=torch.Generator().manual_seed(schedule.seed)))
    assert after < result.initial


def test_random_crops_shape(train_split):
    crops = random_crops(train_split.images, 16, np.random.default_rng(0))
    assert crops.shape == (len(train_split), 3, 16, 16)


def test_routed_gradients():
    a = nn.Parameter(torch.tensor(2.0))
    b = nn.Parameter(torch.tensor(3.0))
    norm_theta, norm_gamma = apply_routed_gradients(a ** 2, a * b, b ** 2, [a], [b])
    assert float(a.grad) == pytest.approx(4.0 + 3.0)
    assert float(b.grad) == pytest.approx(2.0 + 6.0)
    assert norm_theta == pytest.approx(3.0)
    assert norm_gamma == pytest.approx(2.0)


def test_joint_step_couples_both_models(tiny_config, train_split):
    state, schedule = _joint_state(tiny_config, train_split)
    batch = _mixed_batch(state, train_split, schedule)
    losses = joint_step(state, batch, schedule.lam, "jsd")
    assert losses.neg_grad_theta > 0
    assert losses.neg_grad_gamma > 0
    assert losses.adv == 0.0
    assert all(math.isfinite(v) for v in (losses.cls, losses.neg, losses.nll, losses.total))
    assert losses.max_neg_pixel <= schedule.lam * math.log(2.0) + 1e-6
    assert state.step == 1


def test_zero_weight_decouples(tiny_config, train_split):
    state, schedule = _joint_state(tiny_config, train_split)
    losses = joint_step(state, _mixed_batch(state, train_split, schedule), 0.0, "jsd")
    assert losses.neg_grad_theta == 0.0
    assert losses.neg_grad_gamma == 0.0


def test_frozen_flow_is_not_updated(tiny_config, train_split):
    state, schedule = _joint_state(tiny_config, train_split)
    state.flow_frozen = True
    before = _snapshot(state.flow)
    losses = joint_step(state, _mixed_batch(state, train_split, schedule), schedule.lam, "kl")
    assert losses.neg_grad_gamma == 0.0
    assert losses.neg_grad_theta > 0
    assert _unchanged(state.flow, before)


def test_frozen_classifier_is_not_updated(tiny_config, train_split):
    state, schedule = _joint_state(tiny_config, train_split)
    state.classifier_frozen = True
    before = _snapshot(state.classifier)
    losses = joint_step(state, _mixed_batch(state, train_split, schedule), schedule.lam, "rkl")
    assert losses.neg_grad_theta == 0.0
    assert losses.neg_grad_gamma > 0
    assert _unchanged(state.classifier, before)


def test_gan_negatives(tiny_config, train_split):
    state, schedule = _joint_state(tiny_config, train_split, gan=True)
    assert state.source == "gan"
    losses = joint_step(state, _mixed_batch(state, train_split, schedule), schedule.lam, "jsd")
    assert losses.nll == 0.0
    assert math.isfinite(losses.adv)
    assert losses.neg_grad_gamma > 0


def test_joint_state_needs_a_generator(tiny_config):
    with pytest.raises(ConfigurationError):
        JointState.create(build_classifier(tiny_config), None, TrainSchedule.from_config(tiny_config), 1)


def test_joint_train_writes_history(tiny_config, train_split, tmp_path):
    state, schedule = _joint_state(tiny_config, train_split)
    joint_train(state, train_split, schedule, tmp_path, eval_fn=lambda s: {"epoch_metric": float(s.epoch)})
    assert state.epoch == 1
    assert state.history[0]["epoch_metric"] == 1.0
    for name in ("losses.csv", "neg_hist_epoch01.csv", "joint_state.pt"):
        assert (tmp_path / name).exists()
    with open(tmp_path / "losses.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert {"epoch", "cls", "neg", "nll", "total", "max_neg_pixel", "epoch_metric"} <= set(rows[0])


def test_resume_matches_uninterrupted_run(tiny_config, train_split, tmp_path):
    config = tiny_config.replace(joint_epochs=2)

    straight, schedule = _joint_state(config, train_split)
    joint_train(straight, train_split, schedule)

    first, _ = _joint_state(config, train_split)
    joint_train(first, train_split, dataclasses.replace(schedule, joint_epochs=1))
    path = save_state(first, tmp_path / "joint_state.pt")

    resumed, _ = _joint_state(config, train_split)
    load_state(resumed, path)
    assert resumed.epoch == 1
    joint_train(resumed, train_split, schedule)

    assert resumed.step == straight.step
    for p, q in zip(resumed.classifier.parameters(), straight.classifier.parameters()):
        torch.testing.assert_close(p, q)
    for p, q in zip(resumed.flow.parameters(), straight.flow.parameters()):
        torch.testing.assert_close(p, q)


def test_state_dict_is_independent_copy(tiny_config, train_split):
    state, _ = _joint_state(tiny_config, train_split)
    saved = copy.deepcopy(state.state_dict())
    assert saved["epoch"] == 0 and saved["flow"] is not None and saved["gan"] is None


def test_write_histogram(tmp_path):
    write_histogram(np.array([0.1, 0.2, 0.2]), tmp_path / "h.csv", bins=4)
    write_histogram(np.zeros(0), tmp_path / "empty.csv", bins=4)
    for name in ("h.csv", "empty.csv"):
        lines = (tmp_path / name).read_text(encoding="utf-8").strip().splitlines()
        assert lines[0] == "bin_lo,bin_hi,count"
        assert len(lines) == 5


def _fixed_batch(train, mask_value: float) -> MixedBatch:
    images, labels = train.images[:2], train.labels[:2]
    masks = torch.full((2, *images.shape[-2:]), mask_value)
    crops = [image[:, :16, :16] for image in images]
    return MixedBatch(images, masks, crops, labels, [PatchSpec(16, 16, 0, 0)] * 2)


def test_no_pasted_pixels_means_no_negative_loss(tiny_config, train_split):
    state, schedule = _joint_state(tiny_config, train_split)
    losses = joint_losses(state, _fixed_batch(train_split, 0.0), schedule.lam)
    assert float(losses["neg"]) == 0.0
    assert float(losses["cls"]) > 0.0


def test_fully_pasted_image_has_no_cross_entropy(tiny_config, train_split):
    state, schedule = _joint_state(tiny_config, train_split)
    losses = joint_losses(state, _fixed_batch(train_split, 1.0), schedule.lam)
    assert float(losses["cls"]) == 0.0
    assert float(losses["neg"]) > 0.0


def test_joint_train_pixel_loss_stays_below_js_bound(tiny_config, train_split):
    config = tiny_config.replace(joint_epochs=2)
    state, schedule = _joint_state(config, train_split)
    joint_train(state, train_split, schedule)
    assert len(state.history) == 2
    for row in state.history:
        assert 0.0 < row["max_neg_pixel"] <= schedule.lam * math.log(2.0) + 1e-6


def test_joint_step_does_not_raise_loss_on_fixed_batch(tiny_config, train_split):
    state, schedule = _joint_state(tiny_config, train_split)
    batch = _mixed_batch(state, train_split, schedule)
    batch = dataclasses.replace(batch, images=batch.images.detach())

    def total() -> float:
        state.classifier.train()
        with torch.no_grad():
            losses = joint_losses(state, batch, schedule.lam, "jsd", generator=torch.Generator().manual_seed(0))
        return float(losses["cls"] + schedule.lam * losses["neg"] + losses["nll"])

    before = total()
    joint_step(state, batch, schedule.lam, "jsd")
    assert total() <= before


@pytest.mark.slow
def test_joint_training_improves_anomaly_detection(tmp_path):
    config = RunConfig()
    manifest = generate_shapes_dataset(tmp_path / "data", config.seed, config.n_train, config.n_test,
                                       config.num_classes, config.image_size, config.flow_levels)
    train, test = load_split(manifest, "train"), load_split(manifest, "test")
    seed_everything(config.seed, config.deterministic)
    schedule = TrainSchedule.from_config(config)

    classifier = pretrain_classifier(build_classifier(config), train, schedule).model
    flow = pretrain_flow(build_flow(config), train, config.crop_size, schedule).model
    pretrained = copy.deepcopy(classifier)

    state = JointState.create(classifier, flow, schedule, schedule.steps_per_epoch(len(train)))
    joint_train(state, train, schedule)

    kind, temperature = config.score_kind, config.temperature
    before = evaluate_classifier(pretrained, test, config.num_classes, kind, temperature)
    after = evaluate_classifier(state.classifier, test, config.num_classes, kind, temperature)
    assert after.auroc > 0.5
    assert after.auroc > before.auroc
