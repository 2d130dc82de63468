import json

import pytest
import torch

import stitchlab as sl
from stitchlab.trainer import dm_residual

from conftest import MICRO_RES, MICRO_WIDTH


@pytest.fixture(scope="module")
def micro_trained(micro_data):
    train, _ = micro_data
    recipe = sl.BaseTrainRecipe(epochs=3, lr=0.05, eval_every=0)
    net, _ = sl.train_base("small-residual", train, recipe, seed=31, width=MICRO_WIDTH)
    return net


@pytest.fixture(scope="module")
def micro_trained_pair(micro_data):
    train, _ = micro_data
    recipe = sl.BaseTrainRecipe(epochs=3, lr=0.05, eval_every=0)
    front, _ = sl.train_base("small-residual", train, recipe, seed=41, width=MICRO_WIDTH)
    end, _ = sl.train_base("small-residual", train, recipe, seed=42, width=MICRO_WIDTH)
    return front, end


def test_desk_scale_smoke_two_class_subset(desk_data):
    # width-0.25, 5 epochs, two-class subset: comfortably above 85% validation.
    # Batch 32 keeps enough optimizer steps on the ~400-sample subset.
    train, test = desk_data
    sub_train = train.subset_classes((0, 1))
    sub_test = test.subset_classes((0, 1))
    recipe = sl.BaseTrainRecipe(epochs=5, lr=0.05, batch_size=32, eval_every=0)
    net, log = sl.train_base("small-residual", sub_train, recipe, seed=1, width=0.25)
    acc = sl.accuracy(net, sub_test.normalized_images(), sub_test.labels)
    assert acc > 0.85, f"two-class desk smoke reached only {acc:.3f}"
    assert len(log.records) == 5


def test_base_recipe_validation():
    with pytest.raises(sl.ConfigError):
        sl.BaseTrainRecipe(epochs=0)
    with pytest.raises(sl.ConfigError):
        sl.BaseTrainRecipe(lr=0.0)
    with pytest.raises(sl.ConfigError):
        sl.StitchTrainRecipe(objective=sl.ObjectiveKind.tlm(), epochs=-1)
    with pytest.raises(sl.ConfigError):
        sl.StitchTrainRecipe(objective=sl.ObjectiveKind.tlm(), n_init=0)


def test_training_error_on_nonfinite_data(micro_data):
    train, _ = micro_data
    poisoned = sl.ImageDataset(train.images.clone(), train.labels.clone(),
                               train.num_classes, train.spec)
    poisoned.images[0, 0, 0, 0] = float("nan")
    recipe = sl.BaseTrainRecipe(epochs=1, lr=0.05, augment=False, eval_every=0)
    with pytest.raises(sl.TrainingError) as err:
        sl.train_base("small-residual", poisoned, recipe, seed=0, width=MICRO_WIDTH)
    assert err.value.epoch == 0


def test_stitch_epochs_zero_returns_pure_dm_init(micro_trained, micro_data):
    train, _ = micro_data
    recipe = sl.StitchTrainRecipe(objective=sl.ObjectiveKind.hint(), epochs=0)
    task = sl.StitchTask(micro_trained, micro_trained, 4, 4, recipe, train, seed=0)
    layer, log = sl.train_stitch(task)
    assert log.records == []
    # identical to calling dm_init on the same 100 samples directly
    xn = train.images[:100]
    xn = sl.normalize(xn, train.normalization)
    with torch.no_grad():
        fa = micro_trained.compose_to(4, xn)
        ea = micro_trained.compose_to(4, xn)
    direct = sl.dm_init(fa, ea, in_tap=4, out_tap=4)
    assert torch.equal(layer.weight, direct.weight)
    assert torch.equal(layer.bias, direct.bias)


def test_dm_init_reproducible_bitwise(micro_trained, micro_data):
    train, _ = micro_data
    recipe = sl.StitchTrainRecipe(objective=sl.ObjectiveKind.hint(), epochs=0)
    layers = [sl.train_stitch(sl.StitchTask(micro_trained, micro_trained, 6, 6,
                                            recipe, train, seed=9))[0]
              for _ in range(2)]
    assert torch.equal(layers[0].weight, layers[1].weight)
    assert torch.equal(layers[0].bias, layers[1].bias)


def test_self_stitch_hint_stays_near_baseline(micro_trained, micro_data):
    train, test = micro_data
    baseline = sl.accuracy(micro_trained, test.normalized_images(), test.labels)
    recipe = sl.StitchTrainRecipe(objective=sl.ObjectiveKind.hint(), epochs=2,
                                  augment=False, eval_every=0)
    task = sl.StitchTask(micro_trained, micro_trained, 5, 5, recipe, train, seed=3)
    result = sl.run_stitch_task(task)
    acc = sl.accuracy(result.model, test.normalized_images(), test.labels)
    assert abs(acc - baseline) <= 0.01 + 1e-9


def test_frozen_nets_unchanged_by_stitch_training(micro_pair, micro_data):
    front, end = micro_pair
    train, _ = micro_data
    front_sum = sl.params_checksum(front)
    end_sum = sl.params_checksum(end)
    recipe = sl.StitchTrainRecipe(objective=sl.ObjectiveKind.tlm(), epochs=1, eval_every=0)
    sl.train_stitch(sl.StitchTask(front, end, 3, 3, recipe, train, seed=4))
    assert sl.params_checksum(front) == front_sum
    assert sl.params_checksum(end) == end_sum


def test_source_nets_norm_stats_untouched(micro_pair, micro_data):
    # run_stitch_task must work on its own copies of the running statistics
    front, end = micro_pair
    train, _ = micro_data
    stats = (sl.norm_stats_checksum(front), sl.norm_stats_checksum(end))
    recipe = sl.StitchTrainRecipe(objective=sl.ObjectiveKind.hint(), epochs=1, eval_every=0)
    result = sl.run_stitch_task(sl.StitchTask(front, end, 2, 2, recipe, train, seed=5))
    assert (sl.norm_stats_checksum(front), sl.norm_stats_checksum(end)) == stats
    assert sl.norm_stats_checksum(result.model.end) != stats[1]  # copies did update


def test_loss_monotone_over_training(micro_pair, micro_data):
    front, end = micro_pair
    train, _ = micro_data
    recipe = sl.StitchTrainRecipe(objective=sl.ObjectiveKind.hint(), epochs=4,
                                  augment=False, eval_every=0)
    _, log = sl.train_stitch(sl.StitchTask(front, end, 4, 4, recipe, train, seed=6))
    losses = log.series("train_loss")
    assert losses[-1] <= losses[0] * 1.01


def test_hint_training_never_increases_full_set_dm_residual(micro_trained_pair, micro_data):
    # The residual depends on (layer, normalization statistics); RS updates move
    # the statistics during training, so the layers are compared against the
    # same final network state.
    front, end = micro_trained_pair
    train, _ = micro_data
    init_recipe = sl.StitchTrainRecipe(objective=sl.ObjectiveKind.hint(), epochs=0)
    trained_recipe = sl.StitchTrainRecipe(objective=sl.ObjectiveKind.hint(), epochs=3,
                                          augment=False, eval_every=0)
    for tap in (5, 9):
        init = sl.run_stitch_task(sl.StitchTask(front, end, tap, tap, init_recipe, train, seed=7))
        trained = sl.run_stitch_task(sl.StitchTask(front, end, tap, tap, trained_recipe, train, seed=7))
        init_under_final_stats = sl.StitchedModel(trained.model.front, trained.model.end,
                                                  init.layer, tap, tap)
        r_init = dm_residual(init_under_final_stats, train)
        r_trained = dm_residual(trained.model, train)
        assert r_trained <= r_init * (1 + 1e-6), f"tap {tap}: {r_trained} > {r_init}"


def test_class_subset_restricts_training_data(micro_trained, micro_data):
    train, _ = micro_data
    recipe = sl.StitchTrainRecipe(objective=sl.ObjectiveKind.tlm(), epochs=0,
                                  class_subset=(0,))
    # n_init larger than the subset: init succeeds on what is available
    task = sl.StitchTask(micro_trained, micro_trained, 3, 3, recipe, train, seed=8)
    layer, _ = sl.train_stitch(task)
    assert layer.in_channels == micro_trained.tap_shapes[3][0]


def test_objective_weight_mismatch_raises(micro_pair, micro_data):
    front, end = micro_pair
    train, _ = micro_data
    bad = sl.ObjectiveKind.fula(weights=sl.FuLAWeights((0.5, 0.5)))
    recipe = sl.StitchTrainRecipe(objective=bad, epochs=1, eval_every=0)
    with pytest.raises(sl.ConfigError):
        sl.train_stitch(sl.StitchTask(front, end, 3, 3, recipe, train, seed=9))


def test_metrics_log_jsonl_roundtrip(tmp_path):
    log = sl.MetricsLog()
    log.append(epoch=0, train_loss=1.5, clean_acc=0.5)
    log.append(epoch=1, train_loss=0.7)
    path = tmp_path / "log.jsonl"
    log.to_jsonl(path)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert lines == log.to_list()
    assert log.final["epoch"] == 1
    assert log.series("clean_acc") == [0.5]


def test_stitch_eval_records_requested_metrics(micro_trained, micro_data):
    train, test = micro_data
    recipe = sl.StitchTrainRecipe(
        objective=sl.ObjectiveKind.tlm(), epochs=1, eval_every=1,
        at=sl.ATConfig(alpha=0.5, attack=sl.AttackSpec(iters=2)),
        shortcut=sl.ShortcutSpec(kind="pattern", marker_size=2))
    task = sl.StitchTask(micro_trained, micro_trained, 8, 8, recipe, train,
                         eval_data=test.first_n(64), seed=10)
    _, log = sl.train_stitch(task)
    final = log.final
    assert {"clean_acc", "robust_acc", "shortcut_acc"} <= set(final)
