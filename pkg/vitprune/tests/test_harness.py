import dataclasses
import pathlib

import numpy as np
import pytest
import threadpoolctl

from .. import harness
from ..config import ExperimentConfig, load_config
from ..errors import CheckpointMismatchError, DivergenceError, ShapeError
from ..params import ModelDims, init_params
from ..pruning_engine import PruneConfig, block_flops

TINY = {
    "seed": 0,
    "train_scenes": 8,
    "eval_scenes": 4,
    "seeds": [0, 1, 2],
    "model": {"layers": 2, "heads": 2, "width": 16, "patch": 4,
              "image_size": 16, "classes": 4},
    "prune": {"gated_layers": [2], "keep_ratios": [0.7]},
    "optim": {"dense_epochs": 1, "sparse_epochs": 1, "batch_size": 4},
    "scenes": {"image_size": 16, "patch_size": 4, "n_shapes": 2,
               "n_classes": 4},
}


CONFIGS = pathlib.Path(__file__).resolve().parents[2] / "configs"
DENSE8_ACCURACY = 0.95


def tiny_config(**changes):
    doc = dict(TINY, **changes)
    return ExperimentConfig.from_dict(doc)


def bench_inputs(n_images=2):
    config = load_config(CONFIGS / "bench.yaml")
    params = init_params(config.model, np.random.default_rng(0),
                         config.prune.gated_layers)
    _, held_out = harness.datasets(config)
    return config, params, [scene[0] for scene in held_out[:n_images]]


def test_schedule_from_ratio():
    assert harness.schedule_from_ratio(1.0, 9) == (1.0,) * 9
    assert harness.schedule_from_ratio(0.7, 9) == \
        (0.7, 0.7, 0.7, 0.49, 0.49, 0.49, 0.343, 0.343, 0.343)
    assert harness.schedule_from_ratio(0.5, 9)[-3:] == (0.125,) * 3
    assert harness.schedule_from_ratio(0.6, 9)[-1] == 0.216


def test_schedule_masks_are_nested_and_exact():
    cfg = PruneConfig()
    rng = np.random.default_rng(0)
    for _ in range(10):
        masks = harness.schedule_masks(cfg, 1024, rng)
        assert masks.sum(axis=1).tolist() == \
            [717, 717, 717, 502, 502, 502, 352, 352, 352]
        assert np.all(masks[1:] <= masks[:-1])


def test_streams_are_independent_of_each_other():
    a = harness.stream(3, harness.STREAM_SPARSE_ORDER).random(4)
    b = harness.stream(3, harness.STREAM_SPARSE_ORDER).random(4)
    c = harness.stream(3, harness.STREAM_GATE_INIT).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_datasets_are_reproducible():
    config = tiny_config()
    first, second = harness.datasets(config), harness.datasets(config)
    for (a, _), (b, _) in zip(first[1], second[1]):
        assert np.array_equal(a, b)
    assert len(first[0]) == 8 and len(first[1]) == 4


def test_evaluate_dense_model_costs_dense_flops():
    config = tiny_config()
    params = init_params(config.model, np.random.default_rng(0))
    _, held_out = harness.datasets(config)
    metrics = harness.evaluate(params, held_out, PruneConfig.dense())
    assert metrics.flops == 2 * block_flops(16, 16)
    assert metrics.keep_ratio == ()
    assert 0.0 <= metrics.accuracy <= 1.0
    assert 0.0 <= metrics.mean_iou <= 1.0
    again = harness.evaluate(params, held_out, PruneConfig.dense())
    assert again.to_record() == metrics.to_record()


def test_evaluate_threads_do_not_change_metrics():
    config = tiny_config()
    params = init_params(config.model, np.random.default_rng(1), (2,))
    _, held_out = harness.datasets(config)
    one = harness.evaluate(params, held_out, config.prune, threads=1)
    many = harness.evaluate(params, held_out, config.prune, threads=3)
    assert one.to_record() == many.to_record()


def test_metric_records_leave_out_timing():
    config = tiny_config()
    params = init_params(config.model, np.random.default_rng(0))
    _, held_out = harness.datasets(config)
    metrics = harness.evaluate(params, held_out, PruneConfig.dense())
    assert "seconds_per_image" not in metrics.to_record()
    assert metrics.to_record(timing=True)["seconds_per_image"] > 0.0


def test_evaluate_rejects_wrong_image_shape():
    config = tiny_config()
    params = init_params(config.model, np.random.default_rng(0))
    scenes = [(np.zeros((32, 32, 3)), np.zeros(64, dtype=int))]
    with pytest.raises(ShapeError) as info:
        harness.evaluate(params, scenes, PruneConfig.dense())
    assert info.value.left == (32, 32, 3)
    assert info.value.right == (16, 16, 3)


def test_check_compatible_names_the_tensor():
    params = init_params(ModelDims(layers=2, heads=2, width=16, patch=4,
                                   image_size=16), np.random.default_rng(0))
    other = ModelDims(layers=2, heads=2, width=24, patch=4, image_size=16)
    with pytest.raises(CheckpointMismatchError) as info:
        harness.check_compatible(params, other)
    assert info.value.name == "blocks.1.attn.k.b"


def test_check_compatible_needs_gates():
    config = tiny_config()
    params = init_params(config.model, np.random.default_rng(0))
    harness.check_compatible(params, config.model)
    with pytest.raises(CheckpointMismatchError) as info:
        harness.check_compatible(params, config.model, config.prune)
    assert info.value.name == "gates.2.fc1.w"


def test_gradcheck_on_selected_tensors():
    config = tiny_config()
    names = ["gates.2.fc1.w", "gates.2.fc2.b", "blocks.2.ln1.g",
             "blocks.1.attn.v.b", "head.b"]
    report = harness.gradcheck_model(config.model, config.prune, 0,
                                     names=names)
    assert report.passed, report.errors
    assert sorted(report.errors) == sorted(names)


@pytest.mark.slow
def test_gradcheck_whole_model():
    config = tiny_config()
    report = harness.gradcheck_model(config.model, config.prune, 0)
    assert report.passed, report.worst()


def test_divergence_keeps_last_good_parameters():
    config = tiny_config()
    dense = init_params(config.model, np.random.default_rng(0))
    dense.tensors["head.b"][:] = np.nan
    with pytest.raises(DivergenceError) as info:
        harness.train(config, dense_params=dense)
    assert info.value.stage == harness.SPARSE
    assert (info.value.epoch, info.value.step) == (1, 0)
    assert "gates.2.fc1.w" in info.value.last_good


def test_bench_with_a_single_repeat():
    config = tiny_config()
    params = init_params(config.model, np.random.default_rng(0), (2,))
    _, held_out = harness.datasets(config)
    images = [scene[0] for scene in held_out[:2]]
    report = harness.bench_wall_clock(params, config.prune, images, 1,
                                      masks="schedule")
    dense, sparse = report.rows
    assert (dense.config, sparse.config) == ("dense", "sparse")
    assert dense.samples == sparse.samples == 2
    assert report.flop_ratio < 1.0
    assert report.backbone_ratio > 0.0


def test_bench_holds_blas_to_one_thread(monkeypatch):
    config = tiny_config()
    params = init_params(config.model, np.random.default_rng(0), (2,))
    _, held_out = harness.datasets(config)
    threads = []
    run_backbone = harness.run_backbone

    def counting(*args, **kwargs):
        threads.append([info["num_threads"] for info in
                        threadpoolctl.threadpool_info()
                        if info["user_api"] == "blas"])
        return run_backbone(*args, **kwargs)

    monkeypatch.setattr(harness, "run_backbone", counting)
    harness.bench_wall_clock(params, config.prune, [held_out[0][0]], 1)
    assert len(threads) == 4
    assert all(n == 1 for counts in threads for n in counts)


@pytest.mark.slow
def test_default_schedule_is_faster_on_large_maps():
    config, params, images = bench_inputs()
    assert config.model.n_tokens >= 1024
    report = harness.bench_wall_clock(params, config.prune, images, 3,
                                      masks="schedule")
    assert report.flop_ratio < 1.0
    assert report.backbone_ratio <= 0.8


@pytest.mark.slow
def test_keep_all_schedule_costs_about_the_same_as_dense():
    config, params, images = bench_inputs()
    keep_all = dataclasses.replace(
        config.prune, keep_ratios=(1.0,) * len(config.prune.gated_layers))
    report = harness.bench_wall_clock(params, keep_all, images, 5,
                                      masks="schedule")
    assert 0.9 <= report.backbone_ratio <= 1.1


@pytest.mark.slow
def test_bench_medians_are_stable_across_runs():
    config, params, images = bench_inputs()
    first, second = (harness.bench_wall_clock(params, config.prune, images,
                                              5, masks="schedule")
                     for _ in range(2))
    for a, b in zip(first.rows, second.rows):
        assert abs(a.backbone_median - b.backbone_median) <= \
            0.05 * a.backbone_median


def test_bench_rejects_unknown_mask_source():
    config = tiny_config()
    params = init_params(config.model, np.random.default_rng(0), (2,))
    with pytest.raises(ValueError):
        harness.bench_wall_clock(params, config.prune, [], 1, masks="oracle")


@pytest.mark.slow
def test_train_replays_bit_exactly():
    config = tiny_config()
    first = harness.train(config)
    second = harness.train(config)
    assert first.records == second.records
    assert [r["stage"] for r in first.records] == ["dense", "sparse"]
    for name, value in first.params.tensors.items():
        assert np.array_equal(value, second.params.tensors[name])


@pytest.mark.slow
def test_train_records_follow_the_schema():
    result = harness.train(tiny_config())
    record = result.records[-1]
    assert sorted(record) == ["epoch", "kind", "loss", "metrics", "stage",
                              "usage"]
    assert record["kind"] == "epoch"
    assert sorted(record["loss"]) == ["ratio", "task", "total"]
    assert sorted(record["metrics"]) == ["accuracy", "flops",
                                         "foreground_accuracy",
                                         "keep_ratio", "mean_iou"]
    assert len(record["usage"]) == 1
    assert result.params.gated_layers == (2,)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_zero_lambda_full_targets_keep_everything(seed):
    config = tiny_config(seed=seed, prune={
        "gated_layers": [2], "keep_ratios": [1.0], "loss_lambda": 0.0})
    result = harness.train(config)
    _, held_out = harness.datasets(config)
    metrics = harness.evaluate(result.params, held_out, config.prune)
    assert metrics.keep_ratio[0] >= 0.99


@pytest.mark.slow
def test_gate_designs_share_data_and_report_pairs():
    config = tiny_config()
    dense = harness.train(dataclasses.replace(
        config, prune=PruneConfig.dense())).params
    rows = harness.compare_gate_designs(config, dense, seeds=(0,))
    assert [row["design"] for row in rows] == ["mlp2", "dynamicvit"]
    assert all(row["seed"] == 0 for row in rows)


@pytest.mark.slow
def test_ablations_report_every_claim():
    config = tiny_config()
    dense = harness.pretrain(config, *harness.datasets(config))
    result = harness.run_ablations(config, dense, seeds=(0, 1, 2))
    assert len(result.rows) == 12
    assert [v["claim"] for v in result.verdicts] == [
        "preserve >= remove", "dynamic >= fixed", "reactivate >= restricted"]
    assert len(result.usage_gaps) == 3


@pytest.mark.slow
def test_sweep_starts_with_the_dense_row():
    config = tiny_config(sweep_ratios=[1.0, 0.5])
    dense = harness.pretrain(config, *harness.datasets(config))
    rows = harness.sweep_pruning_rate(config.sweep_ratios, config, dense)
    assert rows[0]["ratio"] is None and rows[0]["flop_fraction"] == 1.0
    assert [row["schedule"] for row in rows[1:]] == [[1.0], [0.5]]
    # a keep-all gate still pays for its selector
    assert rows[1]["flop_fraction"] > 1.0


@pytest.mark.slow
def test_dense_stage_learns_eight_class_scenes():
    config = load_config(CONFIGS / "dense8.yaml")
    assert config.model.classes == config.scenes.n_classes == 8
    result = harness.train(config)
    assert result.stage == harness.DENSE
    _, held_out = harness.datasets(config)
    metrics = harness.evaluate(result.params, held_out, PruneConfig.dense())
    assert metrics.accuracy >= DENSE8_ACCURACY
