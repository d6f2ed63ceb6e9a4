"""
Harness
=======

Dense pretraining, sparse finetuning, evaluation and the comparative
experiments built on them.

Random streams are derived from a seed ``s`` as
``numpy.random.default_rng([s, k])`` with one fixed `k` per purpose (see
``STREAM_*``), so that e.g. the data order of a finetune does not depend on
how many draws its gate initialisation consumed.

.. autofunction:: vitprune.harness.train

.. autofunction:: vitprune.harness.finetune

.. autofunction:: vitprune.harness.evaluate

.. autoclass:: vitprune.harness.EvalMetrics
    :members:

.. autofunction:: vitprune.harness.sweep_pruning_rate

.. autofunction:: vitprune.harness.compare_gate_designs

.. autofunction:: vitprune.harness.run_ablations

.. autofunction:: vitprune.harness.bench_wall_clock

.. autofunction:: vitprune.harness.gradcheck_model
"""
import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits
from tqdm import tqdm

from . import numerics as nx
from .errors import (CheckpointMismatchError, DivergenceError, NonFiniteError,
                     ShapeError)
from .gating import n_selected
from .losses import (LossReport, dynamic_ratio_loss, fixed_ratio_loss,
                     ratio_loss, task_loss, total_loss)
from .optim import Adam
from .params import attach_gates, expected_shape, init_params
from .pruning_engine import (ATTENTION_SCORE, INFER, TRAIN, PruneConfig,
                             run_backbone)
from .scenes import SceneSpec, make_dataset, split_seeds
from .stats import foreground_usage

DENSE = "dense"
SPARSE = "sparse"

STREAM_INIT = 0
STREAM_DENSE_ORDER = 1
STREAM_DENSE_SAMPLING = 2
STREAM_GATE_INIT = 3
STREAM_SPARSE_ORDER = 4
STREAM_SPARSE_SAMPLING = 5
STREAM_BENCH = 6

logger = logging.getLogger(__name__)


def stream(seed, purpose):
    return np.random.default_rng([int(seed), purpose])


@dataclass(frozen=True)
class EvalMetrics:
    """
    Held-out metrics of one model.  `foreground_accuracy` is None when the
    scenes hold no foreground token.  Only :meth:`to_record` output enters
    metric logs, and it leaves wall-clock time out unless asked.
    """
    accuracy: float
    foreground_accuracy: object
    mean_iou: float
    keep_ratio: tuple
    flops: float
    seconds_per_image: float

    def to_record(self, timing=False):
        record = {
            "accuracy": self.accuracy,
            "foreground_accuracy": self.foreground_accuracy,
            "mean_iou": self.mean_iou,
            "keep_ratio": list(self.keep_ratio),
            "flops": self.flops,
        }
        if timing:
            record["seconds_per_image"] = self.seconds_per_image
        return record


@dataclass
class TrainResult:
    """
    Outcome of :func:`train`: final and dense parameters plus the metric log
    records, in order.
    """
    params: object
    dense_params: object
    stage: str
    records: list = field(default_factory=list)


def datasets(config):
    """
    ``(train, held_out)`` scene lists for an experiment config.
    """
    train_seed, held_out_seed = split_seeds(config.scenes.seed)
    return (make_dataset(config.scenes, config.train_scenes, train_seed),
            make_dataset(config.scenes, config.eval_scenes, held_out_seed))


def check_compatible(params, dims, prune=None):
    """
    Rejects parameters whose tensors do not fit `dims`, naming the first
    mismatching tensor.  With `prune`, the selector tensors it needs must be
    present too.
    """
    if params.dims != dims:
        for name in sorted(params.tensors):
            expected = expected_shape(name, dims)
            if expected != params.tensors[name].shape:
                raise CheckpointMismatchError(name, expected,
                                              params.tensors[name].shape)
        raise CheckpointMismatchError("<dims>", dims, params.dims)
    if prune is None or not prune.gated_layers:
        return
    if prune.selector == ATTENTION_SCORE:
        needed = ["cls"]
    else:
        needed = ["gates.{0}.fc1.w".format(layer)
                  for layer in prune.gated_layers]
        if prune.gate_design == "dynamicvit":
            needed += ["gates.{0}.in.w".format(layer)
                       for layer in prune.gated_layers]
    for name in needed:
        if name not in params:
            raise CheckpointMismatchError(name, expected_shape(name, dims),
                                          "missing")


def infer_dataset(params, scenes, cfg, threads=1):
    """
    Inference-mode backbone over every scene, in order.  With `threads` > 1
    images run concurrently over the shared parameters.
    """
    def one(scene):
        return run_backbone(scene[0], params, cfg, mode=INFER)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, scenes))
    return [one(scene) for scene in scenes]


def summarize(outputs, scenes, n_classes):
    predictions = np.concatenate([out.scores.value.argmax(axis=1)
                                  for out in outputs])
    labels = np.concatenate([np.asarray(scene[1]) for scene in scenes])
    correct = predictions == labels
    foreground = labels != 0
    ious = []
    for c in range(n_classes):
        union = np.sum((predictions == c) | (labels == c))
        if union:
            ious.append(np.sum((predictions == c) & (labels == c)) / union)
    keep = np.mean([out.trace.usage for out in outputs], axis=0) \
        if outputs and outputs[0].trace.masks.shape[0] else np.zeros(0)
    return EvalMetrics(
        accuracy=float(correct.mean()),
        foreground_accuracy=float(correct[foreground].mean())
        if foreground.any() else None,
        mean_iou=float(np.mean(ious)) if ious else 0.0,
        keep_ratio=tuple(float(k) for k in keep),
        flops=float(np.mean([out.flops for out in outputs])),
        seconds_per_image=float(np.mean([out.seconds for out in outputs])))


def evaluate(params, scenes, cfg, threads=1):
    """
    Inference-mode metrics over held-out `scenes`.

    :Parameters:
        params : :class:`~vitprune.params.BackboneParams`
        scenes : `list`
            ``(image, labels)`` pairs.
        cfg : :class:`~vitprune.pruning_engine.PruneConfig`
        threads : `int`

    :Returns:
        :class:`EvalMetrics`
    """
    if not scenes:
        raise ValueError("evaluate() needs at least one scene")
    dims = params.dims
    expected = (dims.image_size, dims.image_size, dims.channels)
    if np.shape(scenes[0][0]) != expected:
        raise ShapeError("evaluate", np.shape(scenes[0][0]), expected)
    outputs = infer_dataset(params, scenes, cfg, threads)
    return summarize(outputs, scenes, dims.classes)


def _train_step(params, batch, cfg, rng):
    tape = nx.Tape()
    variables = params.variables(tape)
    outputs = [run_backbone(image, params, cfg, rng, TRAIN,
                            variables=variables) for image, _ in batch]
    task = None
    for out, (_, labels) in zip(outputs, batch):
        loss = task_loss(out.scores, labels)
        task = loss if task is None else nx.add(task, loss)
    task = nx.scale(task, 1.0 / len(batch))
    if cfg.gated_layers:
        ratio = ratio_loss(cfg.rate_mode, [out.usages for out in outputs],
                           cfg.keep_ratios)
        usage = np.mean([out.trace.usage for out in outputs], axis=0)
    else:
        ratio, usage = nx.Var(0.0), ()
    total = total_loss(task, ratio, cfg.loss_lambda)
    report = LossReport.from_vars(task, ratio, total, usage)
    if not np.isfinite(report.total):
        return report, None
    tape.backward(total)
    grads = {name: var.grad if var.grad is not None
             else np.zeros_like(var.value)
             for name, var in variables.items()}
    return report, grads


def _finite(tensors):
    return all(np.all(np.isfinite(value)) for value in tensors.values())


def fit(params, train_set, held_out, cfg, optim, stage, epochs, lr,
        order_rng, sample_rng, emit=None, threads=1):
    """
    Runs `epochs` of Adam on the total loss and emits one metric record per
    epoch.  Returns the trained copy of `params`.

    :Raises:
        :class:`~vitprune.errors.DivergenceError` : carrying the last
        parameters whose step produced a finite loss.
    """
    params = params.copy()
    adam = Adam(lr, optim.beta1, optim.beta2, optim.eps)
    for epoch in range(1, epochs + 1):
        order = order_rng.permutation(len(train_set))
        batches = [order[i:i + optim.batch_size]
                   for i in range(0, len(order), optim.batch_size)]
        reports = []
        progress = tqdm(batches, desc="{0} epoch {1}".format(stage, epoch),
                        disable=None, leave=False)
        for step, index in enumerate(progress):
            batch = [train_set[i] for i in index]
            try:
                report, grads = _train_step(params, batch, cfg, sample_rng)
            except NonFiniteError:
                grads = None
            if grads is None or not _finite(grads):
                raise DivergenceError(stage, epoch, step, params.copy())
            snapshot = params.copy()
            adam.step(params.tensors, grads)
            if not _finite(params.tensors):
                raise DivergenceError(stage, epoch, step, snapshot)
            reports.append(report)
        metrics = evaluate(params, held_out, cfg, threads)
        record = {
            "kind": "epoch",
            "stage": stage,
            "epoch": epoch,
            "loss": {
                "task": float(np.mean([r.task for r in reports])),
                "ratio": float(np.mean([r.ratio for r in reports])),
                "total": float(np.mean([r.total for r in reports])),
            },
            "usage": [float(u) for u in np.mean(
                [r.usage for r in reports], axis=0)] if cfg.gated_layers
            else [],
            "metrics": metrics.to_record(),
        }
        logger.info("{0} epoch {1}: loss {2:.4f}, accuracy {3:.4f}".format(
            stage, epoch, record["loss"]["total"], metrics.accuracy))
        if emit is not None:
            emit(record)
    return params


def finetune(dense_params, config, prune, seed, train_set, held_out,
             emit=None):
    """
    Attaches fresh selectors to `dense_params` and finetunes every parameter
    on the total loss of `prune`.
    """
    gated = () if prune.selector == ATTENTION_SCORE else prune.gated_layers
    params = attach_gates(dense_params, stream(seed, STREAM_GATE_INIT), gated,
                          prune.gate_design,
                          class_token=prune.selector == ATTENTION_SCORE)
    return fit(params, train_set, held_out, prune, config.optim, SPARSE,
               config.optim.sparse_epochs, config.optim.sparse_lr,
               stream(seed, STREAM_SPARSE_ORDER),
               stream(seed, STREAM_SPARSE_SAMPLING), emit, config.threads)


def pretrain(config, train_set, held_out, emit=None):
    params = init_params(config.model, stream(config.seed, STREAM_INIT))
    return fit(params, train_set, held_out, PruneConfig.dense(),
               config.optim, DENSE, config.optim.dense_epochs,
               config.optim.dense_lr, stream(config.seed, STREAM_DENSE_ORDER),
               stream(config.seed, STREAM_DENSE_SAMPLING), emit,
               config.threads)


def train(config, emit=None, dense_params=None):
    """
    Dense pretraining followed by the sparse finetune of ``config.prune``.
    Passing `dense_params` skips the dense stage.  A config without gated
    layers stops after the dense stage.

    :Parameters:
        config : :class:`~vitprune.config.ExperimentConfig`
        emit : `callable`
            (optional) called with every metric record as it is produced.
        dense_params : :class:`~vitprune.params.BackboneParams`

    :Returns:
        :class:`TrainResult`
    """
    records = []

    def collect(record):
        records.append(record)
        if emit is not None:
            emit(record)

    train_set, held_out = datasets(config)
    if dense_params is None:
        dense_params = pretrain(config, train_set, held_out, collect)
    else:
        check_compatible(dense_params, config.model)
    if not config.prune.gated_layers:
        return TrainResult(dense_params, dense_params, DENSE, records)
    params = finetune(dense_params, config, config.prune, config.seed,
                      train_set, held_out, collect)
    return TrainResult(params, dense_params, SPARSE, records)


def schedule_from_ratio(ratio, n_gated, group=3):
    """
    Keep-ratio schedule ``[r, r, r, r², r², r², r³, ...]``, rounded to 12
    decimals so 0.7 yields exactly 0.49 and 0.343.
    """
    return tuple(round(ratio ** (1 + i // group), 12) for i in range(n_gated))


def sweep_pruning_rate(base_ratios, config, dense_params):
    """
    One finetune and evaluation per base ratio.

    :Returns:
        `list` of `dict` rows, the first describing the dense model.
    """
    train_set, held_out = datasets(config)
    dense = evaluate(dense_params, held_out, PruneConfig.dense(),
                     config.threads)
    rows = [dict(ratio=None, schedule=[], flop_fraction=1.0,
                 **dense.to_record())]
    for ratio in base_ratios:
        schedule = schedule_from_ratio(ratio, len(config.prune.gated_layers))
        prune = dataclasses.replace(config.prune, keep_ratios=schedule)
        params = finetune(dense_params, config, prune, config.seed,
                          train_set, held_out)
        metrics = evaluate(params, held_out, prune, config.threads)
        rows.append(dict(ratio=ratio, schedule=list(schedule),
                         flop_fraction=metrics.flops / dense.flops,
                         **metrics.to_record()))
        logger.info("sweep ratio {0}: accuracy {1:.4f}, flops {2:.3f}x"
                    .format(ratio, metrics.accuracy, rows[-1]["flop_fraction"]))
    return rows


def compare_gate_designs(config, dense_params, seeds=None):
    """
    Twin finetunes per seed that differ only in the gate design: the 2-layer
    MLP and the DynamicViT-style gate.  Data order and Gumbel streams are
    shared within a seed.
    """
    seeds = config.seeds if seeds is None else seeds
    train_set, held_out = datasets(config)
    rows = []
    for seed in seeds:
        for design in ("mlp2", "dynamicvit"):
            prune = dataclasses.replace(config.prune, selector="gate_mlp",
                                        gate_design=design)
            params = finetune(dense_params, config, prune, seed, train_set,
                              held_out)
            metrics = evaluate(params, held_out, prune, config.threads)
            rows.append(dict(seed=seed, design=design, **metrics.to_record()))
    return rows


ABLATION_VARIANTS = {
    "full": dict(preserve=True, reactivate=True, rate_mode="dynamic"),
    "restricted": dict(preserve=True, reactivate=False, rate_mode="dynamic"),
    "remove": dict(preserve=False, reactivate=False, rate_mode="dynamic"),
    "fixed": dict(preserve=True, reactivate=True, rate_mode="fixed"),
}
ABLATION_CLAIMS = (
    ("preserve >= remove", "restricted", "remove"),
    ("dynamic >= fixed", "full", "fixed"),
    ("reactivate >= restricted", "full", "restricted"),
)


@dataclass
class AblationResult:
    """
    Seed-level rows, majority verdicts per claim and the foreground minus
    background token-usage gap of the full variant per seed.
    """
    rows: list
    verdicts: list
    usage_gaps: list


def run_ablations(config, dense_params, seeds=None):
    """
    Finetunes every variant of ``ABLATION_VARIANTS`` on identical seeds and
    data, then checks each directional claim by majority of seeds.  Claims
    are reported, never enforced.
    """
    seeds = config.seeds if seeds is None else seeds
    train_set, held_out = datasets(config)
    labels = [scene[1] for scene in held_out]
    accuracy = {}
    rows, gaps = [], []
    for seed in seeds:
        for name, switches in ABLATION_VARIANTS.items():
            prune = dataclasses.replace(config.prune, **switches)
            params = finetune(dense_params, config, prune, seed, train_set,
                              held_out)
            outputs = infer_dataset(params, held_out, prune, config.threads)
            metrics = summarize(outputs, held_out, params.dims.classes)
            accuracy[seed, name] = metrics.accuracy
            rows.append(dict(seed=seed, variant=name, **metrics.to_record()))
            if name == "full":
                fg, bg, gap = foreground_usage(
                    [out.trace for out in outputs], labels,
                    params.dims.layers)
                gaps.append(dict(seed=seed, foreground=fg, background=bg,
                                 gap=gap))
    verdicts = []
    for claim, better, worse in ABLATION_CLAIMS:
        wins = sum(accuracy[seed, better] >= accuracy[seed, worse]
                   for seed in seeds)
        verdicts.append(dict(claim=claim, wins=int(wins), seeds=len(seeds),
                             holds=2 * wins > len(seeds)))
        logger.info("{0}: {1}/{2} seeds".format(claim, wins, len(seeds)))
    return AblationResult(rows, verdicts, gaps)


def schedule_masks(cfg, n_tokens, rng):
    """
    Nested random masks keeping exactly ⌈t·N⌉ tokens at every gated layer
    (never more than the layer before).
    """
    masks = []
    active = np.arange(n_tokens)
    for ratio in cfg.keep_ratios:
        k = min(n_selected(ratio, n_tokens), active.size)
        active = np.sort(rng.choice(active, size=k, replace=False))
        keep = np.zeros(n_tokens, dtype=bool)
        keep[active] = True
        masks.append(keep)
    return np.array(masks).reshape(len(cfg.keep_ratios), n_tokens)


@dataclass(frozen=True)
class BenchRow:
    """
    Timing summary of one configuration, seconds per image.
    """
    config: str
    backbone_median: float
    backbone_iqr: float
    pipeline_median: float
    pipeline_iqr: float
    flops: float
    samples: int

    def to_record(self):
        return dataclasses.asdict(self)


@dataclass
class BenchReport:
    """
    Dense and sparse timings on identical inputs.
    """
    rows: list

    @property
    def backbone_ratio(self):
        dense, sparse = self.rows
        return sparse.backbone_median / dense.backbone_median

    @property
    def flop_ratio(self):
        dense, sparse = self.rows
        return sparse.flops / dense.flops


def _iqr(values):
    q1, q3 = np.percentile(values, [25, 75])
    return float(q3 - q1)


def bench_wall_clock(params, cfg, images, n_repeats, warmup=1,
                     masks="gate", seed=0):
    """
    Median and IQR of per-image backbone and whole-pipeline time, dense vs.
    sparse, on the same images in the same thread with BLAS held to one
    thread.

    :Parameters:
        params : :class:`~vitprune.params.BackboneParams`
        cfg : :class:`~vitprune.pruning_engine.PruneConfig`
            The sparse configuration.
        images : `list`
        n_repeats : `int`
            Timed passes over `images` (1 is accepted).
        warmup : `int`
            Untimed passes over the first image before each configuration.
        masks : `str`
            "gate" uses the trained selector; "schedule" injects random
            nested masks at exactly the scheduled keep ratios.
        seed : `int`
            Seed of the schedule masks.
    """
    if masks not in ("gate", "schedule"):
        raise ValueError("masks must be 'gate' or 'schedule'")
    injected = [None] * len(images)
    if masks == "schedule":
        rng = stream(seed, STREAM_BENCH)
        injected = [schedule_masks(cfg, params.dims.n_tokens, rng)
                    for _ in images]
    rows = []
    with threadpool_limits(limits=1):
        for label, prune, inject in (("dense", PruneConfig.dense(),
                                      [None] * len(images)),
                                     ("sparse", cfg, injected)):
            rows.append(_bench_one(label, params, prune, images, inject,
                                   n_repeats, warmup))
    return BenchReport(rows)


def _bench_one(label, params, prune, images, inject, n_repeats, warmup):
    for _ in range(warmup):
        run_backbone(images[0], params, prune, mode=INFER, masks=inject[0])
    backbone, pipeline, flops = [], [], []
    for _ in range(max(1, n_repeats)):
        for image, mask in zip(images, inject):
            started = time.perf_counter()
            out = run_backbone(image, params, prune, mode=INFER, masks=mask)
            out.scores.value.argmax(axis=1)
            pipeline.append(time.perf_counter() - started)
            backbone.append(sum(out.layer_seconds))
            flops.append(out.flops)
    row = BenchRow(label, float(np.median(backbone)), _iqr(backbone),
                   float(np.median(pipeline)), _iqr(pipeline),
                   float(np.mean(flops)), len(backbone))
    logger.info("bench {0}: backbone median {1:.3e}s".format(
        label, row.backbone_median))
    return row


def gradcheck_model(dims, prune, seed, batch=2, eps=1e-5, threshold=1e-4,
                    names=None):
    """
    Finite-difference check of the parameters of a gated model under the
    total loss (task plus both ratio losses), with relaxed masks and frozen
    Gumbel noise.

    :Parameters:
        names : `iterable`
            (optional) tensors to check; every tensor by default.  The rest
            enter the loss as constants.

    :Returns:
        :class:`~vitprune.numerics.GradReport`
    """
    rng = np.random.default_rng(seed)
    attention = prune.selector == ATTENTION_SCORE
    params = init_params(dims, rng, () if attention else prune.gated_layers,
                         prune.gate_design, class_token=attention)
    spec = SceneSpec(image_size=dims.image_size, patch_size=dims.patch,
                     n_shapes=2, n_classes=dims.classes,
                     channels=dims.channels, seed=seed)
    scenes = make_dataset(spec, batch)
    relaxed = dataclasses.replace(prune, straight_through=False)
    checked = params.tensors if names is None else \
        {name: params[name] for name in names}
    constants = params.variables()

    def loss(variables):
        merged = dict(constants, **variables)
        sample_rng = stream(seed, STREAM_SPARSE_SAMPLING)
        outputs = [run_backbone(image, params, relaxed, sample_rng, TRAIN,
                                variables=merged) for image, _ in scenes]
        task = None
        for out, (_, labels) in zip(outputs, scenes):
            value = task_loss(out.scores, labels)
            task = value if task is None else nx.add(task, value)
        task = nx.scale(task, 1.0 / len(scenes))
        usages = [out.usages for out in outputs]
        ratio = nx.add(dynamic_ratio_loss(usages, relaxed.keep_ratios),
                       fixed_ratio_loss(usages, relaxed.keep_ratios))
        return total_loss(task, ratio, relaxed.loss_lambda)

    return nx.grad_check(loss, checked, eps, threshold)
