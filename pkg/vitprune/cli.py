"""
Command-line Interface (cli)
============================

``vitprune <command> [options]``, one command per process.  Commands write
their artifacts into the output directory (``--out``, else
``$VITPRUNE_OUT``, else the config's ``out_dir``) only when they succeed;
a failed command leaves an ``error.txt`` instead (and, after divergence,
``checkpoint.last_good.bin``).

Commands and artifacts::

    train          checkpoint.bin, metrics.jsonl, config.resolved.yaml
    eval           metrics.jsonl, config.resolved.yaml
    bench          bench.csv, config.resolved.yaml
    heatmap        heatmaps/ (per-image and mean CSV + PGM),
                   reactivation.csv, usage_split.csv, divergence.csv
    sweep          sweep.csv
    gradcheck      gradcheck.csv
    compare-gates  compare_gates.csv
    ablate         ablations.csv, verdicts.csv, usage_gap.csv

Exit codes are listed in :class:`ExitCode`.

.. autoclass:: vitprune.cli.ExitCode

.. autofunction:: vitprune.cli.main
"""
import argparse
import enum
import logging
import os
import pathlib
import shutil
import sys
import tempfile

from . import harness, stats
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import load_config, write_resolved
from .errors import (CheckpointError, CheckpointMismatchError, ConfigError,
                     DivergenceError)
from .params import ModelDims, init_params
from .pruning_engine import ATTENTION_SCORE, PruneConfig
from .util import (dump_record, write_csv, write_grid_csv, write_jsonl,
                   write_pgm)

OUT_ENV = "VITPRUNE_OUT"
ERROR_NAME = "error.txt"
LAST_GOOD_NAME = "checkpoint.last_good.bin"

TINY_DIMS = ModelDims(layers=2, heads=2, width=16, patch=4, image_size=16,
                      channels=3, classes=4)
TINY_PRUNE = PruneConfig(gated_layers=(2,), keep_ratios=(0.7,))

logger = logging.getLogger(__name__)


class ExitCode(enum.IntEnum):
    """
    Process exit status of every command.
    """
    OK = 0
    UNEXPECTED = 1
    CONFIG = 2
    DIVERGENCE = 3
    GRADCHECK = 4
    IO = 5
    MISMATCH = 6


class Staging:
    """
    Collects a command's artifacts in a scratch directory and moves them
    into place only on :meth:`commit`.
    """
    def __init__(self, out):
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.dir = pathlib.Path(tempfile.mkdtemp(prefix=".staging-",
                                                 dir=str(out)))

    def path(self, name):
        return self.dir / name

    def commit(self):
        for entry in sorted(self.dir.iterdir()):
            target = self.out / entry.name
            if target.is_dir():
                shutil.rmtree(str(target))
            os.replace(str(entry), str(target))
        self.discard()

    def discard(self):
        shutil.rmtree(str(self.dir), ignore_errors=True)


def output_dir(args, config=None):
    if args.out:
        return pathlib.Path(args.out)
    elif os.environ.get(OUT_ENV):
        return pathlib.Path(os.environ[OUT_ENV])
    elif config is not None:
        return pathlib.Path(config.out_dir)
    else:
        return pathlib.Path("runs/default")


def read_config(args):
    config = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    return config.replace(**changes) if changes else config


def read_params(args, config, prune=None):
    if not args.checkpoint:
        raise ConfigError("--checkpoint", "this command needs a checkpoint")
    checkpoint = load_checkpoint(args.checkpoint)
    params = checkpoint.params
    harness.check_compatible(params, config.model, prune)
    return checkpoint, params


def eval_prune(checkpoint, config):
    """
    Dense checkpoints are evaluated keep-all; sparse ones with the
    configured selector.
    """
    return PruneConfig.dense() if checkpoint.stage == harness.DENSE \
        else config.prune


def cmd_train(args, config, staging):
    dense = None
    if args.checkpoint:
        checkpoint, dense = read_params(args, config)
        if checkpoint.stage != harness.DENSE:
            raise ConfigError("--checkpoint", "expected a dense checkpoint")
    result = harness.train(config, dense_params=dense)
    save_checkpoint(Checkpoint.from_params(result.params, result.stage,
                                           config.seed),
                    staging.path("checkpoint.bin"))
    write_jsonl(staging.path("metrics.jsonl"), result.records)
    return ExitCode.OK


def cmd_eval(args, config, staging):
    checkpoint, params = read_params(args, config)
    prune = eval_prune(checkpoint, config)
    harness.check_compatible(params, config.model, prune)
    _, held_out = harness.datasets(config)
    metrics = harness.evaluate(params, held_out, prune, config.threads)
    write_jsonl(staging.path("metrics.jsonl"), [{
        "kind": "eval", "stage": checkpoint.stage,
        "metrics": metrics.to_record()}])
    logger.info("accuracy {0:.4f}, mean IoU {1:.4f}, flops {2:.0f}".format(
        metrics.accuracy, metrics.mean_iou, metrics.flops))
    return ExitCode.OK


def cmd_bench(args, config, staging):
    prune = config.prune
    if args.checkpoint:
        _, params = read_params(args, config, prune)
        masks = args.masks or "gate"
    else:
        attention = prune.selector == ATTENTION_SCORE
        params = init_params(config.model, harness.stream(config.seed,
                                                          harness.STREAM_INIT),
                             () if attention else prune.gated_layers,
                             prune.gate_design, class_token=attention)
        masks = args.masks or "schedule"
    _, held_out = harness.datasets(config)
    images = [scene[0] for scene in held_out[:args.images]]
    report = harness.bench_wall_clock(params, prune, images, args.repeats,
                                      warmup=args.warmup, masks=masks,
                                      seed=config.seed)
    rows = [row.to_record() for row in report.rows]
    rows.append({"config": "sparse/dense",
                 "backbone_median": report.backbone_ratio,
                 "flops": report.flop_ratio})
    write_csv(staging.path("bench.csv"), rows,
              ["config", "backbone_median", "backbone_iqr", "pipeline_median",
               "pipeline_iqr", "flops", "samples"])
    logger.info("sparse/dense backbone time {0:.3f}, flops {1:.3f}".format(
        report.backbone_ratio, report.flop_ratio))
    return ExitCode.OK


def cmd_heatmap(args, config, staging):
    checkpoint, params = read_params(args, config)
    prune = eval_prune(checkpoint, config)
    harness.check_compatible(params, config.model, prune)
    _, held_out = harness.datasets(config)
    outputs = harness.infer_dataset(params, held_out, prune, config.threads)
    traces = [out.trace for out in outputs]
    n_layers = config.model.layers
    heatmap = stats.token_usage_heatmap(traces, config.model.grid, n_layers)
    directory = staging.path("heatmaps")
    directory.mkdir()
    for i, grid in enumerate(heatmap.per_image):
        write_grid_csv(directory / "image_{0:04d}.csv".format(i), grid)
        write_pgm(directory / "image_{0:04d}.pgm".format(i), grid, n_layers)
    write_grid_csv(directory / "mean.csv", heatmap.average, "{0:.6f}")
    write_pgm(directory / "mean.pgm", heatmap.average, n_layers)

    write_csv(staging.path("reactivation.csv"), [
        {"layer": r.layer, "pruned": r.pruned, "reactivated": r.reactivated,
         "immediately": r.immediately, "ratio": r.ratio,
         "immediate": r.immediate}
        for r in stats.reactivation_ratio(traces)],
        ["layer", "pruned", "reactivated", "immediately", "ratio",
         "immediate"])
    fg, bg, gap = stats.foreground_usage(
        traces, [scene[1] for scene in held_out], n_layers)
    write_csv(staging.path("usage_split.csv"),
              [{"foreground": fg, "background": bg, "gap": gap}],
              ["foreground", "background", "gap"])
    layers = prune.gated_layers
    write_csv(staging.path("divergence.csv"), [
        {"from_layer": a, "to_layer": b, "changed": d}
        for a, b, d in zip(layers, layers[1:],
                           stats.mask_divergence(traces))],
        ["from_layer", "to_layer", "changed"])
    return ExitCode.OK


def cmd_sweep(args, config, staging):
    _, dense = read_params(args, config)
    rows = harness.sweep_pruning_rate(config.sweep_ratios, config, dense)
    write_csv(staging.path("sweep.csv"), rows,
              ["ratio", "schedule", "flop_fraction", "flops", "accuracy",
               "foreground_accuracy", "mean_iou", "keep_ratio"])
    return ExitCode.OK


def cmd_gradcheck(args, config, staging):
    dims = config.model if config is not None else TINY_DIMS
    prune = config.prune if config is not None else TINY_PRUNE
    seed = args.seed if args.seed is not None else \
        (config.seed if config is not None else 0)
    report = harness.gradcheck_model(dims, prune, seed, eps=args.eps,
                                     threshold=args.threshold)
    write_csv(staging.path("gradcheck.csv"), [
        {"name": name, "rel_error": error,
         "passed": name not in report.failures}
        for name, error in sorted(report.errors.items())],
        ["name", "rel_error", "passed"])
    name, worst = report.worst()
    if report.passed:
        logger.info("gradcheck passed: worst {0} at {1:.3e}".format(
            name, worst))
        return ExitCode.OK
    logger.error("gradcheck failed for {0} tensors (worst {1} at {2:.3e})"
                 .format(len(report.failures), name, worst))
    return ExitCode.GRADCHECK


def cmd_compare_gates(args, config, staging):
    _, dense = read_params(args, config)
    rows = harness.compare_gate_designs(config, dense)
    write_csv(staging.path("compare_gates.csv"), rows,
              ["seed", "design", "accuracy", "foreground_accuracy",
               "mean_iou", "flops", "keep_ratio"])
    return ExitCode.OK


def cmd_ablate(args, config, staging):
    _, dense = read_params(args, config)
    result = harness.run_ablations(config, dense)
    write_csv(staging.path("ablations.csv"), result.rows,
              ["seed", "variant", "accuracy", "foreground_accuracy",
               "mean_iou", "flops", "keep_ratio"])
    write_csv(staging.path("verdicts.csv"), result.verdicts,
              ["claim", "wins", "seeds", "holds"])
    write_csv(staging.path("usage_gap.csv"), result.usage_gaps,
              ["seed", "foreground", "background", "gap"])
    return ExitCode.OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "heatmap": cmd_heatmap,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "compare-gates": cmd_compare_gates,
    "ablate": cmd_ablate,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vitprune",
        description="Token pruning for isotropic vision transformers.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="Log debugging messages")
    commands = parser.add_subparsers(dest="command", metavar="<command>")
    commands.required = True
    for name in COMMANDS:
        sub = commands.add_parser(name)
        sub.add_argument("--config", required=name != "gradcheck",
                         help="Experiment config (YAML)")
        sub.add_argument("--checkpoint", help="Checkpoint to load")
        sub.add_argument("--seed", type=int,
                         help="Override the config's master seed")
        sub.add_argument("--out", help="Output directory (overrides ${0})"
                         .format(OUT_ENV))
        sub.add_argument("--threads", type=int,
                         help="Image-parallel evaluation threads")
        if name == "bench":
            sub.add_argument("--images", type=int, default=8)
            sub.add_argument("--repeats", type=int, default=5)
            sub.add_argument("--warmup", type=int, default=1)
            sub.add_argument("--masks", choices=("gate", "schedule"))
        elif name == "gradcheck":
            sub.add_argument("--eps", type=float, default=1e-5)
            sub.add_argument("--threshold", type=float, default=1e-4)
    return parser


def _report_failure(out, message, extra=None):
    out.mkdir(parents=True, exist_ok=True)
    with open(str(out / ERROR_NAME), "w") as f:
        f.write(message + "\n")
        if extra is not None:
            f.write(dump_record(extra) + "\n")


def run(args):
    """
    Runs one parsed command and maps failures to an :class:`ExitCode`.
    """
    config = None
    out = output_dir(args)
    staging = None
    try:
        if args.config is not None:
            config = read_config(args)
        out = output_dir(args, config)
        staging = Staging(out)
        code = COMMANDS[args.command](args, config, staging)
        if code == ExitCode.OK:
            if config is not None:
                write_resolved(config, staging.dir)
            staging.commit()
        else:
            staging.discard()
            _report_failure(out, "{0} failed with exit code {1}".format(
                args.command, int(code)))
        return int(code)
    except DivergenceError as e:
        code = ExitCode.DIVERGENCE
        save_checkpoint(Checkpoint.from_params(e.last_good, e.stage,
                                               config.seed),
                        out / LAST_GOOD_NAME)
        _report_failure(out, str(e), {"kind": "divergence", "stage": e.stage,
                                      "epoch": e.epoch, "step": e.step})
    except ConfigError as e:
        code = ExitCode.CONFIG
        _report_failure(out, "invalid config: {0}".format(e))
    except CheckpointMismatchError as e:
        code = ExitCode.MISMATCH
        _report_failure(out, "checkpoint does not match config: {0}"
                        .format(e))
    except (CheckpointError, OSError) as e:
        code = ExitCode.IO
        _report_failure(out, "{0}: {1}".format(type(e).__name__, e))
    except Exception as e:
        logger.debug("unexpected failure", exc_info=True)
        code = ExitCode.UNEXPECTED
        _report_failure(out, "{0}: {1}".format(type(e).__name__, e))
    finally:
        if staging is not None:
            staging.discard()
    logger.error((out / ERROR_NAME).read_text().splitlines()[0])
    return int(code)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s:%(name)s -- %(message)s")
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
