"""Command-line driver tying datasets, models, pipeline and analysis together.

    binprune --config run.cfg --mode prune --seed 3 --out results \
             --set alpha_reg=1e-3 --set epochs_select=8

Modes: train, prune, baseline-layerwise, baseline-cascade, analyze,
compare.  Every run writes the effective config, a per-epoch metrics log
and mode-specific reports into the output directory; identical configs
produce bitwise-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from binprune import analysis, pipeline
from binprune.config import RunConfig, load_config, write_effective
from binprune.data import DatasetHandle, load_cifar10_bin, load_mnist_idx, synth_dataset
from binprune.zoo import ModelSpec, load_checkpoint, save_checkpoint


class MetricsLog:
    COLUMNS = ("stage", "layer", "epoch", "loss", "accuracy", "kept")

    def __init__(self):
        self.rows = []

    def __call__(self, row: dict) -> None:
        self.rows.append(row)

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for row in self.rows:
                writer.writerow([row.get(c, "") for c in self.COLUMNS])


def _load_datasets(cfg: RunConfig) -> tuple[DatasetHandle, DatasetHandle]:
    if cfg.dataset == "synth":
        shape = (cfg.channels, cfg.image_size, cfg.image_size)
        train = synth_dataset(cfg.classes, cfg.samples, shape, seed=cfg.seed,
                              noise=cfg.noise, separation=cfg.separation,
                              template_seed=cfg.seed)
        test = synth_dataset(cfg.classes, cfg.eval_samples, shape,
                             seed=cfg.seed + 1, noise=cfg.noise,
                             separation=cfg.separation,
                             template_seed=cfg.seed)
        return train, test
    loader = load_mnist_idx if cfg.dataset == "mnist" else load_cifar10_bin
    train = loader(cfg.data_path, split="train")
    test = loader(cfg.data_path, split="test")
    if cfg.samples:
        train = train.subset(cfg.samples)
    if cfg.eval_samples:
        test = test.subset(cfg.eval_samples)
    return train, test


def _schedule(cfg: RunConfig) -> pipeline.PruneSchedule:
    return pipeline.PruneSchedule(
        epochs_feature=cfg.epochs_feature,
        epochs_select=cfg.epochs_select,
        epochs_retrain=cfg.epochs_retrain,
        batch_size=cfg.batch_size,
        lr_main=cfg.lr_main,
        lr_decay=cfg.lr_decay,
        lr_decay_every=cfg.lr_decay_every,
        momentum=cfg.momentum,
        lr_mask=cfg.lr_mask,
        alpha_reg=cfg.alpha_reg,
        beta_distill=cfg.beta_distill,
        temperature=cfg.temperature,
        sigma=cfg.sigma,
        pnr=cfg.pnr,
        refine_sweeps=cfg.refine_sweeps,
        refine_samples=cfg.refine_samples,
    )


def _spec(cfg: RunConfig, input_shape) -> ModelSpec:
    return ModelSpec(cfg.arch, cfg.widths_list(), input_shape, cfg.classes)


def _write_prune_report(report: pipeline.PruneReport, out_dir) -> None:
    with open(os.path.join(out_dir, "prune_report.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "name", "n_filters", "n_pruned", "pfr",
                         "degenerate", "pruned_indices"])
        for e in report.layers:
            writer.writerow([e["layer"], e["name"], e["n_filters"],
                             len(e["pruned"]), f"{e['pfr']:.6f}",
                             int(e["degenerate"]),
                             ";".join(str(v) for v in e["pruned"])])
    with open(os.path.join(out_dir, "prune_report.txt"), "w") as fh:
        fh.write(f"method:        {report.method}\n")
        fh.write(f"global PFR:    {report.global_pfr:.4f}\n")
        fh.write(f"error before:  {report.error_before:.4f}\n")
        fh.write(f"error after:   {report.error_after:.4f}\n")


def _write_flops(net, out_dir, stem="flops") -> None:
    report = analysis.count_flops(net)
    analysis.emit_report(report, os.path.join(out_dir, f"{stem}.txt"),
                         os.path.join(out_dir, f"{stem}.csv"))


def run(cfg: RunConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_effective(cfg, os.path.join(cfg.out_dir, "config.effective"))
    log = MetricsLog()
    schedule = _schedule(cfg)
    stage = "setup"
    try:
        if cfg.mode == "analyze":
            stage = "analyze"
            if cfg.checkpoint:
                net, _ = load_checkpoint(cfg.checkpoint)
            else:
                shape = (cfg.channels, cfg.image_size, cfg.image_size)
                net = pipeline.build(_spec(cfg, shape), seed=cfg.seed)
            _write_flops(net, cfg.out_dir)
            return 0

        stage = "dataset"
        train, test = _load_datasets(cfg)
        spec = _spec(cfg, train.input_shape)

        if cfg.mode == "train":
            stage = "feature-learning"
            net, _, _, error = pipeline.feature_learn_main(
                spec, train, schedule, test, log
            )
            save_checkpoint(net, os.path.join(cfg.out_dir, "model.ckpt"),
                            extra={"epochs": cfg.epochs_feature})
            with open(os.path.join(cfg.out_dir, "summary.txt"), "w") as fh:
                fh.write(f"test error: {error:.4f}\n")

        elif cfg.mode == "prune":
            stage = "prune-pipeline"
            result = pipeline.prune_pipeline(spec, train, schedule, test, log)
            save_checkpoint(result.masked, os.path.join(cfg.out_dir, "model.ckpt"),
                            extra={"pruned": True})
            _write_prune_report(result.report, cfg.out_dir)
            _write_flops(result.masked, cfg.out_dir)

        elif cfg.mode in ("baseline-layerwise", "baseline-cascade"):
            stage = "feature-learning"
            net, _, _, _ = pipeline.feature_learn_main(spec, train, schedule,
                                                       test, log)
            targets = cfg.pfr_targets_list()
            if len(targets) == 1:
                targets = targets * len(net.masks)
            stage = cfg.mode
            runner = (pipeline.msf_prune_layerwise
                      if cfg.mode == "baseline-layerwise"
                      else pipeline.msf_prune_cascade)
            result = runner(net, targets, train, schedule, test, log)
            save_checkpoint(result.masked, os.path.join(cfg.out_dir, "model.ckpt"),
                            extra={"baseline": cfg.mode})
            _write_prune_report(result.report, cfg.out_dir)
            _write_flops(result.masked, cfg.out_dir)

        elif cfg.mode == "compare":
            stage = "feature-learning"
            net, teacher, trace, error_before = pipeline.feature_learn_main(
                spec, train, schedule, test, log
            )
            feature_ckpt = os.path.join(cfg.out_dir, "feature.ckpt")
            save_checkpoint(net, feature_ckpt)
            stage = "learned-pipeline"
            report = pipeline.PruneReport(method="learned")
            report.traces["feature"] = trace
            report.error_before = error_before
            learned = pipeline.run_selection_stages(net, train, schedule,
                                                    teacher, test, log, report)
            counts = [len(e["pruned"]) for e in learned.report.layers]
            results = [learned]
            for mode, runner in (("baseline-layerwise", pipeline.msf_prune_layerwise),
                                 ("baseline-cascade", pipeline.msf_prune_cascade)):
                stage = mode
                base_net, _ = load_checkpoint(feature_ckpt)
                results.append(runner(base_net, counts, train, schedule, test, log))
            stage = "compare-report"
            with open(os.path.join(cfg.out_dir, "comparison.csv"), "w",
                      newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["method", "original_error", "retrain_error", "pfr"])
                for res in results:
                    r = res.report
                    writer.writerow([r.method, f"{r.error_before:.6f}",
                                     f"{r.error_after:.6f}",
                                     f"{r.global_pfr:.6f}"])
            save_checkpoint(results[0].masked,
                            os.path.join(cfg.out_dir, "model.ckpt"))

        log.write(os.path.join(cfg.out_dir, "metrics.csv"))
        return 0
    except Exception as exc:  # surface module errors with stage context
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="binprune",
        description="Binary network training, mask-based filter pruning, "
                    "MSF baselines and cost analysis.",
    )
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument("--mode", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    args = parser.parse_args(argv)
    overrides = list(args.set)
    if args.mode is not None:
        overrides.append(f"mode={args.mode}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    try:
        cfg = load_config(args.config, overrides)
    except (ValueError, OSError) as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 1
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
