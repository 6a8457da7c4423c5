"""Command-line interface for outlierflow."""

import argparse
import logging
import sys
import traceback
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from outlierflow.core.checkpoint import load_model, save_model
from outlierflow.core.classifier import max_logit
from outlierflow.core.composer import dump_composites
from outlierflow.core.data_io import (
    Calibration,
    DatasetManifest,
    ScoreMap,
    SplitData,
    load_manifest,
    load_split,
    read_disparity,
    read_label_png,
    read_score_map,
    write_json,
    write_label_png,
    write_score_map,
)
from outlierflow.core.divergences import divergence_curve
from outlierflow.core.metrics import EvalAccumulator, separation_histogram
from outlierflow.core.options import GENERATORS, LOSS_KINDS, SCORE_KINDS, RunConfig, load_config, save_config
from outlierflow.core.scoring import score_image_batch
from outlierflow.core.shapes import generate_shapes_dataset
from outlierflow.core.trainer import (
    JointState,
    TrainSchedule,
    joint_train,
    load_state,
    make_mixed_batch,
    pretrain_classifier,
    pretrain_flow,
    seed_everything,
)
from outlierflow.experiments.pipeline import (
    build_classifier,
    build_flow,
    build_gan,
    initialize_flow,
    make_eval_fn,
)
from outlierflow.experiments.tables import write_table


def make_progress(verbose: bool) -> Callable[[float, str], None]:
    """In-place progress bar on stdout."""

    def progress_callback(pct: float, msg: str):
        if verbose:
            bar_length = 30
            filled = int(bar_length * pct / 100)
            bar = "█" * filled + "░" * (bar_length - filled)
            print(f"\r  [{bar}] {pct:5.1f}% - {msg:<30}", end="", flush=True)

    return progress_callback


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def out_dir_for(args: argparse.Namespace) -> Path:
    out_dir = args.out_dir or Path("runs") / args.command
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _manifest(args: argparse.Namespace) -> DatasetManifest:
    return load_manifest(args.data)


def _load_classifier(config: RunConfig, path: Path):
    return load_model(build_classifier(config), path, "classifier")


def _load_flow(config: RunConfig, path: Path):
    return load_model(build_flow(config), path, "flow")


# Commands


def cmd_generate(args, config: RunConfig, out_dir: Path, verbose: bool) -> int:
    manifest = generate_shapes_dataset(
        out_dir,
        config.seed,
        config.n_train,
        config.n_test,
        config.num_classes,
        config.image_size,
        config.flow_levels,
        Calibration(config.focal_px, config.baseline_m),
    )
    if verbose:
        print(f"  {len(manifest.entries('train'))} train / {len(manifest.entries('test'))} test scenes")
        print(f"  Manifest: {out_dir / 'manifest.json'}")
    return 0


def cmd_toy2d(args, config: RunConfig, out_dir: Path, verbose: bool) -> int:
    from outlierflow.experiments.toy2d import toy2d_run

    report = toy2d_run(config, out_dir, make_progress(verbose))
    return _print_report(report, verbose)


def cmd_coverage(args, config: RunConfig, out_dir: Path, verbose: bool) -> int:
    from outlierflow.experiments.coverage import coverage_diagnostic

    report = coverage_diagnostic(config, out_dir, make_progress(verbose))
    return _print_report(report, verbose)


def cmd_losshist(args, config: RunConfig, out_dir: Path, verbose: bool) -> int:
    from outlierflow.experiments.losshist import loss_histogram_study

    data = load_split(_manifest(args), "train")
    classifier = _load_classifier(config, args.classifier)
    flow = _load_flow(config, args.flow)
    report = loss_histogram_study(classifier, flow, data, config, out_dir, args.images)
    return _print_report(report, verbose)


def cmd_ablate(args, config: RunConfig, out_dir: Path, verbose: bool) -> int:
    from outlierflow.experiments.ablation import ablation_grid

    report = ablation_grid(config, _manifest(args), out_dir, args.grids, make_progress(verbose))
    _print_report(report, verbose)
    return 0 if report.metrics.get("cells_completed", 0) > 0 else 1


def cmd_samples(args, config: RunConfig, out_dir: Path, verbose: bool) -> int:
    from outlierflow.experiments.samples import sample_grid

    flow = _load_flow(config, args.flow)
    success_count = 0
    for size in args.size:
        try:
            h, w = _parse_size(size)
            path = sample_grid(flow, args.rows, args.cols, (h, w), config.seed,
                               out_dir / f"samples_{h}x{w}.png", args.temperature)
            success_count += 1
            if verbose:
                print(f"  {h}x{w} → {path}")
        except Exception as e:
            if verbose:
                print(f"  Error ({size}): {e}")
    return 0 if success_count == len(args.size) else 1


def _parse_size(text: str) -> Tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) == 1:
        parts = parts * 2
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 32 or 32x48, got {text!r}")
    return h, w


def cmd_pretrain_cls(args, config: RunConfig, out_dir: Path, verbose: bool) -> int:
    data = load_split(_manifest(args), "train")
    seed_everything(config.seed, config.deterministic)
    schedule = TrainSchedule.from_config(config)
    result = pretrain_classifier(build_classifier(config), data, schedule, make_progress(verbose))
    if verbose:
        print()
    write_table([["epoch", "cross_entropy"]] + [[i + 1, v] for i, v in enumerate(result.history)],
                out_dir / "losses.csv")
    path = save_model(result.model, out_dir / "classifier.pt", "classifier", config.to_dict())
    if verbose:
        print(f"  Saved to: {path}")
    return 0


def cmd_pretrain_flow(args, config: RunConfig, out_dir: Path, verbose: bool) -> int:
    data = load_split(_manifest(args), "train")
    seed_everything(config.seed, config.deterministic)
    schedule = TrainSchedule.from_config(config)
    result = pretrain_flow(build_flow(config), data, config.crop_size, schedule, make_progress(verbose))
    if verbose:
        print()
    rows = [["epoch", "bits_per_dim"], [0, result.initial]]
    rows += [[i + 1, v] for i, v in enumerate(result.history)]
    write_table(rows, out_dir / "losses.csv")
    path = save_model(result.model, out_dir / "flow.pt", "flow", config.to_dict())
    if verbose:
        print(f"  {result.initial:.3f} → {result.history[-1] if result.history else result.initial:.3f} bits/dim")
        print(f"  Saved to: {path}")
    return 0


def _joint_state(args, config: RunConfig, train: SplitData) -> JointState:
    schedule = TrainSchedule.from_config(config)
    classifier = _load_classifier(config, args.classifier) if args.classifier else build_classifier(config)
    flow = gan = None
    if config.generator == "gan":
        gan = build_gan(config)
    else:
        flow = _load_flow(config, args.flow) if args.flow else initialize_flow(build_flow(config), train, config)
    return JointState.create(classifier, flow, schedule, schedule.steps_per_epoch(len(train)), gan=gan)


def cmd_joint_train(args, config: RunConfig, out_dir: Path, verbose: bool) -> int:
    manifest = _manifest(args)
    train = load_split(manifest, "train")
    seed_everything(config.seed, config.deterministic)
    state = _joint_state(args, config, train)
    if args.resume:
        load_state(state, args.resume)
        if verbose:
            print(f"  Resuming after epoch {state.epoch}")

    eval_fn = None
    if "test" in manifest.splits and not args.no_eval:
        test = load_split(manifest, "test")
        eval_fn = make_eval_fn(test, config.num_classes, [(config.score_kind, config.temperature)],
                               config.tpr, config.batch_size)

    schedule = TrainSchedule.from_config(config)
    joint_train(state, train, schedule, out_dir, eval_fn, make_progress(verbose), config.to_dict())
    if verbose:
        print()
    save_model(state.classifier, out_dir / "classifier.pt", "classifier", config.to_dict())
    if state.flow is not None:
        save_model(state.flow, out_dir / "flow.pt", "flow", config.to_dict())
    if verbose:
        print(f"  Loss history: {out_dir / 'losses.csv'}")
    return 0


def cmd_score(args, config: RunConfig, out_dir: Path, verbose: bool) -> int:
    data = load_split(_manifest(args), args.split)
    classifier = _load_classifier(config, args.classifier)
    kind = args.kind or config.score_kind
    temperature = args.temperature if args.temperature is not None else config.temperature_for(kind)

    success_count = 0
    for i, name in enumerate(data.names):
        try:
            scored = score_image_batch(classifier, data.images[i : i + 1], kind, temperature)
            write_score_map(ScoreMap(scored.scores[0]), out_dir / f"{name}.smap")
            write_label_png(scored.predictions[0].astype(np.uint8), out_dir / f"{name}_pred.png")
            success_count += 1
        except Exception as e:
            if verbose:
                print(f"  Error ({name}): {e}")
        make_progress(verbose)(100.0 * (i + 1) / len(data), name)
    if verbose:
        print(f"\nScored {success_count}/{len(data)} images ({kind}, T={temperature:g})")
    return 0 if success_count == len(data) else 1


def _separation(config: RunConfig, data: SplitData, models: Dict[str, torch.nn.Module],
                out_dir: Path) -> Dict[str, float]:
    """Max-logit separation of known vs unknown pixels for each named model."""
    from outlierflow.experiments.plotting import plot_separation

    labels = data.labels.numpy()
    known = (labels < config.num_classes)
    unknown = labels == config.num_classes
    values = {}
    for name, model in models.items():
        model.eval()
        with torch.no_grad():
            logits = torch.cat([model(data.images[s : s + config.batch_size])
                                for s in range(0, len(data), config.batch_size)])
        ml = max_logit(logits).numpy()
        hist = separation_histogram(ml[known], ml[unknown])
        rows = [["bin_lo", "bin_hi", "known", "unknown"]]
        rows += [[float(lo), float(hi), int(k), int(u)]
                 for lo, hi, k, u in zip(hist.edges[:-1], hist.edges[1:], hist.known, hist.unknown)]
        write_table(rows, out_dir / f"separation_{name}.csv")
        plot_separation(hist.edges, {"known": hist.known, "unknown": hist.unknown},
                        out_dir / f"separation_{name}.png", title=f"{name}: AUROC {hist.auroc:.3f}")
        values[f"separation_auroc_{name}"] = hist.auroc
    return values


def cmd_separation(args, config: RunConfig, out_dir: Path, verbose: bool) -> int:
    data = load_split(_manifest(args), args.split)
    models = {"trained": _load_classifier(config, args.classifier)}
    if args.baseline:
        models["pretrained"] = _load_classifier(config, args.baseline)
    values = _separation(config, data, models, out_dir)
    write_json(values, out_dir / "separation.json")
    if verbose:
        for key, value in values.items():
            print(f"  {key}: {value:.4f}")
    return 0


def cmd_evaluate(args, config: RunConfig, out_dir: Path, verbose: bool) -> int:
    manifest = _manifest(args)
    entries = manifest.entries(args.split)
    accumulator = EvalAccumulator(manifest.num_classes, config.tpr, manifest.calibration)

    missing = 0
    for i, entry in enumerate(entries):
        name = Path(entry.image).stem
        try:
            scores = read_score_map(args.scores / f"{name}.smap").scores
            predictions = read_label_png(args.scores / f"{name}_pred.png")
            labels = read_label_png(manifest.path(entry.label))
            disparity = None
            if entry.disparity is not None:
                disparity = read_disparity(manifest.path(entry.disparity))
            accumulator.add(scores, labels, predictions, disparity)
        except Exception as e:
            missing += 1
            if verbose:
                print(f"  Error ({name}): {e}")

    result = accumulator.result()
    data = result.to_dict()
    score_rows = _score_histogram(accumulator)
    write_table(score_rows, out_dir / "score_histogram.csv")
    if result.depth is not None:
        write_table([["depth_m", "pixels", "fpr"]] + result.depth.rows(), out_dir / "depth_fpr.csv")
    if args.classifier:
        split = load_split(manifest, args.split)
        models = {"trained": _load_classifier(config, args.classifier)}
        if args.baseline:
            models["pretrained"] = _load_classifier(config, args.baseline)
        data.update(_separation(config, split, models, out_dir))
    data["images_failed"] = missing
    write_json(data, out_dir / "eval.json")

    if verbose:
        print(f"  AP {result.ap:.4f}  AUROC {result.auroc:.4f}  FPR95 {result.fpr95:.4f}")
        print(f"  mIoU {result.miou:.4f}  open-mIoU {result.open_miou:.4f}")
        print(f"  Saved to: {out_dir / 'eval.json'}")
    return 0 if missing == 0 else 1


def _score_histogram(accumulator: EvalAccumulator, bins: int = 50) -> List[List]:
    scores, labels = accumulator.pooled()
    outlier = labels == accumulator.num_classes
    edges = np.histogram_bin_edges(scores, bins=bins)
    inlier_counts, _ = np.histogram(scores[~outlier], bins=edges)
    outlier_counts, _ = np.histogram(scores[outlier], bins=edges)
    rows = [["bin_lo", "bin_hi", "inlier", "anomaly"]]
    rows += [[float(lo), float(hi), int(a), int(b)]
             for lo, hi, a, b in zip(edges[:-1], edges[1:], inlier_counts, outlier_counts)]
    return rows


def cmd_curves(args, config: RunConfig, out_dir: Path, verbose: bool) -> int:
    from outlierflow.experiments.plotting import plot_curves

    curves = {kind: divergence_curve(kind, args.resolution) for kind in LOSS_KINDS}
    grid = curves["jsd"][:, 0]
    write_table([["p"] + list(LOSS_KINDS)] + [
        [float(p)] + [float(curves[k][i, 1]) for k in LOSS_KINDS] for i, p in enumerate(grid)
    ], out_dir / "curves.csv")
    plot_curves(curves, out_dir / "curves.png", ylim=args.ylim)
    if verbose:
        print(f"  Saved to: {out_dir / 'curves.csv'}")
    return 0


def cmd_compose_debug(args, config: RunConfig, out_dir: Path, verbose: bool) -> int:
    data = load_split(_manifest(args), "train")
    count = min(args.count, len(data))
    flow = _load_flow(config, args.flow) if args.flow else initialize_flow(build_flow(config), data, config)
    schedule = TrainSchedule.from_config(config)
    state = JointState.create(build_classifier(config), flow, schedule, 1)
    state.flow_frozen = True
    with torch.no_grad():
        batch = make_mixed_batch(state, data.images[:count], data.labels[:count], schedule.patch_range)
    written = dump_composites(batch, out_dir)
    if verbose:
        print(f"  Wrote {len(written)} files to {out_dir}")
    return 0


def _print_report(report, verbose: bool) -> int:
    if verbose:
        print()
        for key, value in sorted(report.metrics.items()):
            print(f"  {key}: {value:.4f}" if isinstance(value, float) else f"  {key}: {value}")
        print(f"  Report: {report.out_dir / 'report.json'}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "toy2d": cmd_toy2d,
    "coverage": cmd_coverage,
    "losshist": cmd_losshist,
    "ablate": cmd_ablate,
    "samples": cmd_samples,
    "pretrain-cls": cmd_pretrain_cls,
    "pretrain-flow": cmd_pretrain_flow,
    "joint-train": cmd_joint_train,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "separation": cmd_separation,
    "curves": cmd_curves,
    "compose-debug": cmd_compose_debug,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config file (default: built-in toy config)")
    common.add_argument("--seed", type=int, help="Override the config seed")
    common.add_argument("--out-dir", type=Path, help="Output directory (default: runs/<command>)")
    common.add_argument("-q", "--quiet", action="store_true", help="Suppress output")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging and full tracebacks")

    parser = argparse.ArgumentParser(
        prog="outlierflow",
        description="Dense out-of-distribution detection trained with flow-generated negatives.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text)

    def data_arg(p: argparse.ArgumentParser):
        p.add_argument("--data", type=Path, required=True, help="Dataset manifest.json")

    add("generate", "Write the toy shapes dataset")
    add("toy2d", "Planar two-class toy with flow negatives")
    add("coverage", "Mode coverage of flow vs GAN negatives")

    p = add("losshist", "Per-pixel negative-loss histograms per divergence kind")
    data_arg(p)
    p.add_argument("--classifier", type=Path, required=True, help="Pre-trained classifier checkpoint")
    p.add_argument("--flow", type=Path, required=True, help="Pre-trained flow checkpoint")
    p.add_argument("--images", type=int, help="Number of training images to compose (default: all)")

    p = add("ablate", "Loss/score, generator, pre-training and temperature grids")
    data_arg(p)
    p.add_argument("--grids", nargs="+", default=["loss", "generator", "pretrain", "temperature"],
                   choices=["loss", "generator", "pretrain", "temperature"], help="Grids to run")

    p = add("samples", "Tiled flow samples")
    p.add_argument("--flow", type=Path, required=True, help="Flow checkpoint")
    p.add_argument("--rows", type=int, default=4, help="Grid rows (default: 4)")
    p.add_argument("--cols", type=int, default=4, help="Grid columns (default: 4)")
    p.add_argument("--size", nargs="+", default=["32"], help="Sample sizes, e.g. 32 or 32x64 (default: 32)")
    p.add_argument("--temperature", type=float, default=1.0, help="Prior temperature (default: 1.0)")

    p = add("pretrain-cls", "Pre-train the classifier on inlier pixels")
    data_arg(p)
    p = add("pretrain-flow", "Pre-train the flow on random inlier crops")
    data_arg(p)

    p = add("joint-train", "Joint fine-tuning on mixed-content images")
    data_arg(p)
    p.add_argument("--classifier", type=Path, help="Pre-trained classifier checkpoint")
    p.add_argument("--flow", type=Path, help="Pre-trained flow checkpoint")
    p.add_argument("--generator", choices=GENERATORS, help="Negative source (default: from config)")
    p.add_argument("--loss-kind", choices=LOSS_KINDS, help="Negative loss (default: from config)")
    p.add_argument("--resume", type=Path, help="joint_state.pt to resume from")
    p.add_argument("--no-eval", action="store_true", help="Skip per-epoch evaluation of the test split")

    p = add("score", "Write per-image score maps and closed-set predictions")
    data_arg(p)
    p.add_argument("--classifier", type=Path, required=True, help="Classifier checkpoint")
    p.add_argument("--split", default="test", help="Split to score (default: test)")
    p.add_argument("--kind", choices=SCORE_KINDS, help="Score kind (default: from config)")
    p.add_argument("--temperature", type=float, help="Temperature (default: per-kind config value)")

    p = add("evaluate", "Pixel-pooled evaluation of written score maps")
    data_arg(p)
    p.add_argument("--scores", type=Path, required=True, help="Directory written by 'score'")
    p.add_argument("--split", default="test", help="Split to evaluate (default: test)")
    p.add_argument("--classifier", type=Path, help="Also write max-logit separation for this checkpoint")
    p.add_argument("--baseline", type=Path, help="Pre-trained checkpoint to compare separation against")

    p = add("separation", "Max-logit separation of known vs unknown pixels")
    data_arg(p)
    p.add_argument("--classifier", type=Path, required=True, help="Classifier checkpoint")
    p.add_argument("--baseline", type=Path, help="Pre-trained checkpoint to compare against")
    p.add_argument("--split", default="test", help="Split (default: test)")

    p = add("curves", "Two-class divergence-to-uniform curves")
    p.add_argument("--resolution", type=int, default=201, help="Points per curve (default: 201)")
    p.add_argument("--ylim", type=float, default=3.0, help="Upper y limit of the plot (default: 3.0)")

    p = add("compose-debug", "Dump mixed-content images and paste masks")
    data_arg(p)
    p.add_argument("--flow", type=Path, help="Flow checkpoint (default: untrained flow)")
    p.add_argument("--count", type=int, default=8, help="Number of images (default: 8)")
    return parser


def main(args: Optional[List[str]] = None):
    """Main entry point for the CLI."""
    parser = build_parser()
    parsed_args = parser.parse_args(args)
    if not parsed_args.command:
        parser.print_help()
        return 1

    verbose = not parsed_args.quiet
    logging.basicConfig(
        level=logging.DEBUG if parsed_args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        config = resolve_config(parsed_args)
        overrides = {}
        if getattr(parsed_args, "generator", None):
            overrides["generator"] = parsed_args.generator
        if getattr(parsed_args, "loss_kind", None):
            overrides["loss_kind"] = parsed_args.loss_kind
        if overrides:
            config = config.replace(**overrides)
        out_dir = out_dir_for(parsed_args)
        save_config(config, out_dir / "config.yaml")
        if verbose:
            print(f"{parsed_args.command}: {out_dir}")
        return COMMANDS[parsed_args.command](parsed_args, config, out_dir, verbose)
    except Exception as e:
        if parsed_args.verbose:
            traceback.print_exc()
        if verbose:
            print(f"\nError: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
