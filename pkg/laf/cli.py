#!/usr/bin/env python3
"""
Command Line Interface
One entry point for every stage of the cross-family detection study

    laf generate          synthetic real/fake datasets as PNG + manifest
    laf preprocess        margin crop + left-eye alignment of a generated tree
    laf train             train one family's model, write a checkpoint
    laf eval              cross-family AP matrix of trained checkpoints
    laf rank              CoV^-1 rankings of a matrix or the benchmark fixture
    laf importance        per-layer importance profile of a checkpoint
    laf trim              AP degradation of importance-trimmed models
    laf cam               Score-CAM heatmaps of one image
    laf reproduce-tables  recompute the published summary columns
    laf pipeline          generate → train → eval → rank → analysis in one run

Exit codes: 0 success, 1 runtime error (one JSON line on stderr), 2 usage error.
See docs/cli.md for every flag.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from laf.aggregation_model import AggregationModel
from laf.ap_evaluator import ExperimentMatrix, cross_matrix
from laf.benchmark_tables import (
    FIXTURE_PATH,
    load_fixture,
    ranking_frame,
    reproduce_published_summaries,
    summary_frame,
    table_summaries,
)
from laf.checkpoint_manager import (
    Checkpoint,
    check_compatible,
    check_image_size,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from laf.errors import ConfigError, ConfigMismatchError, InvalidArgumentError, LafError
from laf.face_preprocessor import preprocess_dataset
from laf.layer_analysis import (
    RankingCriterion,
    importance_figure,
    layer_importance,
    rank_layers,
    trim_curve,
    trim_figure,
)
from laf.model_trainer import train
from laf.report_writer import ArtifactWriter, read_png
from laf.score_cam import cam_for_image, cam_localization, write_cam
from laf.settings import RunConfig, load_run_config
from laf.synthetic_faces import (
    DatasetSpec,
    FamilyId,
    LabeledDataset,
    ManipulationFamily,
    Split,
    build_dataset,
    load_dataset,
    materialize_dataset,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME_ERROR = 1
EXIT_USAGE_ERROR = 2

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(verbose: bool = False, log_file: Optional[str] = None):
    """Console logging on stdout (stderr carries only the error line), optional file"""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


# =============================================================================
# ARGUMENT TYPES
# =============================================================================

def family_arg(text: str) -> FamilyId:
    try:
        family = FamilyId(text.lower())
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"unknown family {text!r} (choose from {', '.join(f.value for f in FamilyId if f != FamilyId.NONE)})")
    if family == FamilyId.NONE:
        raise argparse.ArgumentTypeError("family 'none' has no fakes to learn")
    return family


def checkpoint_arg(text: str) -> Tuple[FamilyId, Path]:
    """FAMILY=PATH"""
    family, sep, path = text.partition("=")
    if not sep or not path:
        raise argparse.ArgumentTypeError(f"expected FAMILY=PATH, got {text!r}")
    return family_arg(family), Path(path)


def split_arg(text: str) -> Split:
    try:
        return Split(text.lower())
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown split {text!r}")


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


# =============================================================================
# SHARED STEPS
# =============================================================================

def split_pairs(config: RunConfig, split: Split) -> int:
    return {
        Split.TRAIN: config.data.train_pairs,
        Split.VAL: config.data.val_pairs,
        Split.TEST: config.data.test_pairs,
    }[split]


def build_raw(config: RunConfig, family: FamilyId, split: Split) -> LabeledDataset:
    spec = DatasetSpec(
        family=ManipulationFamily.default(family),
        n_pairs=split_pairs(config, split),
        seed=config.data.seed,
        split=split,
        image_size=config.data.image_size,
    )
    return build_dataset(spec, config.data.max_workers)


def align(config: RunConfig, dataset: LabeledDataset) -> LabeledDataset:
    return preprocess_dataset(dataset, config.data.frame(), config.data.margins)


def load_model(path: Path, config: RunConfig) -> Tuple[AggregationModel, Checkpoint]:
    """Load a checkpoint and refuse it unless it fits the run's backbone"""
    ckpt = load_checkpoint(path)
    check_compatible(ckpt, config.model_config().backbone)
    return model_from_checkpoint(ckpt), ckpt


def load_checked(root: Path, family: FamilyId, split: Split, ckpt: Checkpoint) -> LabeledDataset:
    dataset = load_dataset(root, family, split)
    check_image_size(ckpt, dataset.image_size())
    return dataset


def write_matrix(writer: ArtifactWriter, matrix: ExperimentMatrix, config: RunConfig, prefix: str = ""):
    """Matrix as CSV + JSON and one CoV^-1 ranking per configured mode"""
    writer.csv(f"{prefix}matrix.csv", matrix.to_frame().reset_index())
    writer.json(f"{prefix}matrix.json", matrix.to_dict())
    for mode in config.eval.modes:
        summaries = matrix.summaries(mode, skip_errors=True)
        writer.csv(f"{prefix}ranking_{mode.value}.csv", ranking_frame(summaries))


def write_fixture_report(writer: ArtifactWriter, fixture: Optional[Path]) -> bool:
    tables = load_fixture(fixture)
    checks = reproduce_published_summaries(tables)
    writer.csv("published_summaries.csv", summary_frame(checks))
    writer.json("published_summaries.json", [c.to_row() for c in checks])
    for name, table in tables.items():
        writer.csv(f"ranking_{name}.csv", ranking_frame(table_summaries(table)))
    return all(c.all_match for c in checks)


def history_rows(history) -> List[Dict]:
    return [record.to_dict() for record in history]


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_generate(args, config: RunConfig):
    families = args.family or list(config.data.families)
    splits = args.split or list(Split)
    writer = ArtifactWriter(args.out)
    written = []
    for family in families:
        for split in splits:
            manifest = materialize_dataset(build_raw(config, family, split), args.out)
            written.append(str(manifest.relative_to(Path(args.out))))
    writer.json("generate.json", {"seed": config.data.seed, "manifests": written})
    writer.finish("generate")


def cmd_preprocess(args, config: RunConfig):
    families = args.family or list(config.data.families)
    splits = args.split or list(Split)
    writer = ArtifactWriter(args.out)
    written = []
    frame = config.data.frame()
    for family in families:
        for split in splits:
            aligned = align(config, load_dataset(args.input, family, split))
            manifest = materialize_dataset(aligned, args.out, extra={
                "preprocessed": True,
                "margins": list(config.data.margins),
                "left_eye_target": list(frame.left_eye_target),
                "eye_distance": frame.eye_distance,
            })
            written.append(str(manifest.relative_to(Path(args.out))))
    writer.json("preprocess.json", {"out_size": frame.out_size, "manifests": written})
    writer.finish("preprocess")


def cmd_train(args, config: RunConfig):
    train_set = load_dataset(args.data, args.family, Split.TRAIN)
    val_set = load_dataset(args.data, args.family, Split.VAL)
    model = AggregationModel(config.model_config())
    result = train(model, train_set, val_set, config.train, metadata={"family": args.family.value})
    out = Path(args.out)
    save_checkpoint(result.checkpoint, out)
    writer = ArtifactWriter(out.parent)
    writer.csv(f"{out.stem}_history.csv", history_rows(result.history), columns=["epoch", "train_loss", "val_ap"])
    writer.json(f"{out.stem}_train.json", result.checkpoint.train_metadata)


def cmd_eval(args, config: RunConfig):
    models = {}
    for family, path in args.checkpoint:
        models[family.value], ckpt = load_model(path, config)
    test_families = list(config.data.families) if args.matrix else [family for family, _ in args.checkpoint]
    # every checkpoint passed check_compatible, so any one fixes the input size
    datasets = {f.value: load_checked(args.data, f, Split.TEST, ckpt) for f in test_families}
    matrix = cross_matrix(models, datasets, config.eval.max_workers)
    writer = ArtifactWriter(args.out)
    write_matrix(writer, matrix, config)
    writer.finish("eval")


def cmd_rank(args, config: RunConfig):
    writer = ArtifactWriter(args.out)
    if args.matrix:
        matrix = ExperimentMatrix.load(args.matrix)
        for mode in config.eval.modes:
            writer.csv(f"ranking_{mode.value}.csv", ranking_frame(matrix.summaries(mode, skip_errors=True)))
    else:
        write_fixture_report(writer, args.fixture)
    writer.finish("rank")


def cmd_reproduce_tables(args, config: RunConfig):
    writer = ArtifactWriter(args.out)
    if not write_fixture_report(writer, args.fixture):
        logger.warning("Some recomputed summaries differ from the published values; see published_summaries.csv")
    writer.finish("reproduce-tables")


def cmd_importance(args, config: RunConfig):
    model, ckpt = load_model(args.checkpoint, config)
    family = args.family or (FamilyId(ckpt.family) if ckpt.family else None)
    if family is None:
        raise ConfigError("checkpoint records no family; pass --family")
    dataset = load_checked(args.data, family, args.split, ckpt)
    profile = layer_importance(model, dataset)
    criterion = args.criterion or config.analysis.criterion
    writer = ArtifactWriter(args.out)
    writer.csv("importance.csv", profile.to_frame())
    document = profile.to_dict()
    document["ranking"] = {"criterion": criterion.value, "layers": rank_layers(profile, criterion)}
    writer.json("importance.json", document)
    writer.figure("importance.png", importance_figure(profile, f"Layer importance ({family.value})"))
    writer.finish("importance")


def cmd_trim(args, config: RunConfig):
    models, profiles = {}, {}
    for family, path in args.checkpoint:
        model, ckpt = load_model(path, config)
        models[family.value] = model
        profiles[family.value] = layer_importance(model, load_checked(args.data, family, Split.VAL, ckpt))
    datasets = {f.value: load_checked(args.data, f, Split.TEST, ckpt) for f in config.data.families}
    ns = sorted(set(args.n or config.analysis.trim_n) | {model.L})
    criterion = args.criterion or config.analysis.criterion
    curve = trim_curve(models, profiles, datasets, ns, criterion, max_workers=config.eval.max_workers)
    writer = ArtifactWriter(args.out)
    write_trim(writer, curve)
    writer.finish("trim")


def write_trim(writer: ArtifactWriter, curve):
    writer.csv("trim.csv", curve.to_frame())
    writer.json("trim.json", {
        "full_matrix": curve.full_matrix.to_dict(),
        "points": [
            {
                "n": point.n,
                "ap_degradation": point.ap_degradation,
                "mean_fraction": point.mean_fraction(),
                "plans": {name: plan.to_dict() for name, plan in point.plans.items()},
                "matrix": point.matrix.to_dict(),
            }
            for point in curve.points
        ],
    })
    writer.figure("trim.png", trim_figure(curve))


def cmd_cam(args, config: RunConfig):
    model, _ = load_model(args.checkpoint, config)
    image = read_png(args.image)
    if image.ndim != 3 or image.shape[2] != model.config.backbone.in_channels:
        raise InvalidArgumentError(f"{args.image}: expected an RGB image")
    expected = model.config.backbone.input_size
    if image.shape[:2] != (expected, expected):
        raise ConfigMismatchError(f"{args.image} is {image.shape[1]}x{image.shape[0]}, model expects {expected}px")
    k = args.k or config.analysis.cam_k
    writer = ArtifactWriter(args.out)
    for result in cam_for_image(model, image, k, config.analysis.cam_batch_size):
        write_cam(writer, Path(args.image).stem, result, image)
    writer.finish("cam")


def run_pipeline(config: RunConfig, out_dir, keep_data: bool = False) -> Dict:
    """
    Desk-scale cross-family study: per family generate + align + train, then the
    cross matrix, CoV^-1 rankings, importance profiles, trim curve and CAM
    localization on the local-blend fakes.
    """
    out_dir = Path(out_dir)
    writer = ArtifactWriter(out_dir / "reports")
    families = list(config.data.families)
    frame = config.data.frame()

    tests: Dict[str, LabeledDataset] = {}
    cam_family = FamilyId.LOCAL_BLEND if FamilyId.LOCAL_BLEND in families else families[0]
    cam_raw = None
    for family in families:
        raw_test = build_raw(config, family, Split.TEST)
        tests[family.value] = align(config, raw_test)
        if family == cam_family:
            cam_raw = raw_test
        if keep_data:
            materialize_dataset(tests[family.value], out_dir / "data")

    models: Dict[str, AggregationModel] = {}
    profiles = {}
    diagonal = {}
    for family in families:
        train_set = align(config, build_raw(config, family, Split.TRAIN))
        val_set = align(config, build_raw(config, family, Split.VAL))
        if keep_data:
            materialize_dataset(train_set, out_dir / "data")
            materialize_dataset(val_set, out_dir / "data")
        result = train(AggregationModel(config.model_config()), train_set, val_set, config.train,
                       metadata={"family": family.value})
        save_checkpoint(result.checkpoint, out_dir / "models" / f"{family.value}.ckpt")
        writer.csv(f"history_{family.value}.csv", history_rows(result.history),
                   columns=["epoch", "train_loss", "val_ap"])
        models[family.value] = result.model
        profiles[family.value] = layer_importance(result.model, val_set)
        diagonal[family.value] = result.checkpoint.best_val_ap
        writer.csv(f"importance_{family.value}.csv", profiles[family.value].to_frame())
        writer.figure(f"importance_{family.value}.png",
                      importance_figure(profiles[family.value], f"Layer importance ({family.value})"))

    matrix = cross_matrix(models, tests, config.eval.max_workers)
    write_matrix(writer, matrix, config)

    L = config.model_config().backbone.L
    ns = sorted(set(config.analysis.trim_n) | {L})
    curve = trim_curve(models, profiles, tests, ns, config.analysis.criterion,
                       full_matrix=matrix, max_workers=config.eval.max_workers)
    write_trim(writer, curve)

    localization = cam_localization(
        models[cam_family.value], cam_raw.items, ManipulationFamily.default(cam_family), frame,
        config.data.margins, config.analysis.cam_images, config.analysis.cam_batch_size)
    writer.json("cam_localization.json", localization)

    summary = {
        "families": [f.value for f in families],
        "best_val_ap": diagonal,
        "diagonal_test_ap": {f: matrix.cell(f, f) for f in matrix.rows if f in matrix.cols},
        "trim": {str(p.n): {"ap_degradation": p.ap_degradation, "mean_fraction": p.mean_fraction()}
                 for p in curve.points},
        "cam_localization_rate": localization["rate"],
        "config": config.to_dict(),
    }
    writer.json("summary.json", summary)
    writer.finish("pipeline")
    return summary


def cmd_pipeline(args, config: RunConfig):
    run_pipeline(config, args.out, keep_data=args.keep_data)


# =============================================================================
# PARSER
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="laf", description="Layer-aggregation fake-image detection toolkit")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--log-file", help="also log to this file")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def command(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="run config (JSON or YAML); defaults when omitted")
        p.set_defaults(handler=handler)
        return p

    p = command("generate", cmd_generate, "generate synthetic real/fake datasets")
    p.add_argument("--out", required=True, help="dataset root")
    p.add_argument("--family", type=family_arg, action="append", help="family to generate (repeatable)")
    p.add_argument("--split", type=split_arg, action="append", help="split to generate (repeatable)")

    p = command("preprocess", cmd_preprocess, "crop and align a generated dataset tree")
    p.add_argument("--input", required=True, help="raw dataset root")
    p.add_argument("--out", required=True, help="aligned dataset root")
    p.add_argument("--family", type=family_arg, action="append")
    p.add_argument("--split", type=split_arg, action="append")

    p = command("train", cmd_train, "train the model of one manipulation family")
    p.add_argument("--family", type=family_arg, required=True)
    p.add_argument("--data", required=True, help="aligned dataset root")
    p.add_argument("--out", required=True, help="checkpoint path")

    p = command("eval", cmd_eval, "AP of checkpoints on test splits")
    p.add_argument("--checkpoint", type=checkpoint_arg, action="append", required=True,
                   help="FAMILY=PATH (repeatable)")
    p.add_argument("--data", required=True, help="aligned dataset root")
    p.add_argument("--matrix", action="store_true", help="test on every configured family")
    p.add_argument("--out", required=True, help="report directory")

    p = command("rank", cmd_rank, "CoV^-1 rankings")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--fixture", nargs="?", const=FIXTURE_PATH, type=Path,
                        help="benchmark fixture (bundled one when no path is given)")
    source.add_argument("--matrix", help="matrix.json written by eval")
    p.add_argument("--out", required=True, help="report directory")

    p = command("importance", cmd_importance, "per-layer importance profile")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", required=True, help="aligned dataset root")
    p.add_argument("--family", type=family_arg, help="dataset family (defaults to the checkpoint's)")
    p.add_argument("--split", type=split_arg, default=Split.VAL)
    p.add_argument("--criterion", type=RankingCriterion)
    p.add_argument("--out", required=True, help="report directory")

    p = command("trim", cmd_trim, "AP degradation of trimmed aggregation")
    p.add_argument("--checkpoint", type=checkpoint_arg, action="append", required=True,
                   help="FAMILY=PATH (repeatable)")
    p.add_argument("--data", required=True, help="aligned dataset root")
    p.add_argument("--n", type=positive_int, action="append", help="layers to keep (repeatable)")
    p.add_argument("--criterion", type=RankingCriterion)
    p.add_argument("--out", required=True, help="report directory")

    p = command("cam", cmd_cam, "Score-CAM heatmaps of one aligned image")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", required=True, help="aligned RGB PNG")
    p.add_argument("--k", type=positive_int, help="number of layers")
    p.add_argument("--out", required=True, help="report directory")

    p = command("reproduce-tables", cmd_reproduce_tables, "recompute the published summary columns")
    p.add_argument("--fixture", type=Path, default=None)
    p.add_argument("--out", required=True, help="report directory")

    p = command("pipeline", cmd_pipeline, "full desk-scale study")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--keep-data", action="store_true", help="also write the aligned datasets")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE_ERROR
    configure_logging(args.verbose, args.log_file)
    try:
        config = load_run_config(args.config)
        args.handler(args, config)
    except (LafError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return EXIT_RUNTIME_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
