"""Command-line interface.

Subcommands map 1:1 onto the pipeline stages::

    synth -> validate -> fingerprint -> plan -> preprocess -> train
          -> predict -> evaluate        (convert for external datasets)

The results root is --results, else $NNLM_RESULTS, else ./results. All
randomness flows from --seed through named sub-streams; no hidden global RNG.
Domain errors exit with code 2.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import codec, converters, folds, planning, preprocessing, reporting, synth, training
from .errors import ConfigError, LandmarkError
from .evaluation import BiometrySpec, evaluate_directories
from .geometry import Volume3D
from .inference import predict_case
from .volume_io import image_stem, load_volume, save_volume

DEFAULT_THRESHOLDS = "2,3,4"


def _results_root(args) -> Path:
    if getattr(args, "results", None):
        return Path(args.results)
    env = os.environ.get("NNLM_RESULTS")
    return Path(env) if env else Path("results")


def _dataset_context(args):
    dataset_root = Path(args.dataset)
    info = codec.load_dataset_info(dataset_root)
    return dataset_root, info, _results_root(args) / info.name


def _load_overrides(args) -> dict:
    overrides = {}
    if getattr(args, "config", None):
        overrides.update(json.loads(Path(args.config).read_text()))
    if getattr(args, "epochs", None):
        overrides["epochs"] = args.epochs
    return overrides


def _plan_with_overrides(res: Path, args) -> planning.Plan:
    plan_path = res / "plan.json"
    if not plan_path.exists():
        raise ConfigError(f"no plan at {plan_path}; run the plan subcommand first")
    plan = planning.load_plan(plan_path)
    overrides = _load_overrides(args)
    if overrides:
        plan = planning.Plan.from_dict({**plan.to_dict(), **overrides})
    return plan


def _parse_shape(text: str):
    parts = [int(p) for p in text.split(",")]
    return parts[0] if len(parts) == 1 else parts


def _ensure_preprocessed(cases, plan, fp, info, cache_dir):
    preprocessing.preprocess_dataset(cases, plan, fp, info.classes, cache_dir)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    info = synth.synth_generate(args.out, args.cases, _parse_shape(args.shape),
                                args.classes, seed=args.seed, noise=args.noise,
                                test_fraction=args.test_fraction)
    print(f"wrote synthetic dataset {info.name!r} with {args.cases} cases, "
          f"{len(info.classes)} classes to {args.out}")
    return 0


def cmd_validate(args) -> int:
    dataset_root, info, res = _dataset_context(args)
    target = None
    plan_path = res / "plan.json"
    if plan_path.exists():
        target = planning.load_plan(plan_path).target_spacing
    cases = codec.load_cases(dataset_root, "train") + codec.load_cases(dataset_root, "test")
    report = codec.validate_dataset(cases, classes=info.classes, target_spacing=target)
    planning.save_json(res / "validation.json", report.to_dict())
    bad = [c for c in report.cases if c.violations]
    if bad:
        print(f"validation: {len(bad)} of {len(report.cases)} cases have violations")
        for c in bad:
            print(f"  {c.case_id}: out_of_grid={c.out_of_grid} "
                  f"separation_native={c.separation_native} "
                  f"separation_target={c.separation_target} "
                  f"missing={c.missing_classes} unexpected={c.unexpected_classes} "
                  f"nonfinite={c.nonfinite}")
    else:
        print(f"validation: all {len(report.cases)} cases clean")
    return 0


def cmd_fingerprint(args) -> int:
    dataset_root, info, res = _dataset_context(args)
    cases = codec.load_cases(dataset_root, "train")
    fp = planning.compute_fingerprint(cases, info.modality, len(info.classes),
                                      seed=args.seed)
    planning.save_json(res / "fingerprint.json", fp.to_dict())
    print(f"fingerprinted {len(cases)} cases -> {res / 'fingerprint.json'}")
    return 0


def cmd_plan(args) -> int:
    dataset_root, info, res = _dataset_context(args)
    fp_path = res / "fingerprint.json"
    if not fp_path.exists():
        raise ConfigError(f"no fingerprint at {fp_path}; run the fingerprint subcommand first")
    fp = planning.load_fingerprint(fp_path)
    plan = planning.derive_plan(fp, _load_overrides(args) or None)
    planning.save_json(res / "plan.json", plan.to_dict())

    cases = codec.load_cases(dataset_root, "train")
    splits = folds.split_folds([c.case_id for c in cases], plan.fold_count, seed=args.seed)
    folds.save_splits(res / "splits.json", splits)
    print(f"plan {plan.hash()} -> {res / 'plan.json'} "
          f"(patch {plan.patch_size}, pools {plan.num_pool_per_axis}); "
          f"{plan.fold_count} folds -> {res / 'splits.json'}")
    return 0


def cmd_preprocess(args) -> int:
    dataset_root, info, res = _dataset_context(args)
    plan = _plan_with_overrides(res, args)
    fp = planning.load_fingerprint(res / "fingerprint.json")
    cases = codec.load_cases(dataset_root, "train")
    cache_dir = res / "preprocessed" / plan.hash()
    _ensure_preprocessed(cases, plan, fp, info, cache_dir)
    print(f"preprocessed {len(cases)} cases -> {cache_dir}")
    return 0


def cmd_train(args) -> int:
    dataset_root, info, res = _dataset_context(args)
    plan = _plan_with_overrides(res, args)
    fp = planning.load_fingerprint(res / "fingerprint.json")
    cases = codec.load_cases(dataset_root, "train")
    by_id = {c.case_id: c for c in cases}
    cache_dir = res / "preprocessed" / plan.hash()
    _ensure_preprocessed(cases, plan, fp, info, cache_dir)

    splits_path = res / "splits.json"
    if splits_path.exists():
        splits = folds.load_splits(splits_path)
    else:
        splits = folds.split_folds(list(by_id), plan.fold_count, seed=args.seed)
        folds.save_splits(splits_path, splits)

    if args.fold == "all":
        train_ids, val_ids = sorted(by_id), []
    else:
        train_ids, val_ids = folds.fold_partition(splits, int(args.fold))

    train_pcs = [preprocessing.load_preprocessed(cache_dir, cid) for cid in train_ids]
    val_pairs = [(preprocessing.load_preprocessed(cache_dir, cid),
                  by_id[cid].load_landmarks()) for cid in val_ids]

    out_dir = res / plan.hash() / f"fold_{args.fold}"
    state = training.train(plan, train_pcs, out_dir, seed=args.seed,
                           val_cases=val_pairs or None)
    message = (f"trained {state.epochs_run} epochs ({state.steps_run} steps); "
               f"final mean loss {state.epoch_mean_loss[-1]:.6f}")
    if state.validation_mre is not None:
        message += f"; fold MRE {state.validation_mre:.3f} mm"
    print(message + f"; checkpoints in {out_dir}")
    return 0


def cmd_predict(args) -> int:
    dataset_root, info, res = _dataset_context(args)
    if args.model_dir:
        fold_dir = Path(args.model_dir)
    else:
        plan = _plan_with_overrides(res, args)
        fold_dir = res / plan.hash() / f"fold_{args.fold}"
    checkpoint = fold_dir / f"checkpoint_{args.checkpoint}"
    if not checkpoint.exists():
        raise ConfigError(f"no checkpoint at {checkpoint}")
    model, plan, classes = training.load_checkpoint(checkpoint)
    fp = planning.load_fingerprint(res / "fingerprint.json")

    images_dir = Path(args.images) if args.images else dataset_root / "imagesTs"
    image_paths = [p for p in sorted(images_dir.iterdir())
                   if p.is_file() and not p.name.endswith(".hdr")]
    if not image_paths:
        raise ConfigError(f"no images found in {images_dir}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    for path in image_paths:
        case_id = image_stem(path)
        volume = load_volume(path)
        landmarks, heatmap, prepared = predict_case(model, plan, fp, classes,
                                                    volume, case_id)
        codec.write_landmarks(out_dir / f"{case_id}.json", landmarks)
        if args.save_heatmaps:
            for channel, name in zip(heatmap, classes):
                save_volume(out_dir / f"{case_id}_heatmap_{name}.nii.gz",
                            prepared.with_data(channel))
        print(f"predicted {case_id} ({len(landmarks)} landmarks)")
    return 0


def cmd_evaluate(args) -> int:
    thresholds = [float(t) for t in args.thresholds.split(",")]
    biometry = None
    if args.biometry:
        entries = json.loads(Path(args.biometry).read_text())
        biometry = BiometrySpec([tuple(e) for e in entries])
    report = evaluate_directories(args.gt_dir, args.pred_dir, thresholds,
                                  biometry_spec=biometry, voxel_size=args.voxel_size)
    print(reporting.render_tables(report))
    if args.out:
        overlay_paths = None
        if args.overlay_images:
            overlay_paths = _render_case_overlays(args, report)
        reporting.write_report_bundle(report, args.out, overlay_paths)
        print(f"report written to {args.out}")
    return 0


def _render_case_overlays(args, report):
    overlay_paths = []
    images_dir = Path(args.overlay_images)
    for case in report.cases:
        image_path = None
        for candidate in sorted(images_dir.iterdir()):
            if image_stem(candidate) == case.case_id:
                image_path = candidate
                break
        if image_path is None:
            continue
        gt = codec.read_landmarks(Path(args.gt_dir) / f"{case.case_id}.json")
        pred = codec.read_landmarks(Path(args.pred_dir) / f"{case.case_id}.json")
        overlay_paths.extend(
            reporting.render_overlays(load_volume(image_path), gt, pred,
                                      Path(args.out), prefix=case.case_id)
        )
    return overlay_paths


def cmd_convert(args) -> int:
    info = converters.convert_dataset(args.input, args.format, args.out,
                                      dataset_name=args.name, modality=args.modality,
                                      coordinates=args.coordinates)
    print(f"converted dataset {info.name!r} ({len(info.classes)} classes) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="landmark3d",
        description="Self-configuring 3D landmark detection via heatmap regression",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, dataset=True):
        if dataset:
            p.add_argument("--dataset", required=True, help="dataset directory")
        p.add_argument("--results", help="results root (default $NNLM_RESULTS or ./results)")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=40)
    p.add_argument("--shape", default="64", help="edge length or x,y,z")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="report dataset constraint violations")
    add_common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("fingerprint", help="compute the dataset fingerprint")
    add_common(p)
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("plan", help="derive the experiment plan and fold splits")
    add_common(p)
    p.add_argument("--config", help="JSON file with plan overrides")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("preprocess", help="resample/normalize/encode the training cases")
    add_common(p)
    p.add_argument("--config", help="JSON file with plan overrides")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one fold")
    add_common(p)
    p.add_argument("--fold", default="0", help="fold index or 'all'")
    p.add_argument("--config", help="JSON file with plan overrides")
    p.add_argument("--epochs", type=int, help="override plan epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="sliding-window prediction on a directory of images")
    add_common(p)
    p.add_argument("--fold", default="0", help="fold index or 'all'")
    p.add_argument("--config", help="JSON overrides used at training time")
    p.add_argument("--epochs", type=int, help="epochs override used at training time")
    p.add_argument("--model-dir", help="explicit fold directory (overrides --fold)")
    p.add_argument("--checkpoint", choices=("best", "final"), default="final")
    p.add_argument("--images", help="image directory (default <dataset>/imagesTs)")
    p.add_argument("--out", required=True, help="output directory for landmark files")
    p.add_argument("--save-heatmaps", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="compare predictions against ground truth")
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--thresholds", default=DEFAULT_THRESHOLDS)
    p.add_argument("--biometry", help="JSON file: list of [measurement, landmark_a, landmark_b]")
    p.add_argument("--voxel-size", type=float,
                   help="report in voxel units of this size instead of mm")
    p.add_argument("--out", help="write results.json/tables.md/index.md here")
    p.add_argument("--overlay-images", help="image directory for overlay rendering")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("convert", help="convert an external landmark layout")
    p.add_argument("--input", required=True)
    p.add_argument("--format", required=True, choices=sorted(converters.FORMAT_EXTENSIONS))
    p.add_argument("--out", required=True)
    p.add_argument("--name", help="dataset name (default: output directory name)")
    p.add_argument("--modality", choices=("CT", "other"), default="other")
    p.add_argument("--coordinates", choices=("lps", "ras"), default="lps")
    p.set_defaults(func=cmd_convert)

    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


def main(argv=None) -> int:
    try:
        return run(argv)
    except LandmarkError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
