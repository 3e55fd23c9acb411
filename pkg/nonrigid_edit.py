"""Identity-preserving non-rigid person edits: dataset, captions, training, editing, evaluation.

Every subcommand reads the run config (defaults < --config file < flags),
records the config and seed next to what it writes, and leaves a JSON run
log under LOG_DIR.

Exit codes:
    0  success
    1  usage or configuration error
    2  unreadable, missing or invalid inputs (frames, poses, manifest, checkpoint,
       images, an existing report)
    3  captioner unreachable and --stub not given
    4  non-finite training loss
    5  conditioning modality does not match the checkpoint variant
    6  malformed ratings CSV
    7  a metric could not be computed (feature dimensions differ or a covariance
       is not positive semi-definite)

Every exit writes a run log, usage errors included. Without a loaded config
it goes to --log-dir, or the default LOG_DIR.
"""
import argparse
import json
import os
import sys
import time

import numpy as np
import torch
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from captioning import (
    CaptionerUnavailable,
    HttpCaptionClient,
    StubCaptionClient,
    attach_captions,
    caption_manifest,
    default_fewshot_examples,
    load_prompt_template,
    write_caption_records,
)
from conditioning import ModalityMismatch, Variant
from dataset_pipeline import (
    FRAME_EXTENSIONS,
    SPLITS,
    STATS_COLUMNS,
    VAL_SPLIT,
    DatasetInputError,
    ManifestError,
    PipelineConfig,
    build_dataset,
    manifest_stats,
    read_image,
    read_manifest,
    stats_table_rows,
    write_manifest,
)
from diffusion_core import (
    CheckpointError,
    NonFiniteLoss,
    load_checkpoint,
    rescale_pose,
    resize_image,
    restore_models,
    sample_edit,
    train,
)
from evaluation import (
    RATINGS_TABLE_COLUMNS,
    DimensionMismatch,
    EmptyInput,
    NumericalFailure,
    RandomProjectionFeatures,
    RatingsFormatError,
    ReportFormatError,
    aggregate_ratings,
    build_metric_report,
    fid,
    pckh_over_set,
    pose_overlay,
    ratings_table_rows,
    read_ratings_csv,
    update_metric_report,
)
from pose_geometry import InvalidPose, PoseSkeleton, read_pose_jsonl
from run_config import DEFAULT_CONFIG_PATH, ConfigError, RunConfig, load_run_config, write_run_config
from utils.run_log import write_run_log
from utils.terminal_colors import (
    Colors,
    colorize,
    print_error,
    print_header,
    print_info,
    print_success,
    print_table,
    print_warning,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_CAPTIONER = 3
EXIT_NON_FINITE = 4
EXIT_MODALITY = 5
EXIT_RATINGS = 6
EXIT_METRIC = 7


class UsageError(Exception):
    pass


class CommandParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to exit code 1"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_bbox(text):
    try:
        x0, y0, x1, y1 = (int(v) for v in text.split(','))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x0,y0,x1,y1 integers, got {text!r}")
    if x1 <= x0 or y1 <= y0:
        raise argparse.ArgumentTypeError(f"mask box {text} has zero area")
    return (x0, y0, x1, y1)


def parse_ratings(text):
    """LABEL=PATH, or a bare PATH for subset 'all'"""
    label, separator, path = text.partition('=')
    if not separator:
        return ('all', text)
    if not label or not path:
        raise argparse.ArgumentTypeError(f"expected LABEL=PATH or PATH, got {text!r}")
    return (label, path)


def display_usage_samples():
    """Display sample usage of the script with various parameters"""
    print_header("\n=== Sample Usage ===")
    print_info("Build the pair dataset from frames and pose files:")
    print("  python nonrigid_edit.py dataset build --frames data/frames --poses data/poses")

    print_info("\nShow dataset statistics:")
    print("  python nonrigid_edit.py dataset stats --manifest data/manifest/manifest.jsonl")

    print_info("\nCaption every pair offline with the stub captioner:")
    print("  python nonrigid_edit.py caption --stub")

    print_info("\nCaption only pairs without a caption, using the live captioner from .env:")
    print("  python nonrigid_edit.py caption --no-overwrite")

    print_info("\nTrain the pose+text variant for 200 epochs:")
    print("  python nonrigid_edit.py train --variant c4 --epochs 200 --seed 0")

    print_info("\nEdit a scene with a trained checkpoint:")
    print("  python nonrigid_edit.py edit --checkpoint checkpoints/final.pt --scene scene.png "
          "--reference person.png --mask-bbox 10,4,40,60 --caption \"She raises her right arm.\" "
          "--target-pose pose.json --output edit.png --overlay")

    print_info("\nEvaluate generated images against references, with poses and ratings:")
    print("  python nonrigid_edit.py eval --generated out/ --reference ref/ --variant c4 --split val "
          "--predicted-poses pred.jsonl --gt-poses gt.jsonl "
          "--ratings non_object=ratings_a.csv --ratings object=ratings_b.csv")
    print()


def build_parser():
    common = CommandParser(add_help=False)
    common.add_argument('--config', type=str, help=f'Run config file (default: {DEFAULT_CONFIG_PATH} if present)')
    common.add_argument('--seed', type=int, help='Random seed recorded in every output')
    common.add_argument('--log-dir', dest='log_dir', type=str, help='Directory for JSON run logs')

    parser = CommandParser(description='Identity-preserving non-rigid person editing pipeline')
    parser.add_argument('--show_examples', action='store_true', help='Show usage examples and exit')
    commands = parser.add_subparsers(dest='command')

    dataset = commands.add_parser('dataset', help='Build or inspect the frame-pair dataset')
    dataset_commands = dataset.add_subparsers(dest='dataset_command')
    build = dataset_commands.add_parser('build', parents=[common], help='Curate frame pairs and write the manifest')
    build.add_argument('--frames', dest='frames_dir', type=str, help='Frames directory, one folder per video')
    build.add_argument('--poses', dest='poses_dir', type=str, help='Pose directory, one <video>.jsonl per video')
    build.add_argument('--manifest', dest='manifest_path', type=str, help='Manifest file to write')
    build.add_argument('--jobs', type=int, help='Videos processed in parallel')
    stats = dataset_commands.add_parser('stats', parents=[common], help='Print manifest statistics')
    stats.add_argument('--manifest', dest='manifest_path', type=str, help='Manifest file to read')
    stats.add_argument('--name', type=str, default='dataset', help='Dataset name in the table')

    caption = commands.add_parser('caption', parents=[common], help='Caption the scene difference of every pair')
    caption.add_argument('--manifest', dest='manifest_path', type=str, help='Manifest file to update')
    caption.add_argument('--stub', action='store_true', help='Use the offline deterministic captioner')
    caption.add_argument('--no-overwrite', dest='no_overwrite', action='store_true',
                         help='Keep captions that are already present')

    train_parser = commands.add_parser('train', parents=[common], help='Train the inpainting denoiser')
    train_parser.add_argument('--manifest', dest='manifest_path', type=str, help='Manifest file to train on')
    train_parser.add_argument('--variant', type=str, choices=[v.value for v in Variant],
                              help='Conditioning variant')
    train_parser.add_argument('--epochs', type=int, help='Training epochs')
    train_parser.add_argument('--checkpoint-dir', dest='checkpoint_dir', type=str, help='Checkpoint directory')

    edit = commands.add_parser('edit', parents=[common], help='Insert the reference person into a scene')
    edit.add_argument('--checkpoint', type=str, required=True, help='Trained checkpoint')
    edit.add_argument('--scene', type=str, required=True, help='Scene image to edit')
    edit.add_argument('--reference', type=str, required=True, help='Reference image of the person')
    edit.add_argument('--mask-bbox', dest='mask_bbox', type=parse_bbox, required=True,
                      help='Region to fill, x0,y0,x1,y1 (half-open, scene pixels)')
    edit.add_argument('--caption', type=str, help='Scene-difference caption (text variants only)')
    edit.add_argument('--target-pose', dest='target_pose', type=str,
                      help='JSON file with 17 [x, y, confidence] rows in scene pixels (pose variants only)')
    edit.add_argument('--reference-pose', dest='reference_pose', type=str,
                      help='Reference pose JSON in scene pixels, needed when the checkpoint combines both poses')
    edit.add_argument('--variant', type=str, choices=[v.value for v in Variant],
                      help='Expected checkpoint variant; a different one is an error')
    edit.add_argument('--guidance', type=float, help='Classifier-free guidance weight')
    edit.add_argument('--steps', type=int, help='Sampling steps (<= timesteps)')
    edit.add_argument('--output', type=str, default='edit.png', help='Output PNG')
    edit.add_argument('--overlay', action='store_true', help='Also write the target pose drawn over the output')

    evaluate = commands.add_parser('eval', parents=[common], help='FID, PCKh and rating aggregation')
    evaluate.add_argument('--generated', dest='generated_dir', type=str, required=True,
                          help='Generated images directory')
    evaluate.add_argument('--reference', dest='reference_dir', type=str, required=True,
                          help='Reference images directory, matched by file name')
    evaluate.add_argument('--predicted-poses', dest='predicted_poses', type=str,
                          help='Pose JSONL detected on the generated images')
    evaluate.add_argument('--gt-poses', dest='gt_poses', type=str, help='Ground-truth pose JSONL')
    evaluate.add_argument('--ratings', type=parse_ratings, action='append',
                          help='Ratings CSV (scene_id,config,question,rater_id,score) as LABEL=PATH or PATH; '
                               'repeat for each rated subset')
    evaluate.add_argument('--variant', type=str, choices=[v.value for v in Variant],
                          help='Variant the generated set came from')
    evaluate.add_argument('--split', type=str, choices=SPLITS, default=VAL_SPLIT,
                          help='Manifest split the generated set came from')
    evaluate.add_argument('--output', type=str, help='Report path (default: <REPORTS_DIR>/metrics.json)')
    return parser


def resolve_config(args):
    path = args.config
    if path is None and os.path.isfile(DEFAULT_CONFIG_PATH):
        path = DEFAULT_CONFIG_PATH
    overrides = {name: getattr(args, name, None) for name in (
        'seed', 'log_dir', 'frames_dir', 'poses_dir', 'manifest_path', 'jobs', 'variant', 'epochs',
        'checkpoint_dir')}
    overrides['guidance_weight'] = getattr(args, 'guidance', None)
    overrides['sample_steps'] = getattr(args, 'steps', None)
    return load_run_config(path, **overrides)


def sidecar_path(artifact_path):
    return f"{artifact_path}.run.env"


# --- subcommands -------------------------------------------------------------------

def cmd_dataset_build(args, config):
    print_header("\n=== Dataset Build ===")
    records = build_dataset(config.frames_dir, config.poses_dir, config.manifest_path,
                            PipelineConfig.from_run_config(config), config.jobs)
    write_run_config(sidecar_path(config.manifest_path), config)
    stats = manifest_stats(records)
    print_table(STATS_COLUMNS, stats_table_rows(
        records, os.path.basename(os.path.normpath(config.frames_dir)) or 'dataset'))
    print_success(f"Manifest written to {config.manifest_path} ({len(records)} pairs)")
    return EXIT_OK, {"Pairs": len(records), "Videos": stats.videos, "Manifest": config.manifest_path,
                     "Splits": _split_counts(records)}


def _split_counts(records):
    return {split: sum(1 for r in records if r.split == split) for split in SPLITS}


def cmd_dataset_stats(args, config):
    records = read_manifest(config.manifest_path)
    stats = manifest_stats(records)
    print_table(STATS_COLUMNS, stats_table_rows(records, args.name))
    return EXIT_OK, {"Pairs": stats.pairs, "Captions": stats.captions, "Splits": _split_counts(records)}


def cmd_caption(args, config):
    print_header("\n=== Captioning ===")
    records = read_manifest(config.manifest_path)
    if args.stub:
        client = StubCaptionClient()
    else:
        client = HttpCaptionClient.from_env(config.caption_timeout, config.log_dir)
    print_info(f"Captioner: {client.captioner_id}")

    caption_records, failures = caption_manifest(
        records, config.manifest_path, client,
        prompt_template=load_prompt_template(config.caption_prompt_path),
        fewshot_examples=default_fewshot_examples(config.fewshot_count),
        retries=config.caption_retries, backoff=config.caption_backoff,
        max_in_flight=config.caption_max_in_flight, overwrite=not args.no_overwrite)

    write_manifest(config.manifest_path, attach_captions(records, caption_records))
    write_caption_records(os.path.join(os.path.dirname(os.path.abspath(config.manifest_path)), 'captions.jsonl'),
                          caption_records)
    write_run_config(sidecar_path(config.manifest_path), config)
    summary = {"Captioned": len(caption_records), "Failures": [{"pair_id": p, "error": e} for p, e in failures]}
    if failures and not caption_records and not args.stub:
        print_error(f"Captioner unreachable: all {len(failures)} requests failed")
        return EXIT_CAPTIONER, summary
    if failures:
        print_warning(f"{len(failures)} pairs could not be captioned; see the run log")
    print_success(f"Captioned {len(caption_records)} pairs")
    return EXIT_OK, summary


def cmd_train(args, config):
    print_header("\n=== Training ===")
    checkpoint = train(config, config.manifest_path, config.epochs, config.checkpoint_dir)
    return EXIT_OK, {"Epochs": checkpoint.epoch, "Checkpoint Dir": config.checkpoint_dir}


def _read_pose_json(path) -> PoseSkeleton:
    try:
        with open(path, 'r', encoding='utf-8') as pose_file:
            data = json.load(pose_file)
    except json.JSONDecodeError as e:
        raise InvalidPose(f"{path}: {e}") from e
    if isinstance(data, dict):
        data = data.get('keypoints')
    return PoseSkeleton.from_array(data)


def cmd_edit(args, config):
    print_header("\n=== Edit ===")
    checkpoint = load_checkpoint(args.checkpoint)
    model_config, encoder, denoiser, schedule = restore_models(checkpoint)
    variant = encoder.variant
    if args.variant and Variant.parse(args.variant) != variant:
        raise ModalityMismatch(f"checkpoint variant is {variant.value}, not {args.variant}")
    if args.caption and not variant.uses_text:
        raise ModalityMismatch(f"variant {variant.value} ({variant.label}) takes no caption")
    if args.target_pose and not variant.uses_pose:
        raise ModalityMismatch(f"variant {variant.value} ({variant.label}) takes no target pose")
    if variant.uses_pose and not args.target_pose:
        raise ModalityMismatch(f"variant {variant.value} ({variant.label}) needs --target-pose")
    if encoder.combine_reference_pose and not args.reference_pose:
        raise ModalityMismatch("this checkpoint combines target and reference poses; pass --reference-pose")

    scene = read_image(args.scene)
    reference = read_image(args.reference)
    height, width = scene.shape[:2]
    x0, y0, x1, y1 = args.mask_bbox
    x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, width), min(y1, height)
    if x1 <= x0 or y1 <= y0:
        raise UsageError(f"mask box {args.mask_bbox} lies outside the {width}x{height} scene")

    size = model_config.image_size
    scale_x, scale_y = size / width, size / height
    target_pose = _read_pose_json(args.target_pose) if args.target_pose else None
    reference_pose = _read_pose_json(args.reference_pose) if args.reference_pose else None
    if target_pose is not None:
        target_pose_model = rescale_pose(target_pose, scale_x, scale_y)
        reference_pose_model = rescale_pose(reference_pose, scale_x, scale_y) if reference_pose else None
    else:
        target_pose_model = reference_pose_model = None

    with torch.no_grad():
        bundle = encoder.bundle_for(reference, args.caption if variant.uses_text else None,
                                    target_pose_model, reference_pose_model)

    full_mask = np.zeros((height, width), dtype=np.uint8)
    full_mask[y0:y1, x0:x1] = 1
    small_scene = resize_image(scene, size)
    small_mask = np.asarray(Image.fromarray(full_mask * 255).resize((size, size), Image.NEAREST)) > 0
    if not small_mask.any():
        small_mask[min(int((y0 + y1) / 2 * scale_y), size - 1), min(int((x0 + x1) / 2 * scale_x), size - 1)] = True
    small_masked = np.where(small_mask[..., None], np.uint8(model_config.fill_value), small_scene)

    generator = torch.Generator().manual_seed(config.seed)
    generated = sample_edit(denoiser, small_masked, small_mask.astype(np.uint8), bundle, schedule,
                            config.guidance_weight, generator, min(config.sample_steps, schedule.T))
    generated_full = generated
    if generated.shape[:2] != (height, width):
        generated_full = np.asarray(Image.fromarray(generated).resize((width, height), Image.BILINEAR))
    output = np.where(full_mask[..., None] != 0, generated_full, scene).astype(np.uint8)

    info = PngInfo()
    info.add_text('seed', str(config.seed))
    info.add_text('variant', variant.value)
    info.add_text('guidance_weight', str(config.guidance_weight))
    info.add_text('sample_steps', str(min(config.sample_steps, schedule.T)))
    out_dir = os.path.dirname(os.path.abspath(args.output))
    os.makedirs(out_dir, exist_ok=True)
    Image.fromarray(output).save(args.output, format='PNG', pnginfo=info)
    print_success(f"Edit written to {args.output}")

    summary = {"Output": args.output, "Variant": variant.value}
    if args.overlay:
        if target_pose is None:
            print_warning("--overlay needs a target pose; no overlay written")
        else:
            overlay_path = f"{os.path.splitext(args.output)[0]}_overlay.png"
            Image.fromarray(pose_overlay(output, target_pose)).save(overlay_path, format='PNG', pnginfo=info)
            print_success(f"Pose overlay written to {overlay_path}")
            summary["Overlay"] = overlay_path
    return EXIT_OK, summary


def _image_files(directory):
    if not os.path.isdir(directory):
        raise DatasetInputError(f"image directory not found: {directory}")
    return {name: os.path.join(directory, name) for name in sorted(os.listdir(directory))
            if os.path.splitext(name)[1].lower() in FRAME_EXTENSIONS}


def _first_detections(path):
    return {frame: poses[0] for frame, poses in read_pose_jsonl(path).items() if poses}


def cmd_eval(args, config):
    print_header("\n=== Evaluation ===")
    generated = _image_files(args.generated_dir)
    reference = _image_files(args.reference_dir)
    names = sorted(set(generated) & set(reference))
    unmatched = sorted(set(generated) ^ set(reference))
    if unmatched:
        print_warning(f"{len(unmatched)} images have no counterpart and are ignored, first: {unmatched[0]}")

    fid_value = None
    if len(names) >= 2:
        extractor = RandomProjectionFeatures(config.fid_feature_dim, seed=config.seed)
        fid_value = fid(extractor(read_image(generated[n]) for n in names),
                        extractor(read_image(reference[n]) for n in names))
        print_info(f"FID: {fid_value:.4f} over {len(names)} image pairs")
    else:
        print_warning(f"FID needs at least 2 matched images, found {len(names)}; FID omitted")

    pckh_result = None
    pose_files = [args.predicted_poses, args.gt_poses]
    if all(p and os.path.isfile(p) for p in pose_files):
        predicted, truth = _first_detections(args.predicted_poses), _first_detections(args.gt_poses)
        frames = sorted(set(predicted) & set(truth))
        try:
            pckh_result = pckh_over_set([predicted[f] for f in frames], [truth[f] for f in frames],
                                        config.pckh_alpha, config.visibility_threshold)
            print_info(f"PCKh@{config.pckh_alpha}: {pckh_result.score:.4f} "
                       f"({pckh_result.evaluated} evaluated, {pckh_result.skipped} skipped)")
        except EmptyInput as e:
            print_warning(f"PCKh omitted: {e}")
    else:
        print_warning("Pose files missing; PCKh omitted")

    ratings = {}
    for label, path in args.ratings or []:
        if label in ratings:
            raise UsageError(f"ratings subset {label!r} given more than once")
        ratings[label] = aggregate_ratings(read_ratings_csv(path))
    for label, percentages in ratings.items():
        print_header(f"\n=== Rater Study: {label} ===")
        print_table(RATINGS_TABLE_COLUMNS, ratings_table_rows(percentages))

    output = args.output or os.path.join(config.reports_dir, 'metrics.json')
    update_metric_report(output, build_metric_report(config.seed, config.variant, fid_value, pckh_result,
                                                     ratings, len(names), args.split))
    write_run_config(sidecar_path(output), config)
    print_success(f"Report for {config.variant}/{args.split} written to {output}")
    return EXIT_OK, {"Report": output, "Split": args.split, "FID": fid_value}


HANDLERS = {
    ('dataset', 'build'): cmd_dataset_build,
    ('dataset', 'stats'): cmd_dataset_stats,
    ('caption', None): cmd_caption,
    ('train', None): cmd_train,
    ('edit', None): cmd_edit,
    ('eval', None): cmd_eval,
}


def fallback_log_dir(argv):
    """LOG_DIR when no config was loaded: --log-dir if it parses, else the default."""
    pre = CommandParser(add_help=False)
    pre.add_argument('--log-dir', dest='log_dir', type=str)
    try:
        known, _ = pre.parse_known_args(argv)
    except UsageError:
        return RunConfig.log_dir
    return known.log_dir or RunConfig.log_dir


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = config = None
    key = (None, None)
    started = time.time()
    try:
        args = parser.parse_args(argv)
        key = (args.command, getattr(args, 'dataset_command', None))
        if args.show_examples:
            display_usage_samples()
            code, summary = EXIT_OK, {}
        elif key not in HANDLERS:
            parser.print_help()
            code, summary = EXIT_USAGE, {"Error": "no command given"}
        else:
            config = resolve_config(args)
            torch.manual_seed(config.seed)
            code, summary = HANDLERS[key](args, config)
    except (UsageError, ConfigError) as e:
        code, summary = EXIT_USAGE, {"Error": str(e)}
    except CaptionerUnavailable as e:
        code, summary = EXIT_CAPTIONER, {"Error": str(e)}
    except NonFiniteLoss as e:
        code, summary = EXIT_NON_FINITE, {"Error": str(e), "Batch Index": e.batch_index}
    except ModalityMismatch as e:
        code, summary = EXIT_MODALITY, {"Error": str(e)}
    except RatingsFormatError as e:
        code, summary = EXIT_RATINGS, {"Error": str(e)}
    except (NumericalFailure, DimensionMismatch) as e:
        code, summary = EXIT_METRIC, {"Error": str(e)}
    except (DatasetInputError, ManifestError, CheckpointError, InvalidPose, ReportFormatError, OSError,
            ValueError) as e:
        code, summary = EXIT_INPUT, {"Error": str(e)}
    summary["Elapsed Seconds"] = round(time.time() - started, 3)

    if "Error" in summary:
        print_error(summary["Error"])
    write_run_log(config.log_dir if config else fallback_log_dir(argv), 'nonrigid_edit.py', {
        "Command": ' '.join(part for part in key if part),
        "Arguments": {k: v for k, v in vars(args).items() if k != 'show_examples'} if args else argv,
        "Run Config": config.to_env() if config else None,
    }, {"Exit Code": code, **summary}, prefix=key[0] or 'nonrigid_edit')
    if code != EXIT_OK:
        print(colorize(f"Exit code {code}", Colors.FAIL))
    return code


if __name__ == '__main__':
    sys.exit(main())
