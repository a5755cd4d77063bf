#!/usr/bin/env python3
"""hrsem: synthetic data, style-transfer domain adaptation and downstream segmentation"""
import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.config import PipelineConfig, load_config
from core.da_trainer import DomainAdaptationTrainer, load_checkpoint, stylize_manifest
from core.data_validator import DataValidator
from core.diagnostics import semantic_consistency
from core.errors import DataError, HRSemError, ManifestError
from core.plotting import plot_distributions, plot_loss_curves, write_alignment_csv
from core.raster_io import Manifest, prepare_dataset, read_histogram_csv
from core.seg_eval import (MIX_MODES, evaluate, load_seg_model, prepare_training_set, train_segmentation,
                           write_results_csv)
from core.synth_data import CLASS_NAMES, generate_dataset
from utils.logger import setup_logger

logger = setup_logger('hrsem')


def stage_dir(args, name: str) -> Path:
    return Path(args.out) / name


def require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{what} not found: {path}")
    return path


def attach_log_file(args, command: str) -> None:
    setup_logger('hrsem', log_file=str(Path(args.out) / f'{command}.log'))


def cmd_synth(args, cfg: PipelineConfig) -> int:
    out = stage_dir(args, 'data')
    attach_log_file(args, 'synth')
    manifest = generate_dataset(
        cfg.synth.n_scenes,
        cfg.synth.scene_spec('source', cfg.seed),
        cfg.synth.scene_spec('target', cfg.seed),
        out,
        val_fraction=cfg.synth.val_fraction,
        quiet=args.quiet,
    )
    cfg.save(out / 'config.json')
    logger.info(f"✓ {len(manifest)} tiles written. Next: hrsem prepare --out {args.out}")
    return 0


def cmd_prepare(args, cfg: PipelineConfig) -> int:
    manifest_path = require_file(args.manifest or stage_dir(args, 'data') / 'manifest.csv', 'Raw manifest')
    manifest = Manifest.load(manifest_path)
    manifest.check_paths()
    attach_log_file(args, 'prepare')
    prepare_dataset(manifest, stage_dir(args, 'prepared'), smooth_sigma=cfg.prepare.smooth_sigma,
                    smooth_domains=cfg.prepare.smooth_domains, quiet=args.quiet)
    logger.info(f"✓ Prepared. Next: hrsem train-da --out {args.out}")
    return 0


def cmd_train_da(args, cfg: PipelineConfig) -> int:
    manifest_path = require_file(args.manifest or stage_dir(args, 'prepared') / 'manifest.csv', 'Prepared manifest')
    report = DataValidator(Manifest.load(manifest_path)).validate()
    if not report['valid']:
        for issue in report['issues']:
            logger.warning(issue)
        raise DataError(f"{len(report['issues'])} data issue(s) in {manifest_path}")
    if args.resume:
        require_file(Path(args.resume) / 'checkpoint.json', 'Checkpoint manifest')

    attach_log_file(args, 'train-da')
    trainer = DomainAdaptationTrainer(str(manifest_path), str(stage_dir(args, 'da')), cfg.da, quiet=args.quiet)
    checkpoint = trainer.train(resume_path=args.resume)
    logger.info(f"✓ Domain adaptation complete: {checkpoint}")
    logger.info(f"Next: hrsem stylize --out {args.out}")
    return 0


def _checkpoint(args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    latest = DomainAdaptationTrainer.latest_checkpoint(stage_dir(args, 'da'))
    if latest is None:
        raise ManifestError(f"No checkpoint under {stage_dir(args, 'da')}; pass --checkpoint")
    return latest


def cmd_stylize(args, cfg: PipelineConfig) -> int:
    manifest_path = require_file(args.manifest or stage_dir(args, 'prepared') / 'manifest.csv', 'Prepared manifest')
    state = load_checkpoint(_checkpoint(args), device=cfg.da.device)
    manifest = Manifest.load(manifest_path)
    out = stage_dir(args, 'stylized')

    attach_log_file(args, 'stylize')
    stylized = stylize_manifest(state, manifest, out, quiet=args.quiet)
    sources = [e.load() for e in manifest.select(domain='source').entries]
    consistency = semantic_consistency(sources, [e.load() for e in stylized.entries])
    (out / 'consistency.json').write_text(json.dumps(consistency, indent=2, sort_keys=True))
    logger.info(f"Edge correlation: stylized {consistency['stylized_corr']:.4f}, "
                f"blurred {consistency['blurred_corr']:.4f}")
    logger.info(f"✓ Stylized {len(stylized)} tiles. Next: hrsem train-seg --out {args.out}")
    return 0


def cmd_train_seg(args, cfg: PipelineConfig) -> int:
    mode = args.mode or cfg.seg.mix_mode
    manifest_path = require_file(args.manifest or stage_dir(args, 'prepared') / 'manifest.csv', 'Prepared manifest')
    stylized = None
    if mode != 'source':
        stylized = require_file(Path(args.stylized or stage_dir(args, 'stylized')) / 'manifest.csv',
                                'Stylized manifest')
    training_set = prepare_training_set(Manifest.load(manifest_path), stylized, mix_mode=mode)

    attach_log_file(args, 'train-seg')
    model_path = train_segmentation(training_set, replace(cfg.seg, mix_mode=mode), stage_dir(args, 'seg') / mode,
                                    quiet=args.quiet)
    logger.info(f"✓ Segmentation model ({mode}): {model_path}")
    return 0


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    manifest_path = require_file(args.manifest or stage_dir(args, 'prepared') / 'manifest.csv', 'Prepared manifest')
    checkpoint = require_file(args.checkpoint or stage_dir(args, 'seg') / 'mixed' / 'model.pt', 'Segmentation model')
    models = {'adapted': load_seg_model(checkpoint, device=cfg.seg.device)}
    if args.baseline_checkpoint:
        baseline = require_file(args.baseline_checkpoint, 'Baseline segmentation model')
        models['baseline'] = load_seg_model(baseline, device=cfg.seg.device)
    manifest = Manifest.load(manifest_path)

    attach_log_file(args, 'evaluate')
    rows = {}
    for name, model in models.items():
        rows[name] = evaluate(model, manifest, quiet=args.quiet)
        result = rows[name]
        logger.info(f"{name}: mIoU {100 * result.miou:.2f}, pixel accuracy {100 * result.pixel_accuracy:.2f}")
        per_class = ", ".join(f"{c} {100 * a:.2f}" for c, a in zip(CLASS_NAMES, result.class_accuracy))
        logger.info(f"{name}: class accuracy {per_class}")
    results = stage_dir(args, 'results') / 'results.csv'
    write_results_csv(rows, results)
    logger.info(f"✓ Results: {results}")
    return 0


def cmd_plot(args, cfg: PipelineConfig) -> int:
    prepared, stylized_dir = stage_dir(args, 'prepared'), stage_dir(args, 'stylized')
    source = read_histogram_csv(require_file(args.source_hist or prepared / 'histogram_source.csv', 'Source histogram'))
    target = read_histogram_csv(require_file(args.target_hist or prepared / 'histogram_target.csv', 'Target histogram'))
    stylized = read_histogram_csv(require_file(args.stylized_hist or stylized_dir / 'histogram.csv',
                                               'Stylized histogram'))
    raw_target = Path(args.raw_target_hist or prepared / 'histogram_target_raw.csv')
    loss_log = Path(args.loss_log or stage_dir(args, 'da') / 'loss_log.csv')

    out = stage_dir(args, 'plots')
    attach_log_file(args, 'plot')
    plot_distributions({'source': source, 'target': target, 'stylized source': stylized},
                       out / 'distributions.png', title='Source, target and stylized source')
    ratio = write_alignment_csv(source, target, stylized, out / 'alignment.csv')
    logger.info(f"Alignment ratio per band: {', '.join(f'{r:.3f}' for r in ratio)}")
    if raw_target.is_file():
        plot_distributions({'original': read_histogram_csv(raw_target), 'smoothed': target},
                           out / 'target_smoothing.png', title='Target before and after smoothing')
    if loss_log.is_file():
        plot_loss_curves(loss_log, out / 'losses.png')
    logger.info(f"✓ Plots in {out}")
    return 0


COMMANDS = {
    'synth': cmd_synth,
    'prepare': cmd_prepare,
    'train-da': cmd_train_da,
    'stylize': cmd_stylize,
    'train-seg': cmd_train_seg,
    'evaluate': cmd_evaluate,
    'plot': cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None, help='Pipeline config JSON (default: built-in defaults)')
    common.add_argument('--seed', type=int, default=None)
    common.add_argument('--out', default='./hrsem_run', help='Output root holding every stage directory')
    common.add_argument('--quiet', action='store_true')

    parser = argparse.ArgumentParser(prog='hrsem', description='Semantically consistent style-transfer domain adaptation')
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('synth', parents=[common], help='Generate the synthetic two-domain dataset')

    p = sub.add_parser('prepare', parents=[common], help='Smooth and normalize tiles')
    p.add_argument('--manifest')

    p = sub.add_parser('train-da', parents=[common], help='Train the domain-adaptation networks')
    p.add_argument('--manifest')
    p.add_argument('--resume', help='Checkpoint directory to continue from')

    p = sub.add_parser('stylize', parents=[common], help='Translate every source tile to the target style')
    p.add_argument('--manifest')
    p.add_argument('--checkpoint', help='Checkpoint directory (default: latest under <out>/da)')

    p = sub.add_parser('train-seg', parents=[common], help='Train the downstream segmentation model')
    p.add_argument('--manifest')
    p.add_argument('--stylized', help='Stylized stage directory')
    p.add_argument('--mode', choices=MIX_MODES, default=None, help='source = no-adaptation baseline')

    p = sub.add_parser('evaluate', parents=[common], help='Per-class IoU and mIoU on the target domain')
    p.add_argument('--manifest')
    p.add_argument('--checkpoint', help='Segmentation model.pt (default: <out>/seg/mixed/model.pt)')
    p.add_argument('--baseline-checkpoint')

    p = sub.add_parser('plot', parents=[common], help='Distribution figures, loss curves and alignment table')
    p.add_argument('--source-hist')
    p.add_argument('--target-hist')
    p.add_argument('--stylized-hist')
    p.add_argument('--raw-target-hist')
    p.add_argument('--loss-log')
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed)
        return COMMANDS[args.command](args, cfg)
    except HRSemError as e:
        logger.error(f"Error: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Error: {e}", exc_info=True)
        return 1


if __name__ == '__main__':
    sys.exit(main())
