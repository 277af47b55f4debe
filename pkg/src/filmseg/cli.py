"""Command line interface for filmseg."""

import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import click
from tabulate import tabulate

from filmseg import FilmSegError, __version__
from filmseg.config import ConfigError, load_config, write_default_config
from filmseg.evaluation import (IN_DOMAIN, OUT_OF_DOMAIN, compare_placements, evaluate_model, format_mean_sd,
                                summary_rows, write_comparison_csv, write_report_csv)
from filmseg.gradcheck import DEFAULT_TOLERANCE, registered_checks, run_suite
from filmseg.phantom import generate_dataset, save_study
from filmseg.pipeline import SPLITS, read_manifest, split_cases, write_manifest
from filmseg.train import train as train_model
from filmseg.unet import Placement

PLACEMENT_NAMES = [p.value for p in Placement]


class ClickEchoHandler(logging.Handler):
    """Route library log records to stderr through click."""

    def emit(self, record):
        try:
            click.echo(self.format(record), err=True)
        except Exception:
            self.handleError(record)


def _configure_logging(verbose: bool) -> None:
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, ClickEchoHandler):
            root.removeHandler(handler)
    handler = ClickEchoHandler()
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _progress() -> bool:
    return sys.stderr.isatty()


config_option = click.option('--config', '-c', 'config_path', type=click.Path(exists=True, dir_okay=False),
                             help='Experiment configuration (YAML or JSON; defaults apply when omitted)')
seed_option = click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), help='Override the configured seed')
out_option = click.option('--out', '-o', type=click.Path(file_okay=False), help='Output directory')
threads_option = click.option('--threads', type=click.IntRange(1), envvar='FILMSEG_THREADS',
                              help='Worker threads (default: FILMSEG_THREADS or the configured value)')


def _manifest(path):
    if not os.path.exists(path):
        raise ConfigError(f"Dataset manifest not found: {path}. Run 'filmseg generate' first")
    return read_manifest(path)


@click.group()
@click.version_option(__version__, prog_name='filmseg')
@click.option('--verbose', '-v', is_flag=True, help='Log debug messages')
def cli(verbose):
    """FiLM segmentation - Time-conditioned tumor segmentation of DCE-MRI studies.

    This tool generates synthetic DCE-MRI phantom datasets, trains 3D U-Nets
    whose feature maps are modulated by the acquisition times of their input
    phases, and compares FiLM placements on segmentation metrics.
    """
    _configure_logging(verbose)


@cli.command('init-config')
@click.argument('path', type=click.Path(dir_okay=False))
@click.option('--force/--no-force', default=False, help='Overwrite an existing file')
def init_config(path, force):
    """Write the default experiment configuration to PATH.

    Examples:
        filmseg init-config experiment.yaml
    """
    if os.path.exists(path) and not force:
        click.echo(f"Config error: {path} already exists (use --force to overwrite)", err=True)
        raise click.Abort()
    write_default_config(path)
    click.echo(f"Default configuration written to {path}")


@cli.command()
@config_option
@seed_option
@out_option
@threads_option
@click.option('--count', '-n', type=click.IntRange(1), help='Number of studies (overrides the config)')
@click.option('--estimated-step', type=click.FloatRange(0, min_open=True),
              help='Record times as 0, STEP, 2*STEP, ... s (out-of-domain test cohort)')
def generate(config_path, seed, out, threads, count, estimated_step):
    """Generate a phantom DCE-MRI dataset with a train/val/test manifest.

    Each study gets its own acquisition schedule, lesion geometry and
    kinetic jitter. Cases are split by the configured ratios. A dataset
    whose times are estimated (--estimated-step or
    dataset.schedule.estimated_step) is an external test cohort: every
    case is tagged test.

    Examples:
        filmseg generate --config experiment.yaml
        filmseg generate --count 5 --out data --seed 3
        filmseg generate -c experiment.yaml --estimated-step 90 --out ood --seed 100
    """
    try:
        config = load_config(config_path)
        dataset = config.dataset
        if seed is not None:
            dataset.seed = seed
        if count is not None:
            dataset.count = count
        if estimated_step is not None:
            dataset.schedule.estimated_step = estimated_step
        directory = os.path.abspath(out) if out else dataset.directory
        workers = threads or config.threads

        click.echo(f"Generating {dataset.count} studies into {directory}")
        studies = generate_dataset(dataset.phantom, dataset.count, dataset.schedule,
                                   seed=dataset.seed, workers=workers)
        for study in studies:
            save_study(study, directory)
        if dataset.schedule.estimated_step:
            cases = {s.case_id: "test" for s in studies}
        else:
            cases = split_cases([s.case_id for s in studies], dataset.split_ratios, seed=dataset.seed)
        manifest_path = write_manifest(directory, cases)

        headers = ["Split", "Cases", "Phases", "Second post-contrast (s)"]
        table_data = []
        for split in SPLITS:
            members = [s for s in studies if cases[s.case_id] == split]
            if not members:
                table_data.append([split, 0, "-", "-"])
                continue
            phases = [s.num_phases for s in members]
            second = [s.times[2] for s in members]
            table_data.append([split, len(members), f"{min(phases)}-{max(phases)}",
                               f"{min(second):.0f}-{max(second):.0f}"])
        click.echo(tabulate(table_data, headers=headers, tablefmt="grid"))
        click.echo(f"\nManifest: {manifest_path}")

    except FilmSegError as e:
        click.echo(f"Generate error: {str(e)}", err=True)
        raise click.Abort()
    except OSError as e:
        click.echo(f"I/O error: {str(e)}", err=True)
        raise click.Abort()


@cli.command()
@config_option
@click.option('--placement', '-p', type=click.Choice(PLACEMENT_NAMES, case_sensitive=False), default='none',
              show_default=True, help='Where FiLM layers are inserted')
@seed_option
@out_option
@threads_option
@click.option('--fold', type=click.IntRange(0), default=None,
              help='Cross-validation fold of the train+val cases (training.folds, at least 2)')
def train(config_path, placement, seed, out, threads, fold):
    """Train one model for the given FiLM placement.

    Writes the best and last checkpoints and history.csv under
    <out>/<placement>_seed<seed> (with a _fold<k> suffix in cross-validation).

    Examples:
        filmseg train --config experiment.yaml --placement all
        filmseg train -c experiment.yaml -p none --seed 1 --out runs
        filmseg train -c experiment.yaml -p all --fold 1
    """
    try:
        config = load_config(config_path).with_overrides(seed=seed, output_dir=out, threads=threads)
        manifest = _manifest(config.manifest_path)
        architecture = replace(config.architecture, placement=Placement.parse(placement))
        training = config.training
        if fold is not None:
            training = replace(training, fold=fold, folds=training.folds or 2)
        run_name = f"{architecture.placement.value}_seed{config.seed}"
        if training.folds:
            run_name += f"_fold{training.fold}"
        run_dir = os.path.join(config.output_dir, run_name)

        click.echo(f"Training placement '{architecture.placement.value}' (seed {config.seed})")
        checkpoint, history = train_model(manifest, architecture, training, run_dir,
                                          progress=_progress())

        headers = ["Epoch", "Train loss", "Val Dice", "LR"]
        table_data = [[r.epoch, f"{r.train_loss:.4f}", f"{r.val_dice:.4f}", f"{r.lr:.6f}"]
                      for r in history.records]
        click.echo(tabulate(table_data, headers=headers, tablefmt="grid"))
        click.echo(f"\nTraining completed successfully!")
        best = history.best()
        click.echo(f"Best checkpoint: {checkpoint.path} (epoch {best.epoch}, val Dice {best.val_dice:.4f})")

    except FilmSegError as e:
        click.echo(f"Train error: {str(e)}", err=True)
        raise click.Abort()
    except Exception as e:
        click.echo(f"Unexpected error: {str(e)}", err=True)
        raise click.Abort()


@cli.command()
@config_option
@click.option('--checkpoint', '-k', 'checkpoint_path', type=click.Path(exists=True, dir_okay=False),
              required=True, help='Checkpoint to evaluate')
@click.option('--split', type=click.Choice(SPLITS), default=None, help='Manifest split (default: configured)')
@click.option('--triplet-index', type=click.IntRange(0), default=None,
              help='Later phase used as third channel (0 = second post-contrast)')
@out_option
def evaluate(config_path, checkpoint_path, split, triplet_index, out):
    """Evaluate a checkpoint on a manifest split.

    Writes a per-case report CSV (Dice, HD95) with a summary block.

    Examples:
        filmseg evaluate -c experiment.yaml -k runs/all_seed0/checkpoint_best.fseg
    """
    try:
        config = load_config(config_path).with_overrides(output_dir=out)
        evaluation = config.evaluation
        manifest = _manifest(config.manifest_path)
        split = split or evaluation.split
        report = evaluate_model(checkpoint_path, manifest, split=split,
                                patch_size=evaluation.patch_size or config.training.patch_size,
                                overlap=evaluation.overlap,
                                triplet_index=evaluation.triplet_index if triplet_index is None else triplet_index,
                                progress=_progress())

        headers = ["Case", "Dice", "HD95 (mm)"]
        table_data = [[c.case_id, f"{c.dice:.4f}", "undefined" if c.hd95_mm is None else f"{c.hd95_mm:.2f}"]
                      for c in report.per_case]
        click.echo(tabulate(table_data, headers=headers, tablefmt="grid"))
        click.echo(tabulate(summary_rows(report), headers=["Metric", "Value"], tablefmt="grid"))

        os.makedirs(config.output_dir, exist_ok=True)
        report_path = os.path.join(config.output_dir, f"report_{report.model}_{split}.csv")
        write_report_csv(report, report_path)
        click.echo(f"\nReport: {report_path}")

    except FilmSegError as e:
        click.echo(f"Evaluate error: {str(e)}", err=True)
        raise click.Abort()
    except Exception as e:
        click.echo(f"Unexpected error: {str(e)}", err=True)
        raise click.Abort()


@cli.command()
@config_option
@click.option('--placement', '-p', 'placements', multiple=True,
              type=click.Choice(PLACEMENT_NAMES, case_sensitive=False),
              help='Placements to compare (default: configured list)')
@seed_option
@out_option
@threads_option
@click.option('--ood-dir', type=click.Path(exists=True, file_okay=False),
              help='Estimated-schedule dataset to score as well (default: compare.ood_directory)')
def compare(config_path, placements, seed, out, threads, ood_dir):
    """Train and evaluate several placements across seeds.

    Reports mean ± sd Dice over seeds, Dice10 and HD95, and marks placements
    whose per-case Dice differs from the baseline in a paired t-test
    (p < 0.05). With an out-of-domain dataset every checkpoint is also
    scored on it and a second table with its own t-tests is reported.

    Examples:
        filmseg compare --config experiment.yaml
        filmseg compare -c experiment.yaml -p none -p all --seed 0
        filmseg compare -c experiment.yaml --ood-dir ood
    """
    try:
        config = load_config(config_path).with_overrides(output_dir=out, threads=threads)
        if ood_dir is not None:
            config.compare.ood_directory = os.path.abspath(ood_dir)
        manifest = _manifest(config.manifest_path)
        ood_manifest = _manifest(config.ood_manifest_path) if config.ood_manifest_path else None
        names = [p.lower() for p in placements] or list(config.compare.placements)
        seeds = [seed] if seed is not None else list(config.compare.seeds)
        evaluation = config.evaluation
        ood_split = config.compare.ood_split

        def run(job):
            placement, job_seed = job
            architecture = replace(config.architecture, placement=Placement.parse(placement), seed=job_seed)
            training = replace(config.training, seed=job_seed)
            run_dir = os.path.join(config.output_dir, f"{placement}_seed{job_seed}")
            checkpoint, _ = train_model(manifest, architecture, training, run_dir)
            settings = dict(patch_size=evaluation.patch_size or training.patch_size, overlap=evaluation.overlap,
                            triplet_index=evaluation.triplet_index, name=placement)
            reports = {IN_DOMAIN: evaluate_model(checkpoint, manifest, split=evaluation.split, **settings)}
            write_report_csv(reports[IN_DOMAIN], os.path.join(run_dir, f"report_{evaluation.split}.csv"))
            if ood_manifest is not None:
                reports[OUT_OF_DOMAIN] = evaluate_model(checkpoint, ood_manifest, split=ood_split, **settings)
                write_report_csv(reports[OUT_OF_DOMAIN], os.path.join(run_dir, f"report_ood_{ood_split}.csv"))
            return reports

        jobs = [(name, s) for name in names for s in seeds]
        click.echo(f"Comparing {', '.join(names)} over seeds {', '.join(map(str, seeds))}")
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(run, jobs))

        cohorts = [IN_DOMAIN] + ([OUT_OF_DOMAIN] if ood_manifest is not None else [])
        rows = []
        headers = ["Placement", "Seeds", "Dice", "Dice10", "HD95 (mm)", f"p vs {config.compare.baseline}"]
        for cohort in cohorts:
            reports = {name: [r[cohort] for (n, _), r in zip(jobs, results) if n == name] for name in names}
            cohort_rows, _ = compare_placements(reports, baseline=config.compare.baseline, cohort=cohort)
            table_data = [
                [row.placement, row.seeds, format_mean_sd(row.dice_mean, row.dice_sd) + row.marker,
                 f"{row.dice10_mean:.3f}", format_mean_sd(row.hd95_mean, row.hd95_sd, digits=1),
                 "" if row.ttest is None else f"{row.ttest.pvalue:.3g}"]
                for row in cohort_rows
            ]
            if len(cohorts) > 1:
                click.echo(f"\n{cohort.replace('_', '-')}:")
            click.echo(tabulate(table_data, headers=headers, tablefmt="grid"))
            rows.extend(cohort_rows)

        os.makedirs(config.output_dir, exist_ok=True)
        comparison_path = os.path.join(config.output_dir, "comparison.csv")
        write_comparison_csv(rows, comparison_path)
        click.echo(f"\nComparison: {comparison_path}")

    except FilmSegError as e:
        click.echo(f"Compare error: {str(e)}", err=True)
        raise click.Abort()
    except Exception as e:
        click.echo(f"Unexpected error: {str(e)}", err=True)
        raise click.Abort()


@cli.command()
@config_option
@click.option('--check', 'checks', multiple=True, type=click.Choice(registered_checks()),
              help='Checks to run (default: all)')
@seed_option
@click.option('--tolerance', type=float, default=DEFAULT_TOLERANCE, show_default=True,
              help='Maximum relative error')
def gradcheck(config_path, checks, seed, tolerance):
    """Verify analytic gradients against central finite differences.

    Runs every registered primitive and the end-to-end depth-2 model with
    all FiLM sites, and exits with status 1 if any check exceeds the
    tolerance.

    Examples:
        filmseg gradcheck
        filmseg gradcheck --check conv3d --check unet_all
    """
    try:
        if seed is None:
            seed = load_config(config_path).seed if config_path else 0
        results = run_suite(checks, seed=seed, tolerance=tolerance)
    except FilmSegError as e:
        click.echo(f"Gradcheck error: {str(e)}", err=True)
        raise click.Abort()

    headers = ["Check", "Entries", "Skipped", "Max rel. error", "Status"]
    table_data = [[r.name, r.entries, r.skipped, f"{r.max_error:.2e}", "ok" if r.passed else "FAILED"]
                  for r in results]
    click.echo(tabulate(table_data, headers=headers, tablefmt="grid"))

    failed = [r.name for r in results if not r.passed]
    if failed:
        click.echo(f"Gradient check failed: {', '.join(failed)}", err=True)
        raise click.Abort()
    click.echo(f"\nAll {len(results)} gradient checks passed")


if __name__ == '__main__':
    cli()
