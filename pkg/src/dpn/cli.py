"""Operator commands: train, predict, evaluate, augment, count-params,
gradcheck, benchmark."""

import logging
import sys
from pathlib import Path

import click

from .config import ConfigError, build_config, echo_config

log = logging.getLogger("dpn")


def _setup(threads):
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s",
                        datefmt="%H:%M:%S")
    set_worker_threads(threads)


def set_worker_threads(threads):
    """Pin kernel data-parallelism width (clamped to available threads)."""
    import numba
    from threadpoolctl import threadpool_limits
    n = min(max(1, threads), numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    threadpool_limits(limits=n)
    return n


_common = [
    click.option("--config", "config_file", type=click.Path(), default=None,
                 help="line-based 'key = value' config file"),
    click.option("--dataset", type=click.Choice(["drive", "chase", "hrf"]),
                 default=None),
    click.option("--data-root", default=None),
    click.option("--seed", type=int, default=None),
    click.option("--iters", type=int, default=None),
    click.option("--checkpoint", type=click.Path(), default=None),
    click.option("--out", type=click.Path(), default=None),
    click.option("--threshold", type=float, default=None),
    click.option("--threads", type=int, default=None),
    click.option("--crop-size", type=int, default=None),
    click.option("--chase-split", type=click.Choice(["20/8", "14/14"]),
                 default=None),
    click.option("--no-aux", "aux", flag_value=False, default=None,
                 help="disable the auxiliary losses (ablation)"),
    click.option("--branches", default=None,
                 help="enabled DP-Block branches, e.g. os1,os2,os4"),
    click.option("--filters", default=None,
                 help="branch filter widths c0,c1,c2, e.g. 16,8,8"),
    click.option("--blocks", type=int, default=None,
                 help="number of DP-Blocks"),
]


def common_options(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


def _config(config_file, **flags):
    try:
        cfg = build_config(config_file, **flags)
    except ConfigError as exc:
        raise click.ClickException(str(exc))
    _setup(cfg.threads)
    click.echo(echo_config(cfg))
    return cfg


@click.group()
def main():
    """Detail-preserving network for retinal vessel segmentation."""


@main.command()
@common_options
@click.option("--augmented-root", default=None,
              help="pre-built augmented set (see: dpn augment)")
@click.option("--fixed-crop", "fixed_crop", is_flag=True, default=None,
              help="train on a single deterministic crop (overfit smoke)")
@click.option("--lr", type=float, default=None)
@click.option("--weight-decay", type=float, default=None)
def train(config_file, **flags):
    """Train with the configured dataset recipe."""
    from .train import train as run_train
    cfg = _config(config_file, **flags)
    try:
        final = run_train(cfg)
    except Exception as exc:
        raise click.ClickException(str(exc))
    click.echo(f"final checkpoint: {final}")


@main.command()
@common_options
@click.argument("images", nargs=-1, required=True,
                type=click.Path(exists=True))
def predict(config_file, images, **flags):
    """Segment images: writes <stem>_prob.png and <stem>_bin.png."""
    from .checkpoint import CheckpointError, load_checkpoint
    from .predict import predict_paths
    cfg = _config(config_file, **flags)
    if not cfg.checkpoint:
        raise click.ClickException("predict needs --checkpoint")
    try:
        model, _ = load_checkpoint(cfg.checkpoint)
    except CheckpointError as exc:
        raise click.ClickException(str(exc))
    results, failed = predict_paths(model, images, cfg.out,
                                    threshold=cfg.threshold
                                    if cfg.threshold is not None else 0.5)
    for path, seconds, fps in results:
        click.echo(f"{path}: {seconds:.3f} s ({fps:.3f} fps, disk to disk)")
    if failed:
        sys.exit(1)


@main.command()
@common_options
@click.option("--pred-dir", default=None,
              help="evaluate existing probability maps instead of a model")
@click.option("--eval-mode", type=click.Choice(["pooled", "mean"]),
              default=None)
def evaluate(config_file, **flags):
    """Per-image and dataset-level metrics over the test split."""
    from .metrics import report_csv_lines, report_text
    from .predict import evaluate as run_eval
    cfg = _config(config_file, **flags)
    try:
        report = run_eval(cfg)
    except Exception as exc:
        raise click.ClickException(str(exc))
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "eval.csv"
    csv_path.write_text("\n".join(report_csv_lines(report)) + "\n")
    click.echo(report_text(report))
    click.echo(f"report written to {csv_path}")


@main.command()
@common_options
def augment(config_file, **flags):
    """Write the 11x offline-augmented training set to --out."""
    from .augment import augment_offline
    from .data import load_split, save_image, save_mask
    cfg = _config(config_file, **flags)
    try:
        spec = cfg.dataset_spec()
        train_set, _ = load_split(spec)
    except Exception as exc:
        raise click.ClickException(str(exc))
    out = Path(cfg.out)
    for sub in ("images", "labels", "fov"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    count = 0
    for sample in train_set:
        for aug in augment_offline([sample]):
            save_image(out / "images" / f"{aug.name}.png", aug.image)
            save_mask(out / "labels" / f"{aug.name}.png", aug.label)
            save_mask(out / "fov" / f"{aug.name}.png", aug.fov)
            count += 1
    click.echo(f"wrote {count} augmented samples "
               f"({len(train_set)} originals x 11) to {out}")


@main.command("count-params")
@common_options
def count_params(config_file, **flags):
    """Per-layer parameter table for the configured architecture."""
    from .model import DpnModel, count_parameters
    cfg = _config(config_file, **flags)
    model = DpnModel(cfg.model_config())
    rows, groups, total = count_parameters(model)
    for name, shape, count in rows:
        click.echo(f"{name:<24}{str(shape):<20}{count:>10}")
    click.echo("-" * 54)
    for group in sorted(groups, key=lambda g: (g != "stem", g)):
        click.echo(f"{group:<44}{groups[group]:>10}")
    if "stem" in groups and "block1" in groups:
        click.echo(f"{'stem+block1':<44}"
                   f"{groups['stem'] + groups['block1']:>10}")
    click.echo(f"{'total':<44}{total:>10}")


@main.command()
@common_options
@click.option("--gc-seeds", "gc_seeds", type=int, default=20,
              help="seeds per kernel check (default 20)")
@click.option("--model-seeds", type=int, default=1,
              help="seeds for the full-network check (default 1)")
def gradcheck(config_file, gc_seeds, model_seeds, **flags):
    """Finite-difference verification of every gradient path."""
    from .gradcheck_suite import run_suite
    _config(config_file, **flags)
    ok = True
    for line, passed in run_suite(kernel_seeds=gc_seeds,
                                  model_seeds=model_seeds):
        click.echo(line)
        ok = ok and passed
    if not ok:
        raise click.ClickException("gradient check FAILED")
    click.echo("all gradient checks passed")


@main.command()
@common_options
@click.option("--runs", type=int, default=20, help="minimum timed runs")
def benchmark(config_file, runs, **flags):
    """fps over the test split (disk-to-disk protocol, model load
    amortized)."""
    from .predict import benchmark as run_bench
    cfg = _config(config_file, **flags)
    click.echo("protocol: per image, wall time from reading the raw file to "
               "writing both maps; model loaded once beforehand")
    try:
        stats = run_bench(cfg, min_runs=runs)
    except Exception as exc:
        raise click.ClickException(str(exc))
    click.echo(f"runs: {stats['runs']}")
    click.echo(f"fps mean:   {stats['fps_mean']:.3f}")
    click.echo(f"fps median: {stats['fps_median']:.3f}")
    click.echo(f"fps min:    {stats['fps_min']:.3f}")


if __name__ == "__main__":
    main()
