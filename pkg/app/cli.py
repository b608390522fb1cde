import logging
import sys
from typing import List, Optional

import click

from app.config import settings
from app.exceptions import BaseCustomException
from app.services import commands
from app.utils.logger import setup_logger


def _int_list(ctx, param, value: Optional[str]) -> Optional[List[int]]:
    """Parse `2,5,10` or a range `0-15` into a list of ints."""
    if value is None:
        return None
    items: List[int] = []
    try:
        for part in value.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                items.extend(range(int(lo), int(hi) + 1))
            else:
                items.append(int(part))
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers or ranges, got {value!r}")
    return items


def _run(func, *args, **kwargs):
    try:
        return func(*args, **kwargs)
    except BaseCustomException as e:
        click.echo(f"Error: {e.message}", err=True)
        if e.details:
            click.echo(f"Details: {e.details}", err=True)
        sys.exit(1)


@click.group()
@click.option("--log-level", default=None, help="Overrides LOG_LEVEL")
def cli(log_level: Optional[str]):
    """Patch-network domain adaptation toolkit."""
    level = (log_level or settings.LOG_LEVEL).upper()
    setup_logger(level=getattr(logging, level, logging.INFO), log_file=settings.LOG_FILE)


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Synth config (key=value)")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None, help="Overrides the config seed")
def synth(config_path, out_dir, seed):
    """Generate the synthetic source/target domain pair."""
    manifest = _run(commands.cmd_synth, config_path, out_dir, seed)
    click.echo(f"Manifest written to {manifest}")


@cli.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--domain", type=click.Choice(["source", "target"]), default="source")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_ckpt", type=click.Path(dir_okay=False), required=True)
@click.option("--seed", type=int, default=None)
def train(manifest, domain, config_path, out_ckpt, seed):
    """Train a network from scratch on one domain."""
    model = _run(commands.cmd_train, manifest, domain, config_path, out_ckpt, seed)
    click.echo(f"Best validation AUC {model.history.best_val_auc} at epoch {model.history.best_epoch}; "
               f"checkpoint written to {out_ckpt}")


@cli.command()
@click.option("--source", "source_ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--size", type=int, required=True, help="Number of target training patients")
@click.option("--freeze", "freeze_index", type=int, required=True, help="Freeze the shallowest i layers")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_ckpt", type=click.Path(dir_okay=False), required=True)
@click.option("--seed", type=int, default=None)
def adapt(source_ckpt, manifest, size, freeze_index, config_path, out_ckpt, seed):
    """Fine-tune a source checkpoint on target data."""
    _run(commands.cmd_adapt, source_ckpt, manifest, size, freeze_index, config_path, out_ckpt, seed)
    click.echo(f"Adapted checkpoint written to {out_ckpt}")


@cli.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--volume", "volume_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--threshold", type=float, default=None, help="Defaults to SEGMENT_THRESHOLD")
def segment(ckpt, volume_path, out_path, threshold):
    """Segment one volume with a checkpoint."""
    threshold = settings.SEGMENT_THRESHOLD if threshold is None else threshold
    result = _run(commands.cmd_segment, ckpt, volume_path, out_path, threshold)
    click.echo(f"{int(result.mask.sum())} lesion voxels written to {out_path}")
    if result.has_reference:
        click.echo(f"Dice: {result.dice:.4f}")


@cli.command()
@click.option("--source", "source_ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_csv", type=click.Path(dir_okay=False), required=True)
@click.option("--sizes", callback=_int_list, default=None, help="e.g. 2,3,5")
@click.option("--freeze", "freeze_set", callback=_int_list, default=None, help="e.g. 0,4,8 or 0-15")
@click.option("--seed", "seeds", callback=_int_list, default=None, help="Seeds, e.g. 0,1,2")
@click.option("--scenario", "scenarios", callback=_int_list, default=None, help="Subset of 1,2,3")
@click.option("--jobs", type=int, default=None, help="Defaults to DEFAULT_JOBS")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--full-grid", is_flag=True, help="Sizes 2-12, 25, 50, 100 and every freeze index")
def grid(source_ckpt, manifest, out_csv, sizes, freeze_set, seeds, scenarios, jobs, config_path, full_grid):
    """Run the scenario grid and write the results CSV."""
    results = _run(commands.cmd_grid, source_ckpt, manifest, out_csv, sizes=sizes, freeze_set=freeze_set,
                   seeds=seeds, jobs=jobs or settings.DEFAULT_JOBS, config_path=config_path,
                   scenarios=scenarios, full_grid=full_grid)
    failed = sum(1 for r in results if r.failed)
    click.echo(f"{len(results)} rows written to {out_csv}")
    if failed:
        click.echo(f"{failed} cells failed", err=True)
        sys.exit(1)


@cli.command()
@click.argument("results_csv", type=click.Path(exists=True, dir_okay=False))
def report(results_csv):
    """Summarize a results CSV."""
    click.echo(_run(commands.cmd_report, results_csv))


@cli.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Overrides MODEL_CHECKPOINT")
def serve(host, port, ckpt):
    """Serve segmentation over HTTP."""
    import uvicorn

    if ckpt:
        settings.MODEL_CHECKPOINT = ckpt
    uvicorn.run("app.main:app", host=host, port=port)


if __name__ == "__main__":
    cli()
