"""``sfim`` command line: train, restore, degrade, analyze, gradcheck, selftest."""

import logging
from functools import wraps
from pathlib import Path
from typing import Callable, Optional

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from sfim import __version__
from sfim.analyze import analyze_pair
from sfim.checks import TOLERANCE, gradcheck_table, run_gradcheck, selftest, selftest_table
from sfim.config import load_run_config
from sfim.degrade import MANIFEST_JSONL, load_spec, make_dataset, source_images
from sfim.errors import CheckFailure, ConfigError, SfimError
from sfim.imageio import load_image, save_image
from sfim.settings import get_settings
from sfim.train import restore, train

app = typer.Typer(add_completion=False, no_args_is_help=True, help="Spatial/frequency multi-level restoration toolkit.")
console = Console()
logger = logging.getLogger("sfim")


def _fails_cleanly(command: Callable) -> Callable:
    """Map library errors to their exit code with a one-line reason on stderr."""

    @wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except SfimError as exc:
            typer.echo(f"error: {exc}", err=True)
            raise typer.Exit(exc.exit_code) from exc

    return wrapper


def _table(title: str, rows: dict) -> Table:
    table = Table(title=title, show_header=False)
    table.add_column("key")
    table.add_column("value", justify="right")
    for key, value in rows.items():
        table.add_row(key, f"{value:.4f}" if isinstance(value, float) else str(value))
    return table


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Log at DEBUG level.")) -> None:
    level = "DEBUG" if verbose else get_settings().log_level.upper()
    logging.basicConfig(level=level, format="%(message)s", datefmt="[%X]",
                        handlers=[RichHandler(console=Console(stderr=True), show_path=False)], force=True)
    logger.debug("sfim %s", __version__)


@app.command("train")
@_fails_cleanly
def cmd_train(
    config: Path = typer.Option(..., "--config", help="Run-config YAML."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Overrides the config seed."),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory (default: config output_dir)."),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Continue from a checkpoint."),
    max_steps: Optional[int] = typer.Option(None, "--max-steps", min=0, help="Stop after this many steps."),
    progress: bool = typer.Option(True, "--progress/--no-progress"),
) -> None:
    run_config = load_run_config(config)
    if not progress:
        run_config = run_config.model_copy(update={"progress": False})
    result = train(run_config, seed=seed, out_dir=out, resume=resume, max_steps=max_steps)
    state = result.state
    console.print(_table("training summary", {
        "steps": state.step,
        "final loss": result.final_loss if result.final_loss is not None else "-",
        "best val psnr": state.best_psnr if state.best_step >= 0 else "-",
        "best step": state.best_step if state.best_step >= 0 else "-",
        "log": str(result.log_path),
        "checkpoints": ", ".join(p.name for p in result.checkpoints),
    }))


@app.command("restore")
@_fails_cleanly
def cmd_restore(
    ckpt: Path = typer.Option(..., "--ckpt", help="Checkpoint (.sfck)."),
    in_path: Path = typer.Option(..., "--in", help="Degraded image (PNG or .sftn)."),
    out: Path = typer.Option(..., "--out", help="Restored image path."),
    gt: Optional[Path] = typer.Option(None, "--gt", help="Ground truth for PSNR/SSIM."),
    tile: Optional[int] = typer.Option(None, "--tile", min=1, help="Restore in tiles of this size."),
    overlap: int = typer.Option(16, "--overlap", min=0),
) -> None:
    image = load_image(in_path)
    truth = load_image(gt) if gt is not None else None
    if truth is not None and truth.shape != image.shape:
        raise ConfigError(f"ground truth {truth.shape} does not match input {image.shape}")
    result = restore(ckpt, image, truth, tile=tile, overlap=overlap)
    save_image(out, result.image)
    console.print(f"wrote {out}")
    if result.quality is not None:
        console.print(_table("quality", result.quality.to_record()))


@app.command("degrade")
@_fails_cleanly
def cmd_degrade(
    out: Path = typer.Option(..., "--out", help="Dataset directory."),
    in_path: Optional[Path] = typer.Option(None, "--in", help="Clean image or directory of images."),
    procedural: Optional[int] = typer.Option(None, "--procedural", min=0, help="Generate N procedural pairs."),
    spec: Optional[Path] = typer.Option(None, "--spec", help="Fixed degradation spec (YAML/JSON)."),
    seed: int = typer.Option(0, "--seed"),
    size: int = typer.Option(64, "--size", min=8, help="Procedural scene size."),
    channels: int = typer.Option(3, "--channels", min=3, max=4),
) -> None:
    if (in_path is None) == (procedural is None):
        raise ConfigError("give exactly one of --in or --procedural")
    fixed = load_spec(spec) if spec is not None else None
    if in_path is not None:
        records = make_dataset(out, n=len(source_images(in_path)), seed=seed, size=None,
                               channels=channels, source=in_path, spec=fixed)
    else:
        records = make_dataset(out, n=procedural, seed=seed, size=size, channels=channels, spec=fixed)
    console.print(f"wrote {len(records)} pairs and {out / MANIFEST_JSONL}")


@app.command("analyze")
@_fails_cleanly
def cmd_analyze(
    deg: Path = typer.Option(..., "--deg", help="Degraded image."),
    gt: Path = typer.Option(..., "--gt", help="Ground-truth image."),
    out: Path = typer.Option(..., "--out", help="Directory for the difference maps."),
    colormap: str = typer.Option("viridis", "--colormap", help="gray or viridis."),
) -> None:
    if colormap not in ("gray", "viridis"):
        raise ConfigError(f"unknown colormap {colormap!r}")
    result = analyze_pair(load_image(deg), load_image(gt), out, colormap)
    console.print(_table("analysis", result.to_record()))


@app.command("gradcheck")
@_fails_cleanly
def cmd_gradcheck(
    scope: str = typer.Option("tensor", "--scope", help="tensor, blocks or model."),
    seed: int = typer.Option(0, "--seed"),
    samples: int = typer.Option(200, "--samples", min=1),
) -> None:
    if scope not in ("tensor", "blocks", "model"):
        raise ConfigError(f"unknown scope {scope!r}; use tensor, blocks or model")
    reports = run_gradcheck(scope, seed, samples)  # type: ignore[arg-type]
    console.print(gradcheck_table(reports))
    failed = [r.name for r in reports if not r.passed(TOLERANCE)]
    if failed:
        raise CheckFailure(f"{len(failed)} gradient check(s) above {TOLERANCE:g}: {', '.join(failed)}")


@app.command("selftest")
@_fails_cleanly
def cmd_selftest(seed: int = typer.Option(0, "--seed")) -> None:
    results = selftest(seed)
    console.print(selftest_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CheckFailure(f"{len(failed)} selftest check(s) failed: {', '.join(failed)}")


if __name__ == "__main__":
    app()
