import os
import logging
from pathlib import Path
from datetime import datetime
from typing import Callable, List, Optional

import typer
from dotenv import load_dotenv
from pydantic import ValidationError

from core.errors import ConfigError, CsiToolkitError
from core.harness import (
    SWEEP_KINDS,
    cmd_decode,
    cmd_finetune,
    cmd_gen,
    cmd_plot,
    cmd_sweep,
    cmd_train,
    load_spec,
)
from core.update import UpdateQuantizer, make_update_configs

# Load environment variables
load_dotenv()

app = typer.Typer(
    help="Neural CSI compression with online, rate-aware fine-tuning of the full model.",
    no_args_is_help=True,
    pretty_exceptions_enable=False,
)


def setup_logging(logs_dir: Optional[Path] = None):
    """File-only logging: a main log plus dedicated training and bitstream logs."""
    logs_dir = Path(logs_dir or os.getenv("CSI_LOG_DIR", "logs"))
    logs_dir.mkdir(parents=True, exist_ok=True)

    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")

    main_log_file = logs_dir / f"main_{timestamp}.log"
    training_log_file = logs_dir / f"training_{timestamp}.log"
    bitstream_log_file = logs_dir / f"bitstream_{timestamp}.log"

    # Clear any existing handlers
    for handler in logging.root.handlers[:]:
        logging.root.removeHandler(handler)

    logging.basicConfig(
        level=logging.DEBUG,
        format='%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s',
        handlers=[
            logging.FileHandler(main_log_file, encoding='utf-8')
        ]
    )

    # Per-epoch losses, rates and non-zero update counts
    training_logger = logging.getLogger('training')
    for handler in training_logger.handlers[:]:
        training_logger.removeHandler(handler)
    training_handler = logging.FileHandler(training_log_file, encoding='utf-8')
    training_handler.setFormatter(
        logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')
    )
    training_logger.addHandler(training_handler)
    training_logger.setLevel(logging.INFO)
    training_logger.propagate = False

    # Section tables of every bitstream written
    bitstream_logger = logging.getLogger('bitstream')
    for handler in bitstream_logger.handlers[:]:
        bitstream_logger.removeHandler(handler)
    bitstream_handler = logging.FileHandler(bitstream_log_file, encoding='utf-8')
    bitstream_handler.setFormatter(
        logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    )
    bitstream_logger.addHandler(bitstream_handler)
    bitstream_logger.setLevel(logging.DEBUG)
    bitstream_logger.propagate = False

    # Worker pool chatter
    logging.getLogger('concurrent.futures').setLevel(logging.WARNING)

    logger = logging.getLogger(__name__)
    logger.info("=== CSI FINE-TUNING TOOLKIT STARTED ===")
    logger.info(f"Main log: {main_log_file.absolute()}")
    logger.info(f"Training log: {training_log_file.absolute()}")
    logger.info(f"Bitstream log: {bitstream_log_file.absolute()}")

    return logger


def _run(fn: Callable, *args, **kwargs):
    logger = logging.getLogger(__name__)
    try:
        return fn(*args, **kwargs)
    except CsiToolkitError as e:
        logger.error(f"{type(e).__name__}: {e}", exc_info=True)
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(code=e.exit_code)
    except Exception:
        logger.critical("Application error", exc_info=True)
        raise


SpecOption = typer.Option(None, "--spec", help="Experiment spec (TOML or JSON)")
SeedOption = typer.Option(None, "--seed")
OutOption = typer.Option(None, "--out", help="Output directory (default $CSI_OUT_DIR or runs)")
WorkersOption = typer.Option(None, "--workers", help="Parallel experiment cells")


@app.callback()
def main_callback(
    log_dir: Optional[Path] = typer.Option(None, "--log-dir", help="Log directory (default $CSI_LOG_DIR or logs)"),
):
    setup_logging(log_dir)


@app.command()
def gen(
    spec: Optional[Path] = SpecOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
):
    """Generate base and shifted-environment CSIBIN datasets."""
    experiment = _run(load_spec, spec, seed=seed, out=out, command="gen")
    paths = _run(cmd_gen, experiment)
    for name, path in paths.items():
        typer.echo(f"{name}: {path}")


@app.command()
def train(
    spec: Optional[Path] = SpecOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    lam: Optional[List[float]] = typer.Option(None, "--lambda", help="RD trade-off (repeatable)"),
    workers: Optional[int] = WorkersOption,
    resume: bool = typer.Option(False, "--resume", help="Continue from *_last.ckpt checkpoints"),
):
    """Train one backbone checkpoint per lambda and write the RD frontier table."""
    experiment = _run(load_spec, spec, seed=seed, out=out, lambdas=lam, workers=workers,
                      resume=resume or None, command="train")
    table = _run(cmd_train, experiment)
    for row in table:
        typer.echo(f"lambda={row.lam:g} rate={row.rate_total:.4f} nmse={row.nmse_db:.2f} dB")


@app.command()
def finetune(
    spec: Optional[Path] = SpecOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    mode: Optional[List[str]] = typer.Option(None, "--mode", help="no_ft | encoder_only | full_model | genie_aided"),
    lam: Optional[float] = typer.Option(None, "--lambda", help="Backbone lambda to fine-tune"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint"),
    n_bins: Optional[int] = typer.Option(None, "--n-bins", help="Update quantization bins"),
    workers: Optional[int] = WorkersOption,
):
    """Run the fine-tuning schemes on the shifted environment."""
    experiment = _run(load_spec, spec, seed=seed, out=out, modes=mode, finetune_lambda=lam,
                      checkpoint=checkpoint, workers=workers, command="finetune")
    if n_bins is not None:
        quantizer = _run(_validated, lambda: UpdateQuantizer(t=experiment.finetune.quantizer.t, n_bins=n_bins))
        experiment.finetune = experiment.finetune.model_copy(update={"quantizer": quantizer})
    table = _run(cmd_finetune, experiment)
    for row in table:
        typer.echo(
            f"{row.mode:<14} rate={row.rate_total:.4f} (latent {row.rate_latent:.4f}, "
            f"update {row.rate_update:.4f}) nmse={row.nmse_db:.2f} dB nonzero={row.nonzero}"
        )


@app.command()
def decode(
    bitstreams: List[Path] = typer.Argument(..., help="Session bitstreams in order"),
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Backbone (theta0) checkpoint"),
    out: Path = typer.Option(..., "--out", help="Reconstructed CSIBIN path"),
    reference: Optional[Path] = typer.Option(None, "--reference", help="Original CSIBIN for an NMSE check"),
    t: float = typer.Option(0.005, "--t", help="Update quantization step"),
    n_bins: int = typer.Option(50, "--n-bins"),
    prior: str = typer.Option("spike_slab", "--prior", help="spike_slab | gaussian | uniform"),
    sigma: float = typer.Option(0.05, "--sigma"),
    alpha: float = typer.Option(1000.0, "--alpha"),
):
    """Decode bitstreams with only theta0 and the update-prior parameters."""
    quantizer, prior_config = _run(make_update_configs, t, n_bins, prior, sigma, alpha)
    path, nmse = _run(cmd_decode, bitstreams, checkpoint, out, quantizer, prior_config, reference)
    typer.echo(f"wrote {path}")
    if nmse is not None:
        typer.echo(f"nmse={nmse:.4f} dB")


@app.command()
def sweep(
    kind: str = typer.Argument(..., help=f"One of {', '.join(SWEEP_KINDS)}"),
    spec: Optional[Path] = SpecOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    interval: Optional[List[int]] = typer.Option(None, "--interval", help="Fine-tuning interval (repeatable)"),
    n_bins: Optional[List[int]] = typer.Option(None, "--n-bins", help="Bin count (repeatable)"),
    lam: Optional[float] = typer.Option(None, "--lambda", help="Backbone lambda to fine-tune"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint"),
    workers: Optional[int] = WorkersOption,
):
    """Interval, bin-count and prior-ablation sweeps."""
    experiment = _run(load_spec, spec, seed=seed, out=out, intervals=interval, n_bins=n_bins,
                      finetune_lambda=lam, checkpoint=checkpoint, workers=workers, command=f"sweep-{kind}")
    table = _run(cmd_sweep, experiment, kind)
    typer.echo(f"{len(table)} rows written to {experiment.out / 'tables' / f'sweep_{kind}.csv'}")


@app.command()
def plot(
    tables: List[Path] = typer.Argument(..., help="Result-table CSVs"),
    out: Path = typer.Option(Path("plots"), "--out"),
    manifest: Optional[List[Path]] = typer.Option(None, "--manifest", help="Session manifests for trajectories"),
):
    """Render SVG figures and the plotted-points CSV from result tables."""
    written = _run(cmd_plot, tables, out, manifest)
    for path in written:
        typer.echo(str(path))


def _validated(factory: Callable):
    try:
        return factory()
    except ValidationError as e:
        raise ConfigError(str(e)) from e


if __name__ == "__main__":
    app()
