"""Experiment commands: gen, train, finetune, decode, sweep and plot.

Every command takes an `ExperimentSpec` and writes its artifacts under `spec.out`:

    data/         CSIBIN datasets (+ JSON manifests) and gen_manifest.json
    checkpoints/  CKPT1 backbones, one per lambda (plus *_last.ckpt for resuming)
    sessions/     per-mode bitstreams, fine-tuned checkpoints and session manifests
    tables/       ResultTable CSVs
    plots/        SVG figures and the CSV of plotted points
"""
import csv
import json
import logging
import math
import os
import time

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from core import checkpoint as ckpt_io
from core import plot
from core.bitstream import read as read_bitstream
from core.channel import (
    ChannelConfig,
    CsiDataset,
    correlation_matrix,
    dominant_eigen_fraction,
    generate,
    ingest,
    normalize,
    scene_stream,
    shift,
    split,
)
from core.codec import CodecConfig, CodecModel, build_model, param_counts
from core.errors import ConfigError
from core.finetune import (
    SessionResult,
    TrainConfig,
    decode_session,
    evaluate_no_ft,
    nmse_db,
    run_session,
    schedule,
    schedule_aggregate,
    session_manifest,
    train_backbone,
    write_manifest,
)
from core.update import UpdatePriorConfig, UpdateQuantizer, make_prior

# Set up logging
logger = logging.getLogger(__name__)

MODES = ("no_ft", "encoder_only", "full_model", "genie_aided")
SWEEP_KINDS = ("interval", "n_bins", "ablation")


class ExperimentSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    command: str = "all"
    seed: int = Field(default_factory=lambda: int(os.getenv("CSI_SEED", "0")))
    out: Path = Field(default_factory=lambda: Path(os.getenv("CSI_OUT_DIR", "runs")))
    workers: int = Field(default_factory=lambda: int(os.getenv("CSI_WORKERS", "1")), ge=1)
    data_dir: Optional[Path] = None
    checkpoint: Optional[Path] = None
    resume: bool = False

    channel: ChannelConfig = Field(default_factory=ChannelConfig)
    angle_shift: float = 0.5
    spread_scale: float = Field(3.0, gt=0.0)
    path_delta: int = -5
    backbone_samples: int = Field(2000, ge=1)
    finetune_samples: int = Field(100, ge=1)
    eval_samples: int = Field(200, ge=1)
    stream_samples: int = Field(1200, ge=0)
    drift_per_scene: float = 0.002

    lambdas: List[float] = Field(default_factory=lambda: [1.0, 4.0, 16.0, 64.0])
    finetune_lambda: Optional[float] = None
    modes: List[str] = Field(default_factory=lambda: list(MODES))
    intervals: List[int] = Field(default_factory=lambda: [50, 100, 200, 400])
    sweep_ft_samples: int = Field(25, ge=1)
    n_bins: List[int] = Field(default_factory=lambda: [2, 4, 8, 16, 32, 64, 128, 256])

    codec: CodecConfig = Field(default_factory=CodecConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    finetune: TrainConfig = Field(default_factory=lambda: TrainConfig(mode="full_model"))

    @field_validator("lambdas", "modes", "intervals", "n_bins")
    @classmethod
    def _non_empty(cls, value):
        if not value:
            raise ValueError("list must not be empty")
        return value

    @field_validator("intervals", "n_bins")
    @classmethod
    def _at_least_two(cls, value):
        if min(value) < 2:
            raise ValueError(f"values must be at least 2, got {value}")
        return value

    @field_validator("modes")
    @classmethod
    def _known_modes(cls, value):
        unknown = [m for m in value if m not in MODES]
        if unknown:
            raise ValueError(f"unknown modes {unknown}; expected a subset of {list(MODES)}")
        return value

    @field_validator("checkpoint", "data_dir")
    @classmethod
    def _exists(cls, value):
        if value is not None and not Path(value).exists():
            raise ValueError(f"{value} does not exist")
        return value

    @property
    def ft_lambda(self) -> float:
        return self.finetune_lambda if self.finetune_lambda is not None else self.lambdas[0]

    def data_path(self, name: str) -> Path:
        return (self.data_dir or self.out / "data") / f"{name}.csibin"

    def checkpoint_path(self, lam: float, last: bool = False) -> Path:
        suffix = "_last" if last else ""
        return self.out / "checkpoints" / f"backbone_lam{lam:g}{suffix}.ckpt"

    def train_config(self, lam: float) -> TrainConfig:
        return self.train.model_copy(update={"lam": lam, "seed": self.seed, "mode": "backbone"})

    def finetune_config(self, **update) -> TrainConfig:
        return self.finetune.model_copy(update={"lam": self.ft_lambda, "seed": self.seed, **update})


def load_spec(path: Optional[Path] = None, **overrides) -> ExperimentSpec:
    """Read a TOML or JSON spec (or start from defaults) and apply non-None flag overrides."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_bytes()
        except OSError as e:
            raise ConfigError(f"cannot read spec {path}: {e}") from e
        try:
            data = tomllib.loads(text.decode("utf-8")) if path.suffix == ".toml" else json.loads(text)
        except (tomllib.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ConfigError(f"cannot parse spec {path}: {e}") from e
    for key, value in overrides.items():
        if value is None or (isinstance(value, (list, tuple)) and not value):
            continue
        data[key] = list(value) if isinstance(value, tuple) else value
    try:
        spec = ExperimentSpec(**data)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment spec: {e}") from e
    logger.info(f"Experiment spec: out={spec.out} seed={spec.seed} lambdas={spec.lambdas} modes={spec.modes}")
    return spec


# ---------------------------------------------------------------------------
# Result table
# ---------------------------------------------------------------------------

@dataclass
class ResultRow:
    experiment: str
    mode: str
    lam: float
    interval: Optional[int] = None
    n_bins: Optional[int] = None
    rate_latent: float = 0.0
    rate_update: float = 0.0
    rate_total: float = 0.0
    nmse_db: float = math.nan
    nonzero: int = 0
    wall_time: float = 0.0
    seed: int = 0
    variant: str = ""


RESULT_COLUMNS = [f.name for f in fields(ResultRow)]


class ResultTable:
    def __init__(self, rows: Optional[List[ResultRow]] = None):
        self.rows: List[ResultRow] = list(rows or [])

    def add(self, row: ResultRow):
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def where(self, **criteria) -> List[ResultRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in criteria.items())]

    def write_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                                 for k, v in asdict(row).items()})
        logger.info(f"Wrote {len(self.rows)} result rows to {path}")
        return path

    @classmethod
    def read_csv(cls, path: Path) -> "ResultTable":
        path = Path(path)
        try:
            with open(path, newline="", encoding="utf-8") as f:
                reader = csv.DictReader(f)
                if reader.fieldnames != RESULT_COLUMNS:
                    raise ConfigError(f"{path} does not have the result-table columns")
                rows = [_parse_row(r) for r in reader]
        except ConfigError:
            raise
        except (KeyError, ValueError) as e:
            raise ConfigError(f"malformed result table {path}: {e}") from e
        except OSError as e:
            raise ConfigError(f"cannot read result table {path}: {e}") from e
        return cls(rows)


def _parse_row(raw: Dict[str, str]) -> ResultRow:
    def opt_int(v):
        return None if v == "" else int(v)

    return ResultRow(
        experiment=raw["experiment"],
        mode=raw["mode"],
        lam=float(raw["lam"]),
        interval=opt_int(raw["interval"]),
        n_bins=opt_int(raw["n_bins"]),
        rate_latent=float(raw["rate_latent"]),
        rate_update=float(raw["rate_update"]),
        rate_total=float(raw["rate_total"]),
        nmse_db=float(raw["nmse_db"]),
        nonzero=int(raw["nonzero"]),
        wall_time=float(raw["wall_time"]),
        seed=int(raw["seed"]),
        variant=raw["variant"],
    )


def session_row(experiment: str, session: SessionResult, lam: float, seed: int, **extra) -> ResultRow:
    agg = session.aggregate
    return ResultRow(
        experiment=experiment,
        mode=session.mode,
        lam=lam,
        rate_latent=agg.rate_latent,
        rate_update=agg.rate_update,
        rate_total=agg.rate_total,
        nmse_db=agg.nmse_db,
        nonzero=session.nonzero,
        wall_time=session.wall_time,
        seed=seed,
        **extra,
    )


def _pool_map(workers: int, fn: Callable, cells: Sequence) -> List:
    """Run independent cells, in a process pool when workers > 1; results keep cell order."""
    if workers <= 1 or len(cells) <= 1:
        return [fn(cell) for cell in cells]
    with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
        return list(pool.map(fn, cells))


def _load(spec: ExperimentSpec, name: str) -> CsiDataset:
    path = spec.data_path(name)
    if not path.exists():
        raise ConfigError(f"missing dataset {path}; run `gen` first or set data_dir")
    return ingest(path)


def _load_backbone(spec: ExperimentSpec) -> Tuple[CodecModel, str]:
    path = spec.checkpoint or spec.checkpoint_path(spec.ft_lambda)
    if not Path(path).exists():
        raise ConfigError(f"missing backbone checkpoint {path}; run `train` first")
    ckpt = ckpt_io.load(path)
    return ckpt.model(), ckpt.meta["sha256"]


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(spec: ExperimentSpec) -> Dict[str, Path]:
    """Base-environment train/val/test, shifted fine-tune/eval sets and a drifting stream."""
    logger.info("=== gen ===")
    base = spec.channel.model_copy(update={"seed": spec.seed})
    shifted = shift(base, spec.angle_shift, spec.spread_scale, spec.path_delta)
    shifted = shifted.model_copy(update={"seed": spec.seed + 1})

    backbone = normalize(generate(base, spec.backbone_samples))
    train, val, test = split(backbone, (0.4, 0.4, 0.2), spec.seed)
    target = normalize(generate(shifted, spec.finetune_samples + spec.eval_samples))
    finetune = target.subset(np.arange(spec.finetune_samples), split="finetune")
    evaluation = target.subset(np.arange(spec.finetune_samples, len(target)), split="eval-stream")

    paths = {}
    for name, dataset in (("train", train), ("val", val), ("test", test),
                          ("finetune", finetune), ("eval", evaluation)):
        paths[name] = dataset.write(spec.data_path(name))
    if spec.stream_samples:
        stream = normalize(scene_stream(shifted, spec.stream_samples, spec.drift_per_scene))
        paths["stream"] = stream.write(spec.data_path("stream"))

    r_base, r_shift = correlation_matrix(backbone), correlation_matrix(target)
    stats = {
        "base_config": base.model_dump(),
        "shifted_config": shifted.model_dump(),
        "dominant_eigen_fraction": {"base": dominant_eigen_fraction(backbone),
                                    "shifted": dominant_eigen_fraction(target)},
        "correlation_distance": float(np.linalg.norm(r_base - r_shift) / np.linalg.norm(r_base)),
        "files": {name: str(p) for name, p in paths.items()},
    }
    manifest = spec.data_path("gen_manifest").with_suffix(".json")
    manifest.write_text(json.dumps(stats, indent=2))
    logger.info(f"Shift statistics: correlation distance {stats['correlation_distance']:.4f}")
    return paths


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@dataclass
class TrainCell:
    lam: float
    spec: ExperimentSpec
    train: CsiDataset
    val: CsiDataset
    test: CsiDataset


def _train_cell(cell: TrainCell) -> Tuple[ResultRow, str]:
    spec, config = cell.spec, cell.spec.train_config(cell.lam)
    best_path, last_path = spec.checkpoint_path(cell.lam), spec.checkpoint_path(cell.lam, last=True)
    adam, start_epoch, best_val = None, 0, math.inf
    if spec.resume and last_path.exists():
        last = ckpt_io.load(last_path)
        model, adam = last.model(), last.adam
        start_epoch, best_val = int(last.meta["epoch"]), float(last.meta["best_val"])
        logger.info(f"Resuming lambda={cell.lam:g} from epoch {start_epoch}")
    else:
        model = build_model(spec.seed, cell.train.shape, spec.codec)

    started = time.perf_counter()
    result = train_backbone(cell.train, cell.val, config, model, adam, start_epoch, best_val)
    meta = {"lambda": cell.lam, "seed": spec.seed, "train_sha256": cell.train.fingerprint()}
    if start_epoch == 0 or result.best_epoch > start_epoch or not best_path.exists():
        ckpt_io.save(ckpt_io.Checkpoint.from_model(result.model, {**meta, "epoch": result.best_epoch}), best_path)
    ckpt_io.save(
        ckpt_io.Checkpoint.from_model(
            result.last, {**meta, "epoch": result.epochs_run, "best_val": result.best_val}, result.adam
        ),
        last_path,
    )
    best = ckpt_io.load(best_path).model()
    session = evaluate_no_ft(best, cell.test)
    session.wall_time = time.perf_counter() - started
    return session_row(f"train-lam{cell.lam:g}", session, cell.lam, spec.seed, variant="backbone"), str(best_path)


def cmd_train(spec: ExperimentSpec) -> ResultTable:
    logger.info(f"=== train: lambdas {spec.lambdas} ===")
    train, val, test = _load(spec, "train"), _load(spec, "val"), _load(spec, "test")
    cells = [TrainCell(lam, spec, train, val, test) for lam in spec.lambdas]
    table = ResultTable()
    for row, path in _pool_map(spec.workers, _train_cell, cells):
        table.add(row)
        logger.info(f"Checkpoint {path}: rate={row.rate_total:.4f} nmse={row.nmse_db:.2f} dB")
    table.write_csv(spec.out / "tables" / "train.csv")
    return table


# ---------------------------------------------------------------------------
# finetune
# ---------------------------------------------------------------------------

@dataclass
class SessionCell:
    experiment: str
    mode: str
    config: TrainConfig
    model: CodecModel
    ft_set: CsiDataset
    eval_set: CsiDataset
    seed: int
    out_dir: Optional[Path] = None
    checkpoint_sha256: Optional[str] = None
    extra: Optional[dict] = None


def _session_cell(cell: SessionCell) -> ResultRow:
    session = run_session(cell.model, cell.ft_set, cell.eval_set, cell.config, cell.mode)
    extra = dict(cell.extra or {})
    if cell.out_dir is not None:
        files = []
        for i, stream in enumerate(session.bitstreams):
            files.append(str(stream.write(cell.out_dir / f"part{i:03d}.nbit")))
        tuned = CodecModel(session.phi, session.theta, cell.model.config, cell.model.csi_shape)
        ckpt_io.save(ckpt_io.Checkpoint.from_model(tuned, {"mode": cell.mode}), cell.out_dir / "model.ckpt")
        np.save(cell.out_dir / "reconstruction.npy", session.reconstructions)
        write_manifest(
            session_manifest(session, cell.config, cell.checkpoint_sha256, files,
                             {"eval_sha256": cell.eval_set.fingerprint(),
                              "finetune_sha256": cell.ft_set.fingerprint()}),
            cell.out_dir / "manifest.json",
        )
    return session_row(cell.experiment, session, cell.config.lam, cell.seed, **extra)


def cmd_finetune(spec: ExperimentSpec) -> ResultTable:
    """No-FT / EO / FM / GA on the shifted environment, plus the in-distribution reference."""
    logger.info(f"=== finetune: modes {spec.modes} ===")
    model, sha = _load_backbone(spec)
    ft_set, eval_set, test = _load(spec, "finetune"), _load(spec, "eval"), _load(spec, "test")
    counts = param_counts(model.phi, model.theta)
    logger.info(f"Trainable parameters: EO {counts['encoder_only']}, FM/GA {counts['full_model']}")

    table = ResultTable()
    reference = evaluate_no_ft(model, test)
    table.add(session_row("finetune-in_distribution", reference, spec.ft_lambda, spec.seed, variant="in_distribution"))

    cells = [
        SessionCell(f"finetune-{mode}", mode, spec.finetune_config(mode=_config_mode(mode)), model,
                    ft_set, eval_set, spec.seed, spec.out / "sessions" / mode, sha, {"variant": "shifted"})
        for mode in spec.modes
    ]
    for row in _pool_map(spec.workers, _session_cell, cells):
        table.add(row)
    table.write_csv(spec.out / "tables" / "finetune.csv")
    return table


def _config_mode(mode: str) -> str:
    return "encoder_only" if mode == "no_ft" else mode


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------

def cmd_decode(
    bitstreams: List[Path],
    checkpoint: Path,
    out: Path,
    quantizer: UpdateQuantizer = UpdateQuantizer(),
    prior: UpdatePriorConfig = UpdatePriorConfig(),
    reference: Optional[Path] = None,
) -> Tuple[Path, Optional[float]]:
    """Standalone decoder: theta0 checkpoint + bitstreams -> reconstructed CSIBIN."""
    logger.info(f"=== decode: {len(bitstreams)} bitstream(s) with {checkpoint} ===")
    model = ckpt_io.load(checkpoint).model()
    if model.csi_shape is None:
        raise ConfigError(f"checkpoint {checkpoint} does not record the CSI shape")
    streams = [read_bitstream(p) for p in bitstreams]
    recon = decode_session(streams, model.theta, model.config, model.csi_shape,
                           quantizer, make_prior(prior, quantizer))
    dataset = CsiDataset(recon, split="decoded", normalized=False, meta={"source": [str(p) for p in bitstreams]})
    path = dataset.write(out)
    nmse = None
    if reference is not None:
        ref = ingest(reference)
        nmse = nmse_db(ref.samples, recon)
        logger.info(f"Decoded NMSE against {reference}: {nmse:.4f} dB")
    return path, nmse


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

@dataclass
class IntervalCell:
    interval: int
    spec: ExperimentSpec
    model: CodecModel
    stream: CsiDataset


def _interval_cell(cell: IntervalCell) -> ResultRow:
    started = time.perf_counter()
    config = cell.spec.finetune_config(mode="full_model")
    sessions = schedule(cell.stream, cell.interval, config, cell.model, cell.spec.sweep_ft_samples)
    agg = schedule_aggregate(sessions)
    return ResultRow(
        experiment=f"sweep-interval-{cell.interval}",
        mode="full_model",
        lam=config.lam,
        interval=cell.interval,
        rate_latent=agg.rate_latent,
        rate_update=agg.rate_update,
        rate_total=agg.rate_total,
        nmse_db=agg.nmse_db,
        nonzero=int(np.median([s.nonzero for s in sessions])) if sessions else 0,
        wall_time=time.perf_counter() - started,
        seed=cell.spec.seed,
        variant=f"{len(sessions)} sessions",
    )


def ablation_variants(spec: ExperimentSpec) -> Dict[str, TrainConfig]:
    base = spec.finetune_config(mode="full_model")
    return {
        "spike_slab": base,
        "uniform": base.model_copy(update={"prior": base.prior.model_copy(update={"kind": "uniform"})}),
        "gaussian": base.model_copy(update={"prior": base.prior.model_copy(update={"kind": "gaussian"})}),
        "rd_only": base.model_copy(update={"rdm_regularize": False}),
    }


def cmd_sweep(spec: ExperimentSpec, kind: str) -> ResultTable:
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"unknown sweep '{kind}'; expected one of {list(SWEEP_KINDS)}")
    logger.info(f"=== sweep: {kind} ===")
    model, sha = _load_backbone(spec)
    table = ResultTable()

    if kind == "interval":
        stream = _load(spec, "stream")
        cells = [IntervalCell(i, spec, model, stream) for i in spec.intervals]
        rows = _pool_map(spec.workers, _interval_cell, cells)
    else:
        ft_set, eval_set = _load(spec, "finetune"), _load(spec, "eval")
        if kind == "n_bins":
            base = spec.finetune_config(mode="full_model")
            cells = [
                SessionCell(
                    f"sweep-n_bins-{n}", "full_model",
                    base.model_copy(update={"quantizer": base.quantizer.model_copy(update={"n_bins": n})}),
                    model, ft_set, eval_set, spec.seed, None, sha,
                    {"n_bins": n, "variant": f"{math.log2(n):g}-bit resolution"},
                )
                for n in spec.n_bins
            ]
        else:
            cells = [
                SessionCell(f"sweep-ablation-{name}", "full_model", config, model, ft_set, eval_set,
                            spec.seed, spec.out / "sessions" / f"ablation_{name}", sha, {"variant": name})
                for name, config in ablation_variants(spec).items()
            ]
        rows = _pool_map(spec.workers, _session_cell, cells)

    for row in rows:
        table.add(row)
    table.write_csv(spec.out / "tables" / f"sweep_{kind}.csv")
    return table


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------

def cmd_plot(tables: List[Path], out: Path, manifests: Optional[List[Path]] = None) -> List[Path]:
    """RD curves, rate breakdown bars, interval curves and non-zero-update trajectories."""
    logger.info(f"=== plot: {len(tables)} table(s), {len(manifests or [])} manifest(s) ===")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    figures: List[plot.Figure] = []

    for table_path in tables:
        table = ResultTable.read_csv(table_path)
        stem = Path(table_path).stem
        by_mode: Dict[str, List[Tuple[float, float]]] = {}
        for row in table:
            by_mode.setdefault(f"{row.mode}/{row.variant}" if row.variant else row.mode, []).append(
                (row.rate_total, row.nmse_db)
            )
        figures.append(plot.line_figure(
            f"{stem}_rd", f"RD ({stem})", "rate [bits / element]", "NMSE [dB]",
            [plot.Series(label, sorted(points)) for label, points in by_mode.items()],
        ))
        figures.append(plot.bar_figure(
            f"{stem}_rate_breakdown", f"Rate breakdown ({stem})", "rate [bits / element]",
            [row.experiment for row in table],
            {"latent": [row.rate_latent for row in table], "update": [row.rate_update for row in table]},
        ))
        with_interval = [row for row in table if row.interval is not None]
        if with_interval:
            with_interval.sort(key=lambda r: r.interval)
            figures.append(plot.line_figure(
                f"{stem}_interval", f"Fine-tuning interval ({stem})", "interval [samples]", "value",
                [
                    plot.Series("rate_total", [(r.interval, r.rate_total) for r in with_interval]),
                    plot.Series("rate_update", [(r.interval, r.rate_update) for r in with_interval]),
                    plot.Series("nmse_db", [(r.interval, r.nmse_db) for r in with_interval]),
                ],
            ))

    trajectories = []
    for manifest_path in manifests or []:
        try:
            manifest = json.loads(Path(manifest_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read session manifest {manifest_path}: {e}") from e
        points = [(h["epoch"], h["nonzero"]) for h in manifest.get("history", []) if h.get("nonzero") is not None]
        if points:
            trajectories.append(plot.Series(Path(manifest_path).parent.name, points))
    if trajectories:
        figures.append(plot.line_figure("nonzero_updates", "Non-zero quantized updates", "epoch",
                                        "non-zero updates", trajectories))

    written = [plot.write_svg(figure, out / f"{figure.name}.svg") for figure in figures]
    written.append(plot.write_points_csv(figures, out / "plotted_points.csv"))
    return written
