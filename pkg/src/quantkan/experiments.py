"""Experiment orchestration: single runs, bit sweeps, grid sweeps, reports.

Each experiment writes into ``out/<kind>-<digest>/`` where the digest
hashes the configuration, so sweeps are resumable and PTQ cells can find
the pretrained checkpoint they depend on. Reports are emitted twice: a
machine CSV with deterministic payload (no timing) and a Markdown table
for humans that includes runtimes.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import (TWO_GAUSSIANS, Dataset, load_checkpoint, load_mnist,
                   make_synthetic, save_checkpoint)
from .errors import CheckpointError, ConfigError, QuantKanError
from .layers import BSPLINE, GRAM, RBF, BasisConfig, build_kan_mlp
from .ptq import MINMAX, PERCENTILE, PTQ_METHODS, run_ptq
from .qat import (LOG_HEADER, TrainConfig, evaluate, train, wrap_model)
from .quantizers import QAT_METHODS, parse_bit_config
from .tensor import Rng

COMMANDS = ("train", "qat", "ptq", "eval", "sweep-bits", "sweep-grid")
MODELS = {"kan_mlp": BSPLINE, "fastkan_mlp": RBF, "kagn_mlp": GRAM}
DATASETS = ("mnist", "synthetic")

QAT_SWEEP_TOKENS = ["w32a32", "w8a8", "w4a8", "w4a4", "w3a4", "w3a3",
                    "w2a4", "w2a2"]
PTQ_SWEEP_TOKENS = ["w4a32", "w3a32", "w2a32", "w4a8", "w4a4", "w2a4"]
DEFAULT_GRIDS = [3, 5, 7]

SYNTH_TRAIN_N = 2000
SYNTH_TEST_N = 1000


@dataclass
class ExperimentConfig:
    command: str = "train"
    model: str = "kan_mlp"
    dataset: str = "mnist"
    method: str = "lsq"
    bits: str = "w4a4"
    grid: int = 5
    order: int = 3
    calib: int = 512
    seed: int = 0
    out: str = "runs"
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    lr_schedule: str = "cosine"
    hidden: int = 64
    data_root: str | None = None
    act_observer: str = MINMAX
    ptq_iters: int = 800

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.model not in MODELS:
            raise ConfigError(
                f"unknown model {self.model!r}; choose from {sorted(MODELS)}")
        if self.dataset not in DATASETS:
            raise ConfigError(
                f"unknown dataset {self.dataset!r}; choose from {DATASETS}")
        if self.act_observer not in (MINMAX, PERCENTILE):
            raise ConfigError(f"unknown activation observer "
                              f"{self.act_observer!r}")
        parse_bit_config(self.bits)

    def basis(self) -> BasisConfig:
        return BasisConfig(kind=MODELS[self.model], grid_size=self.grid,
                           spline_order=self.order, degree=self.order)

    def train_fields(self) -> dict:
        """Fields that identify the full-precision training run."""
        keys = ("model", "dataset", "grid", "order", "seed", "epochs",
                "batch_size", "learning_rate", "optimizer", "lr_schedule",
                "hidden")
        return {k: getattr(self, k) for k in keys}

    def digest(self, fields: dict | None = None) -> str:
        payload = fields if fields is not None else {
            k: v for k, v in asdict(self).items()
            if k not in ("out", "data_root")}
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def train_dir(self) -> str:
        return os.path.join(self.out, f"train-{self.digest(self.train_fields())}")

    def cell_dir(self) -> str:
        return os.path.join(self.out, f"{self.command}-{self.digest()}")


@dataclass
class ResultRow:
    architecture: str
    method: str
    bits: str
    grid: int
    accuracy: float | None  # percent, [0, 100]
    runtime_s: float
    status: str = "ok"

    def key(self):
        cfg = parse_bit_config(self.bits)
        return (self.method, -cfg.weight_bits, -cfg.act_bits, self.grid)


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)

    def sorted_rows(self) -> list[ResultRow]:
        return sorted(self.rows, key=lambda r: r.key())


CSV_HEADER = "architecture,method,bits,grid,accuracy,status"
MD_HEADER = ("| architecture | method | bits | grid | accuracy (%) | "
             "runtime (s) | status |")


def emit_report(table: ResultTable, base_path: str) -> tuple[str, str]:
    """Write ``<base>.csv`` (deterministic payload) and ``<base>.md``.

    The CSV omits runtimes so repeated runs of the same seed are
    byte-identical; the Markdown table carries them for humans.
    """
    if not table.rows:
        raise ConfigError("refusing to emit an empty report")
    rows = table.sorted_rows()
    csv_path, md_path = base_path + ".csv", base_path + ".md"
    os.makedirs(os.path.dirname(os.path.abspath(csv_path)), exist_ok=True)
    lines = [CSV_HEADER]
    for r in rows:
        acc = f"{r.accuracy:.2f}" if r.accuracy is not None else ""
        lines.append(f"{r.architecture},{r.method},{r.bits},{r.grid},{acc},"
                     f"{r.status}")
    with open(csv_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    md = [MD_HEADER, "|" + "---|" * 7]
    for r in rows:
        acc = f"{r.accuracy:.2f}" if r.accuracy is not None else "-"
        md.append(f"| {r.architecture} | {r.method} | {r.bits} | {r.grid} | "
                  f"{acc} | {r.runtime_s:.1f} | {r.status} |")
    with open(md_path, "w") as f:
        f.write("\n".join(md) + "\n")
    return csv_path, md_path


def load_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "mnist":
        return load_mnist(cfg.data_root)
    rng = Rng(cfg.seed)
    train_set = make_synthetic(TWO_GAUSSIANS, SYNTH_TRAIN_N, rng.split(0))
    test_set = make_synthetic(TWO_GAUSSIANS, SYNTH_TEST_N, rng.split(1),
                              normalization=train_set.normalization,
                              split="test")
    return train_set, test_set


def model_widths(cfg: ExperimentConfig, data: Dataset) -> list[int]:
    return [data.num_features, cfg.hidden if cfg.dataset == "mnist" else 16,
            data.num_classes]


def build_model(cfg: ExperimentConfig, data: Dataset):
    return build_kan_mlp(model_widths(cfg, data), cfg.basis(), Rng(cfg.seed))


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                       learning_rate=cfg.learning_rate,
                       optimizer=cfg.optimizer, seed=cfg.seed,
                       lr_schedule=cfg.lr_schedule)


def _write_train_log(log, path: str):
    with open(path, "w") as f:
        f.write(LOG_HEADER + "\n")
        for row in log:
            f.write(row.csv() + "\n")


def ensure_fp_checkpoint(cfg: ExperimentConfig, train_set, test_set) -> str:
    """Train the full-precision model if its checkpoint is absent."""
    ckpt = os.path.join(cfg.train_dir(), "checkpoint.qkpt")
    if os.path.exists(ckpt):
        return ckpt
    os.makedirs(cfg.train_dir(), exist_ok=True)
    model = build_model(cfg, train_set)
    log = train(model, train_set, train_config(cfg))
    _write_train_log(log, os.path.join(cfg.train_dir(), "train_log.csv"))
    save_checkpoint(model, ckpt, extras={
        "dataset": cfg.dataset,
        "normalization": list(train_set.normalization),
        "seed": cfg.seed,
    })
    return ckpt


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        digest.update(f.read())
    return digest.hexdigest()


def run(cfg: ExperimentConfig) -> ResultTable:
    """Execute one command and write its reports under the cell directory."""
    start = time.perf_counter()
    train_set, test_set = load_dataset(cfg)
    cell = cfg.cell_dir()
    os.makedirs(cell, exist_ok=True)

    if cfg.command == "train":
        ckpt = os.path.join(cfg.train_dir(), "checkpoint.qkpt")
        if os.path.exists(ckpt):
            os.remove(ckpt)  # an explicit train request recomputes
        ensure_fp_checkpoint(cfg, train_set, test_set)
        model = load_checkpoint(ckpt)
        accuracy = evaluate(model, test_set)
        method, bits = "fp", "w32a32"
    elif cfg.command == "qat":
        if cfg.method not in QAT_METHODS:
            raise ConfigError(
                f"{cfg.method!r} is not a QAT method; choose from "
                f"{QAT_METHODS}")
        model = build_model(cfg, train_set)
        wrapped = wrap_model(model, cfg.method, parse_bit_config(cfg.bits),
                             Rng(cfg.seed))
        log = train(wrapped, train_set, train_config(cfg))
        _write_train_log(log, os.path.join(cell, "train_log.csv"))
        save_checkpoint(wrapped, os.path.join(cell, "checkpoint.qkpt"))
        accuracy = evaluate(wrapped, test_set)
        method, bits = cfg.method, cfg.bits
    elif cfg.command == "ptq":
        if cfg.method not in PTQ_METHODS:
            raise ConfigError(
                f"{cfg.method!r} is not a PTQ method; choose from "
                f"{PTQ_METHODS}")
        ckpt = os.path.join(cfg.train_dir(), "checkpoint.qkpt")
        if not os.path.exists(ckpt):
            raise CheckpointError(
                f"no pretrained checkpoint at {ckpt}; run "
                f"`quantkan train` with the same model/seed settings first")
        model = load_checkpoint(ckpt)
        qmodel, report = run_ptq(
            model, cfg.method, parse_bit_config(cfg.bits), cfg.calib,
            train_set, eval_data=test_set, iters=cfg.ptq_iters,
            act_observer=cfg.act_observer)
        with open(os.path.join(cell, "ptq_report.csv"), "w") as f:
            f.write("\n".join(report.csv_rows()) + "\n")
        save_checkpoint(qmodel, os.path.join(cell, "checkpoint.qkpt"))
        accuracy = report.accuracy
        method, bits = cfg.method, cfg.bits
    elif cfg.command == "eval":
        ckpt = os.path.join(cfg.train_dir(), "checkpoint.qkpt")
        if not os.path.exists(ckpt):
            raise CheckpointError(
                f"no checkpoint at {ckpt}; run `quantkan train` first")
        model = load_checkpoint(ckpt)
        accuracy = evaluate(model, test_set)
        method, bits = "fp", "w32a32"
    else:
        raise ConfigError(
            f"{cfg.command} is a sweep; call sweep_bits or sweep_grid")

    row = ResultRow(architecture=cfg.model, method=method, bits=bits,
                    grid=cfg.grid, accuracy=100.0 * accuracy,
                    runtime_s=time.perf_counter() - start)
    table = ResultTable([row])
    emit_report(table, os.path.join(cell, "report"))
    return table


def _is_qat_method(method: str) -> bool:
    """Sweep routing: "uniform" exists in both families but sweeps treat
    it as the PTQ baseline; the five adaptive methods are QAT."""
    return method in QAT_METHODS and method not in PTQ_METHODS


def _chance_level(data: Dataset) -> float:
    return 1.0 / data.num_classes


def _cell_result_path(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.cell_dir(), "result.json")


def _load_cached_row(cfg: ExperimentConfig) -> ResultRow | None:
    path = _cell_result_path(cfg)
    if not os.path.exists(path):
        return None
    with open(path) as f:
        return ResultRow(**json.load(f))


def _store_row(cfg: ExperimentConfig, row: ResultRow):
    os.makedirs(cfg.cell_dir(), exist_ok=True)
    with open(_cell_result_path(cfg), "w") as f:
        json.dump(asdict(row), f, sort_keys=True)


def _run_cell(cfg: ExperimentConfig, fp_ckpt_hash: str | None) -> ResultRow:
    """One sweep cell with collapse retry and failure containment."""
    start = time.perf_counter()
    cached = _load_cached_row(cfg)
    if cached is not None:
        return cached
    try:
        train_set, test_set = load_dataset(cfg)
        if cfg.command == "ptq" and fp_ckpt_hash is not None:
            ckpt = os.path.join(cfg.train_dir(), "checkpoint.qkpt")
            if file_sha256(ckpt) != fp_ckpt_hash:
                raise CheckpointError(
                    f"checkpoint {ckpt} changed mid-sweep (hash mismatch)")
        table = run(cfg)
        row = table.rows[0]
        chance = _chance_level(test_set)
        if (row.accuracy is not None
                and row.accuracy <= 150.0 * chance
                and cfg.command == "qat"):
            # collapsed cell: retry once on a fresh seed, record both
            retry_cfg = replace(cfg, seed=cfg.seed + 1000)
            retry = run(retry_cfg).rows[0]
            first_acc = row.accuracy
            row = retry
            row.status = f"collapsed-retried(first={first_acc:.2f})"
            if retry.accuracy is not None and retry.accuracy <= 150.0 * chance:
                row.status = f"collapsed(first={first_acc:.2f})"
        row.runtime_s = time.perf_counter() - start
    except QuantKanError as exc:
        row = ResultRow(architecture=cfg.model, method=cfg.method,
                        bits=cfg.bits, grid=cfg.grid, accuracy=None,
                        runtime_s=time.perf_counter() - start,
                        status=f"error: {exc}")
    _store_row(cfg, row)
    return row


def sweep_bits(cfg: ExperimentConfig,
               tokens: list[str] | None = None) -> ResultTable:
    """One run per bit token; PTQ cells share the identical checkpoint."""
    is_qat = _is_qat_method(cfg.method)
    if tokens is None:
        tokens = QAT_SWEEP_TOKENS if is_qat else PTQ_SWEEP_TOKENS
    for token in tokens:
        parse_bit_config(token)
    fp_hash = None
    if not is_qat:
        train_set, test_set = load_dataset(cfg)
        ckpt = ensure_fp_checkpoint(cfg, train_set, test_set)
        fp_hash = file_sha256(ckpt)
    table = ResultTable()
    for token in tokens:
        cell_cfg = replace(cfg, command="qat" if is_qat else "ptq",
                           bits=token)
        table.rows.append(_run_cell(cell_cfg, fp_hash))
    out_dir = replace(cfg, command="sweep-bits").cell_dir()
    emit_report(table, os.path.join(out_dir, "report"))
    return table


def sweep_grid(cfg: ExperimentConfig,
               grids: list[int] | None = None) -> ResultTable:
    """Retrain (QAT) or retrain-and-requantize (PTQ) per grid size."""
    grids = grids if grids is not None else list(DEFAULT_GRIDS)
    is_qat = _is_qat_method(cfg.method)
    table = ResultTable()
    for grid in grids:
        cell_cfg = replace(cfg, command="qat" if is_qat else "ptq", grid=grid)
        fp_hash = None
        if not is_qat:
            train_set, test_set = load_dataset(cell_cfg)
            ckpt = ensure_fp_checkpoint(cell_cfg, train_set, test_set)
            fp_hash = file_sha256(ckpt)
        table.rows.append(_run_cell(cell_cfg, fp_hash))
    out_dir = replace(cfg, command="sweep-grid").cell_dir()
    emit_report(table, os.path.join(out_dir, "report"))
    return table
