"""HTTP service wrapping the experiment engine.

Each endpoint mirrors one CLI command; requests carry the experiment
configuration and responses return the result table plus the paths of
the emitted reports. The CLI talks to this app in-process by default,
or over the network when pointed at a running server.
"""

from __future__ import annotations

import os
import time

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .errors import CheckpointError, QuantKanError
from .experiments import (DEFAULT_GRIDS, ExperimentConfig, ResultRow,
                          ResultTable, emit_report, run, sweep_bits,
                          sweep_grid)

app = FastAPI(title="quantkan", version=__version__)


class ExperimentRequest(BaseModel):
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
    act_observer: str = "minmax"
    ptq_iters: int = 800


class SweepBitsRequest(ExperimentRequest):
    tokens: list[str] | None = None


class SweepGridRequest(ExperimentRequest):
    grids: list[int] | None = Field(default=None,
                                    description=f"default {DEFAULT_GRIDS}")


class ResultRowModel(BaseModel):
    architecture: str
    method: str
    bits: str
    grid: int
    accuracy: float | None
    runtime_s: float
    status: str


class RunResponse(BaseModel):
    rows: list[ResultRowModel]
    csv_path: str
    md_path: str
    elapsed_s: float


def _to_config(req: ExperimentRequest, command: str) -> ExperimentConfig:
    fields = req.model_dump(exclude={"tokens", "grids"})
    try:
        return ExperimentConfig(command=command, **fields)
    except QuantKanError as exc:
        raise HTTPException(status_code=400, detail=str(exc))


def _respond(table: ResultTable, report_base: str,
             started: float) -> RunResponse:
    csv_path, md_path = report_base + ".csv", report_base + ".md"
    rows = [ResultRowModel(**{
        "architecture": r.architecture, "method": r.method, "bits": r.bits,
        "grid": r.grid, "accuracy": r.accuracy, "runtime_s": r.runtime_s,
        "status": r.status}) for r in table.sorted_rows()]
    return RunResponse(rows=rows, csv_path=csv_path, md_path=md_path,
                       elapsed_s=time.perf_counter() - started)


def _execute(command: str, req: ExperimentRequest) -> RunResponse:
    started = time.perf_counter()
    cfg = _to_config(req, command)
    try:
        if command == "sweep-bits":
            table = sweep_bits(cfg, tokens=req.tokens)
        elif command == "sweep-grid":
            table = sweep_grid(cfg, grids=req.grids)
        else:
            table = run(cfg)
    except CheckpointError as exc:
        raise HTTPException(status_code=404, detail=str(exc))
    except QuantKanError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return _respond(table, os.path.join(cfg.cell_dir(), "report"), started)


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/train", response_model=RunResponse)
def train_endpoint(req: ExperimentRequest):
    return _execute("train", req)


@app.post("/qat", response_model=RunResponse)
def qat_endpoint(req: ExperimentRequest):
    return _execute("qat", req)


@app.post("/ptq", response_model=RunResponse)
def ptq_endpoint(req: ExperimentRequest):
    return _execute("ptq", req)


@app.post("/eval", response_model=RunResponse)
def eval_endpoint(req: ExperimentRequest):
    return _execute("eval", req)


@app.post("/sweep-bits", response_model=RunResponse)
def sweep_bits_endpoint(req: SweepBitsRequest):
    return _execute("sweep-bits", req)


@app.post("/sweep-grid", response_model=RunResponse)
def sweep_grid_endpoint(req: SweepGridRequest):
    return _execute("sweep-grid", req)
