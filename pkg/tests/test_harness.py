import os

import numpy as np
import pytest
from fastapi.testclient import TestClient

from quantkan.cli import main, parse_cli, read_config_file
from quantkan.errors import CheckpointError, ConfigError, ParseError
from quantkan.experiments import (ExperimentConfig, ResultRow, ResultTable,
                                  emit_report, run, sweep_bits, sweep_grid)
from quantkan.service import app


def fast_cfg(tmp_path, command="train", **overrides):
    base = dict(command=command, dataset="synthetic", method="lsq",
                bits="w4a4", epochs=2, seed=3, out=str(tmp_path / "runs"),
                calib=32, ptq_iters=60, learning_rate=3e-3)
    base.update(overrides)
    return ExperimentConfig(**base)


class TestParseCli:
    def test_populates_config(self):
        args = parse_cli(["qat", "--model", "kan_mlp", "--method", "lsq",
                          "--bits", "w4a4", "--seed", "1"])
        assert args.command == "qat"
        assert args.model == "kan_mlp" and args.method == "lsq"
        assert args.bits == "w4a4" and args.seed == 1
        assert args.grid == 5  # default fills the gaps

    def test_bad_bit_token_is_usage_error(self, capsys):
        assert main(["qat", "--bits", "w5a4"]) == 2
        assert "usage error" in capsys.readouterr().err

    def test_flag_overrides_config_file(self, tmp_path):
        cfg_file = tmp_path / "exp.cfg"
        cfg_file.write_text("seed=7\nepochs=4  # comment\n")
        args = parse_cli(["train", "--config", str(cfg_file), "--seed", "9"])
        assert args.seed == 9      # flag wins
        assert args.epochs == 4    # file fills the rest

    def test_config_file_rejects_unknown_keys(self, tmp_path):
        cfg_file = tmp_path / "exp.cfg"
        cfg_file.write_text("mystery=1\n")
        with pytest.raises(ParseError, match="unknown key"):
            read_config_file(str(cfg_file))


class TestRun:
    def test_train_on_separable_synthetic(self, tmp_path):
        cfg = fast_cfg(tmp_path, epochs=6)
        table = run(cfg)
        assert table.rows[0].accuracy >= 99.0
        assert os.path.exists(os.path.join(cfg.train_dir(), "checkpoint.qkpt"))
        assert os.path.exists(os.path.join(cfg.cell_dir(), "report.csv"))

    def test_ptq_before_train_gives_actionable_error(self, tmp_path):
        cfg = fast_cfg(tmp_path, command="ptq", method="uniform")
        with pytest.raises(CheckpointError, match="quantkan train"):
            run(cfg)

    def test_qat_bypass_matches_fp_train_exactly(self, tmp_path):
        fp = run(fast_cfg(tmp_path)).rows[0]
        qat = run(fast_cfg(tmp_path, command="qat", bits="w32a32")).rows[0]
        assert qat.accuracy == fp.accuracy

    def test_ptq_flow_and_report(self, tmp_path):
        run(fast_cfg(tmp_path))
        cfg = fast_cfg(tmp_path, command="ptq", method="uniform",
                       bits="w4a32")
        table = run(cfg)
        assert table.rows[0].accuracy is not None
        assert os.path.exists(os.path.join(cfg.cell_dir(), "ptq_report.csv"))

    def test_eval_reuses_checkpoint(self, tmp_path):
        fp = run(fast_cfg(tmp_path)).rows[0]
        ev = run(fast_cfg(tmp_path, command="eval")).rows[0]
        assert ev.accuracy == fp.accuracy

    def test_wrong_method_category_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="not a QAT method"):
            run(fast_cfg(tmp_path, command="qat", method="gptq"))
        run(fast_cfg(tmp_path))
        with pytest.raises(ConfigError, match="not a PTQ method"):
            run(fast_cfg(tmp_path, command="ptq", method="lsq"))


class TestSweeps:
    def test_default_qat_token_list_has_eight_rows(self, tmp_path):
        cfg = fast_cfg(tmp_path, command="sweep-bits", epochs=1)
        table = sweep_bits(cfg)
        assert len(table.rows) == 8

    def test_default_ptq_token_list_has_six_rows(self, tmp_path):
        cfg = fast_cfg(tmp_path, command="sweep-bits", method="uniform",
                       epochs=2)
        table = sweep_bits(cfg)
        assert len(table.rows) == 6

    def test_single_token_sweep_matches_direct_run(self, tmp_path):
        cfg = fast_cfg(tmp_path, command="sweep-bits", method="lsq")
        table = sweep_bits(cfg, tokens=["w4a4"])
        direct = run(fast_cfg(tmp_path, command="qat", method="lsq",
                              bits="w4a4"))
        assert table.rows[0].accuracy == direct.rows[0].accuracy

    def test_single_grid_sweep_matches_direct_run(self, tmp_path):
        cfg = fast_cfg(tmp_path, command="sweep-grid", method="uniform",
                       bits="w4a32")
        table = sweep_grid(cfg, grids=[5])
        direct = run(fast_cfg(tmp_path, command="ptq", method="uniform",
                              bits="w4a32", grid=5))
        assert table.rows[0].accuracy == direct.rows[0].accuracy

    def test_failed_cell_recorded_sweep_continues(self, tmp_path):
        cfg = fast_cfg(tmp_path, command="sweep-bits", method="uniform",
                       dataset="synthetic")
        # corrupt the checkpoint hash mid-sweep is hard to fake; instead
        # sweep PTQ tokens without a dataset large enough for calib
        cfg = fast_cfg(tmp_path, command="sweep-bits", method="uniform",
                       calib=10 ** 6)
        table = sweep_bits(cfg, tokens=["w4a32", "w3a32"])
        assert len(table.rows) == 2
        assert all(r.status.startswith("error") for r in table.rows)
        assert all(r.accuracy is None for r in table.rows)

    def test_sweep_cells_resume_from_cache(self, tmp_path):
        cfg = fast_cfg(tmp_path, command="sweep-bits", method="lsq", epochs=1)
        first = sweep_bits(cfg, tokens=["w4a4"])
        second = sweep_bits(cfg, tokens=["w4a4"])
        assert first.rows[0].accuracy == second.rows[0].accuracy
        # cached cell keeps its original runtime (not recomputed)
        assert first.rows[0].runtime_s == second.rows[0].runtime_s


class TestEmitReport:
    def make_table(self, n=3):
        rows = [ResultRow("kan_mlp", "lsq", "w4a4", 5, 90.0 + i, 1.5, "ok")
                for i in range(n)]
        return ResultTable(rows)

    def test_two_files_with_header(self, tmp_path):
        table = ResultTable([ResultRow("kan_mlp", "lsq", "w4a4", 5, 95.1234,
                                       2.0)])
        csv_path, md_path = emit_report(table, str(tmp_path / "report"))
        lines = open(csv_path).read().strip().split("\n")
        assert len(lines) == 2
        assert lines[0] == "architecture,method,bits,grid,accuracy,status"
        assert ",95.12," in lines[1]
        assert os.path.exists(md_path)

    def test_reemit_byte_identical(self, tmp_path):
        table = self.make_table()
        csv_path, _ = emit_report(table, str(tmp_path / "report"))
        first = open(csv_path, "rb").read()
        emit_report(table, str(tmp_path / "report"))
        assert open(csv_path, "rb").read() == first

    def test_rows_sorted_by_method_and_bits(self, tmp_path):
        rows = []
        for method in ("uniform", "gptq", "brecq", "adaround"):
            for bits in ("w2a4", "w4a32", "w3a32", "w4a4", "w2a32", "w4a8"):
                for grid in (3, 5):
                    rows.append(ResultRow("kan_mlp", method, bits, grid,
                                          50.0, 1.0))
        table = ResultTable(rows)
        csv_path, _ = emit_report(table, str(tmp_path / "report"))
        lines = open(csv_path).read().strip().split("\n")[1:]
        assert len(lines) == 48
        keys = [tuple(line.split(",")[1:4]) for line in lines]
        assert keys == sorted(keys, key=lambda k: (
            k[0],
            -int(k[1][1:].split("a")[0]),
            -int(k[1].split("a")[1]),
            int(k[2])))

    def test_empty_table_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            emit_report(ResultTable(), str(tmp_path / "report"))


class TestService:
    def payload(self, tmp_path, **overrides):
        base = dict(dataset="synthetic", method="lsq", bits="w4a4", epochs=2,
                    seed=3, out=str(tmp_path / "runs"), calib=32,
                    ptq_iters=60, learning_rate=3e-3)
        base.update(overrides)
        return base

    def test_health(self):
        with TestClient(app) as client:
            body = client.get("/health").json()
        assert body["status"] == "ok"

    def test_train_then_ptq_then_eval(self, tmp_path):
        with TestClient(app) as client:
            r = client.post("/train", json=self.payload(tmp_path, epochs=4))
            assert r.status_code == 200
            train_acc = r.json()["rows"][0]["accuracy"]
            assert train_acc >= 99.0
            r = client.post("/ptq", json=self.payload(
                tmp_path, epochs=4, method="uniform", bits="w4a32"))
            assert r.status_code == 200
            assert r.json()["rows"][0]["accuracy"] is not None
            r = client.post("/eval", json=self.payload(tmp_path, epochs=4))
            assert r.json()["rows"][0]["accuracy"] == train_acc

    def test_ptq_without_checkpoint_is_404(self, tmp_path):
        with TestClient(app) as client:
            r = client.post("/ptq", json=self.payload(tmp_path,
                                                      method="uniform"))
        assert r.status_code == 404
        assert "train" in r.json()["detail"]

    def test_bad_config_is_400(self, tmp_path):
        with TestClient(app) as client:
            r = client.post("/train", json=self.payload(tmp_path,
                                                        bits="w5a4"))
        assert r.status_code == 400

    def test_sweep_bits_endpoint(self, tmp_path):
        with TestClient(app) as client:
            r = client.post("/sweep-bits", json={
                **self.payload(tmp_path, epochs=1),
                "tokens": ["w4a4", "w8a8"]})
        assert r.status_code == 200
        body = r.json()
        assert len(body["rows"]) == 2
        assert os.path.exists(body["csv_path"])


class TestCliClient:
    def test_train_via_inprocess_client(self, tmp_path, capsys):
        code = main(["train", "--dataset", "synthetic", "--epochs", "2",
                     "--seed", "3", "--out", str(tmp_path / "runs"),
                     "--learning-rate", "3e-3"])
        out = capsys.readouterr().out
        assert code == 0
        assert "reports:" in out and "kan_mlp" in out

    def test_ptq_without_train_fails_with_message(self, tmp_path, capsys):
        code = main(["ptq", "--dataset", "synthetic", "--method", "uniform",
                     "--out", str(tmp_path / "runs")])
        err = capsys.readouterr().err
        assert code == 1
        assert "train" in err
