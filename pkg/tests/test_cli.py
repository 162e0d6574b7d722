import numpy as np
import pytest

from msinv.cli import main, scaling_benchmark
from msinv.config import parse_config

TOY = """
n1 = 4
n2 = 4
n3 = 4
b1 = 2
b2 = 2
b3 = 2
blocks = 1:3,1:3,1:3=0.1
background = 0.01
sources_x = 2
sources_y = 2
receivers_x = 3
receivers_y = 3
families = lagrange,skeleton
pca_rank = 0
noise = 0.01
seed = 7
alpha = 1e-8
max_gn = 2
max_cg = 5
modes = full
"""


def write_config(tmp_path, text, **overrides):
    lines = [text]
    for k, v in overrides.items():
        lines.append(f"{k} = {v}")
    path = tmp_path / "exp.cfg"
    path.write_text("\n".join(lines))
    return path


def test_forward_smoke(tmp_path):
    cfg = write_config(tmp_path, TOY, out=tmp_path / "fwd")
    assert main(["forward", "--config", str(cfg)]) == 0
    out = tmp_path / "fwd"
    assert (out / "model_true.vtk").exists()
    assert (out / "d_obs.csv").exists()
    assert (out / "metrics.txt").exists()


def test_invert_full_smoke_and_metrics(tmp_path):
    cfg = write_config(tmp_path, TOY, out=tmp_path / "run")
    assert main(["invert", "--config", str(cfg)]) == 0
    out = tmp_path / "run"
    assert (out / "trace_full.csv").exists()
    assert (out / "model_full.vtk").exists()
    text = (out / "metrics.txt").read_text()
    assert "full.error_vs_true" in text
    assert "full.error_vs_full = 0" in text
    # trace row count: initial row plus at most max_gn accepted rows
    rows = (out / "trace_full.csv").read_text().splitlines()
    assert 2 <= len(rows) <= 1 + 1 + 2


def test_invert_modes_and_determinism(tmp_path):
    cfg = write_config(tmp_path, TOY, out=tmp_path / "a",
                       modes="full,ms-fixed,ms-adaptive", max_gn=2)
    assert main(["invert", "--config", str(cfg)]) == 0
    cfg2 = write_config(tmp_path, TOY, out=tmp_path / "b",
                        modes="full,ms-fixed,ms-adaptive", max_gn=2)
    assert main(["invert", "--config", str(cfg2)]) == 0

    for name in ("metrics.txt", "trace_full.csv", "trace_ms_fixed.csv",
                 "trace_ms_adaptive.csv", "model_ms_adaptive.vtk", "d_obs.csv"):
        a = (tmp_path / "a" / name).read_text().replace(str(tmp_path / "a"), "OUT")
        b = (tmp_path / "b" / name).read_text().replace(str(tmp_path / "b"), "OUT")
        assert a == b, f"{name} differs between identical runs"

    text = (tmp_path / "a" / "metrics.txt").read_text()
    assert "ms_fixed.error_vs_full" in text
    assert "ms_adaptive.error_vs_full" in text


def test_cli_mode_override_and_bad_config(tmp_path):
    cfg = write_config(tmp_path, TOY, out=tmp_path / "o")
    assert main(["invert", "--config", str(cfg), "--mode", "ms-fixed"]) == 0
    assert (tmp_path / "o" / "trace_ms_fixed.csv").exists()
    assert not (tmp_path / "o" / "trace_full.csv").exists()

    bad = tmp_path / "bad.cfg"
    bad.write_text("n1 = 4\nn2 = 4\nn3 = 4\nbogus = 1\n")
    assert main(["invert", "--config", str(bad)]) == 1


def test_scaling_benchmark_verifies_and_reports(tmp_path):
    cfg = parse_config(TOY + f"\nout = {tmp_path / 'bench'}\n")
    rows = scaling_benchmark(cfg, [1, 2], repeats=1)
    assert rows[0]["workers"] == 1 and rows[1]["workers"] == 2
    assert rows[0]["speedup_basis"] == 1.0
    for row in rows:
        for op_name in ("basis", "dSv", "dStw"):
            assert row[op_name] > 0


def test_bench_cli_writes_table(tmp_path):
    cfg = write_config(tmp_path, TOY, out=tmp_path / "bench")
    assert main(["bench", "--config", str(cfg), "--workers", "2"]) == 0
    lines = (tmp_path / "bench" / "bench.csv").read_text().splitlines()
    assert lines[0].startswith("workers,basis_seconds")
    assert len(lines) == 3   # header + workers 1 and 2
