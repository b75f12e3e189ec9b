"""Smoke test for the mfglab extension.

Build and install first:  pip install --no-build-isolation -e crates/py
Then run:                 python -m pytest python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import pytest

import mfglab

SMALL = """
seed = 3
[grid]
nx = [17]
nt = 17
[weights]
lambdas = [1.0]
s_values = [2.0, 4.0]
[ensemble]
members = 3
[state]
refine = false
"""


def test_grid_properties():
    g = mfglab.Grid([33], 17)
    assert g.dim == 1
    assert g.h == [1.0 / 32]
    assert g.tau == 1.0 / 16
    assert g.k0 == 8
    assert len(g.points()) == 33


def test_even_time_count_is_rejected():
    with pytest.raises(ValueError, match="nt"):
        mfglab.Grid([17], 16)


def test_weight_identities_pass():
    report = mfglab.Grid([33], 33).weight_identities(1.0, 8.0)
    assert report["checks"]
    assert all(c["passed"] for c in report["checks"])


def test_exact_data_recovers_sources():
    case = mfglab.Case.from_config(SMALL, seed=3)
    res = case.reconstruct()
    assert res["converged"]
    assert res["errors"]["rel_f"] < 1e-6
    f_oracle, _ = case.oracle()
    assert max(abs(a - b) for a, b in zip(f_oracle, case.f)) < 1e-9


def test_sweep_slope_near_one():
    case = mfglab.Case.from_config(SMALL, seed=3)
    rep = case.stability_sweep([1e-3, 3e-3, 1e-2, 3e-2, 1e-1], [0, 1, 2])
    assert 0.8 <= rep["fit"]["slope"] <= 1.2


def test_validate_config_lists_problems():
    problems = mfglab.validate_config("bogus = 1\n[grid]\nnt = 64\n")
    assert any(p.startswith("bogus") for p in problems)
    assert mfglab.validate_config(SMALL) == []


def test_run_experiment_is_deterministic():
    with tempfile.TemporaryDirectory() as tmp:
        a = mfglab.run_experiment("state-det", str(Path(tmp) / "a"), SMALL)
        b = mfglab.run_experiment("state-det", str(Path(tmp) / "b"), SMALL)
        assert a["content_hash"] == b["content_hash"]
        assert (Path(tmp) / "a" / "report.json").is_file()
    mem = mfglab.execute_experiment("verify-weights", SMALL)
    header = mem["files"]["weights.csv"].splitlines()[0]
    assert header == "lambda,s,identity,value,tolerance,passed"


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
