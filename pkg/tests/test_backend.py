import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from fedci import _kernels_py, kernels

ROOT = Path(__file__).resolve().parents[1]


def _env(**extra):
    env = {k: v for k, v in os.environ.items() if not k.startswith("FEDCI_")}
    env.update(extra)
    return env


def _backend(env):
    proc = subprocess.run(
        [sys.executable, "-c", "from fedci import kernels; print(kernels.BACKEND)"],
        capture_output=True, text=True, env=env, check=True,
    )
    return proc.stdout.strip()


def test_env_var_forces_python_fallback():
    assert _backend(_env(FEDCI_PURE_PYTHON="1")) == "python"


def test_default_backend_matches_extension():
    expect = "cython" if kernels._ext is not None else "python"
    assert kernels.BACKEND == expect == _backend(_env())


def test_event_table_backends_agree():
    if kernels._ext is None:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(0)
    time = np.sort(np.round(rng.exponential(size=500), 2))
    delta = rng.integers(0, 3, size=500)
    a = _kernels_py.event_table(time, delta, 2)
    b = kernels.event_table(time, delta, 2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_benchmark_script_runs():
    proc = subprocess.run(
        [sys.executable, str(ROOT / "benchmarks" / "bench_kernels.py"), "--sizes", "200", "--repeat", "1"],
        capture_output=True, text=True, env=_env(), check=True,
    )
    lines = proc.stdout.splitlines()
    assert any(line.startswith("cox_breslow") for line in lines)
    assert any(line.startswith("event_table") for line in lines)
