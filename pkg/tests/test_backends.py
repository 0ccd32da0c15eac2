"""The numba and numpy kernel sets must agree bit for bit."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from projnet import USING_NUMBA
from projnet.backend import BACKEND, BACKEND_ENV

# one fixed probe: bits, angle, and a tiny affine sum for three vectors
_PROBE = r"""
import json
import numpy as np
from projnet import kernels
from projnet.backend import BACKEND
from projnet.projection import (
    ProjectionConfig, SparseVector, angle_estimate, project_bits,
)

cfg = ProjectionConfig(321, 7, 9)
rows = [
    ([0, 5, 2**28], [1.0, -2.5, 0.75]),
    ([3], [4.0]),
    ([1, 2, 3, 4], [0.1, 0.2, -0.3, 0.4]),
]
bits = [
    project_bits(SparseVector(np.array(i, dtype=np.int64), np.array(v)),
                 cfg).words.tolist()
    for i, v in rows
]
a = SparseVector(np.array([1, 4]), np.array([1.0, 2.0]))
b = SparseVector(np.array([1, 9]), np.array([-1.0, 0.5]))
angle = angle_estimate(a, b, ProjectionConfig(9, 128, 8))
W = np.arange(6, dtype=np.float64).reshape(2, 3)
aff = kernels.affine(W, np.array([0.5, -0.5]),
                     np.array([1.0, -1.0, 2.0])).tolist()
print(json.dumps({"backend": BACKEND, "bits": bits, "angle": angle,
                  "aff": aff}))
"""


def _run_probe(backend: str) -> dict:
    env = dict(os.environ, **{BACKEND_ENV: backend})
    out = subprocess.run([sys.executable, "-c", _PROBE], env=env,
                         capture_output=True, text=True, timeout=300)
    assert out.returncode == 0, out.stderr
    return json.loads(out.stdout)


def test_flag_matches_reported_backend():
    assert BACKEND == ("numba" if USING_NUMBA else "numpy")


def test_numpy_fallback_selected_by_env():
    got = _run_probe("numpy")
    assert got["backend"] == "numpy"


@pytest.mark.skipif(not USING_NUMBA, reason="numba not importable here")
def test_backends_agree_exactly():
    plain = _run_probe("numpy")
    jitted = _run_probe("numba")
    assert jitted["backend"] == "numba"
    assert plain["bits"] == jitted["bits"]
    assert plain["angle"] == jitted["angle"]
    assert plain["aff"] == jitted["aff"]


def test_bad_backend_value_refused():
    env = dict(os.environ, **{BACKEND_ENV: "gpu"})
    out = subprocess.run([sys.executable, "-c", "import projnet"], env=env,
                         capture_output=True, text=True, timeout=120)
    assert out.returncode != 0
    assert "auto|numba|numpy" in out.stderr


def test_in_process_kernels_match_pure_numpy_reference():
    """Whatever backend is bound, projection bits equal a numpy-only
    rebuild from the hashed coefficients."""
    from projnet import hashing, kernels

    seed, T, d = 77, 5, 11
    idx = np.array([0, 9, 1000, 2**25], dtype=np.int64)
    vals = np.array([0.3, -1.0, 2.0, 0.7])
    words = kernels.project_bits_words(idx, vals, seed, T, d)
    states = hashing.row_states(seed, T, d)
    dots = np.zeros(T * d)
    for j, v in zip(idx, vals):
        dots += v * hashing.gaussian_from_state_np(
            hashing.absorb_np(states, np.uint64(j)))
    assert np.array_equal(kernels.unpack_words(words, T * d), dots > 0.0)
