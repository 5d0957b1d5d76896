"""Kernel dispatch tests: the compiled and fallback paths must agree bit-for-bit."""

import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficbench import kernels
from trafficbench.kernels import _fallback

HAVE_FAST = None
try:
    from trafficbench.kernels import _fast

    HAVE_FAST = _fast
except ImportError:
    pass

needs_fast = pytest.mark.skipif(HAVE_FAST is None, reason="compiled kernels not built")


def random_series(seed, n=500):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 40, size=n)
    x[rng.uniform(size=n) < 0.4] = 0.0  # realistic idle stretches
    return x


class TestDispatch:
    def test_impl_id_is_declared(self):
        assert kernels.IMPL in ("python", "compiled")

    def test_env_override_forces_fallback(self):
        code = (
            "import trafficbench.kernels as k; print(k.IMPL)"
        )
        out = subprocess.run(
            [sys.executable, "-c", code],
            capture_output=True, text=True,
            env={"TRAFFICBENCH_PURE_PYTHON": "1", "PATH": "/usr/bin:/bin"},
        )
        assert out.returncode == 0, out.stderr
        assert out.stdout.strip() == "python"


@needs_fast
class TestAgreement:
    @pytest.mark.parametrize("seed", range(5))
    def test_motif_scan_identical(self, seed):
        x = random_series(seed)
        for a, b in zip(
            _fallback.motif_scan(x, 5.0, 30), HAVE_FAST.motif_scan(x, 5.0, 30)
        ):
            np.testing.assert_array_equal(np.asarray(a), np.asarray(b))

    @pytest.mark.parametrize("seed", range(5))
    def test_buffered_flatten_identical(self, seed):
        x = random_series(seed)
        ya, ca = _fallback.buffered_flatten(x, 12.0)
        yb, cb = HAVE_FAST.buffered_flatten(x, 12.0)
        np.testing.assert_array_equal(np.asarray(ya), np.asarray(yb))
        assert ca == cb

    @pytest.mark.parametrize("seed", range(3))
    def test_draw_polyline_identical(self, seed):
        rng = np.random.default_rng(seed)
        xs = rng.integers(0, 64, size=40).astype(np.int64)
        ys = rng.integers(0, 64, size=40).astype(np.int64)
        a = np.zeros((64, 64, 3))
        b = np.zeros((64, 64, 3))
        _fallback.draw_polyline(a, xs, ys, 0)
        HAVE_FAST.draw_polyline(b, xs, ys, 0)
        np.testing.assert_array_equal(a, b)

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(
            st.floats(min_value=0.0, max_value=100.0, allow_nan=False),
            min_size=1,
            max_size=200,
        ),
        st.floats(min_value=0.1, max_value=50.0, allow_nan=False),
    )
    def test_property_flatten_agrees(self, vals, cap):
        x = np.array(vals)
        ya, ca = _fallback.buffered_flatten(x, cap)
        yb, cb = HAVE_FAST.buffered_flatten(x, cap)
        np.testing.assert_array_equal(np.asarray(ya), np.asarray(yb))
        assert ca == cb


class TestFallbackSemantics:
    def test_flatten_caps_and_conserves(self):
        x = np.array([0.0, 30.0, 0.0, 0.0, 0.0])
        y, carry = _fallback.buffered_flatten(x, 10.0)
        y = np.asarray(y)
        assert y.max() <= 10.0 + 1e-12
        assert y.sum() + carry == pytest.approx(x.sum(), abs=1e-9)
        assert carry == 0.0  # drained within the series

    def test_flatten_reports_residual_carry(self):
        # more volume than the cap can drain in-place: carry holds the rest
        x = np.full(3, 100.0)
        y, carry = _fallback.buffered_flatten(x, 10.0)
        assert np.asarray(y).sum() == pytest.approx(30.0, abs=1e-9)
        assert carry == pytest.approx(270.0, abs=1e-9)

    def test_motif_scan_plateau_leftmost(self):
        x = np.array([0.0, 8.0, 8.0, 8.0, 0.0])
        centers, starts, stops = _fallback.motif_scan(x, 5.0, 10)
        assert list(np.asarray(centers)) == [1]
        assert (np.asarray(starts)[0], np.asarray(stops)[0]) == (1, 4)

    def test_motif_scan_truncates_to_half_window(self):
        x = np.concatenate([np.zeros(5), np.full(20, 9.0), [20.0], np.full(20, 9.0), np.zeros(5)])
        centers, starts, stops = _fallback.motif_scan(x, 5.0, 3)
        c = np.asarray(centers)[np.asarray(x)[np.asarray(centers)].argmax()]
        i = list(np.asarray(centers)).index(c)
        assert np.asarray(starts)[i] >= c - 3
        assert np.asarray(stops)[i] <= c + 3 + 1
