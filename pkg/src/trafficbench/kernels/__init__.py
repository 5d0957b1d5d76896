"""Hot-kernel dispatch: compiled extension when built, NumPy fallback otherwise.

Set ``TRAFFICBENCH_PURE_PYTHON=1`` to force the fallback (used by the
benchmark and by tests that compare both implementations).
"""

import os

if os.environ.get("TRAFFICBENCH_PURE_PYTHON"):
    from trafficbench.kernels import _fallback as _impl
else:
    try:
        from trafficbench.kernels import _fast as _impl  # type: ignore[attr-defined]
    except ImportError:
        from trafficbench.kernels import _fallback as _impl

IMPL = _impl.IMPL
motif_scan = _impl.motif_scan
buffered_flatten = _impl.buffered_flatten
draw_polyline = _impl.draw_polyline
