"""IoT traffic-rate privacy benchmark: motif extraction, reshaping
defenses, image-based inference attacks, and a uniform evaluation harness.
"""

from trafficbench.kernels import IMPL as kernel_impl

__version__ = "0.1.0"
__all__ = ["kernel_impl", "__version__"]
