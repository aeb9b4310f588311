"""Cooperative training of a fast-thinking initializer and a slow-thinking
energy-based solver for conditional generation.

The compiled extension carries the implementation; this package re-exports
its surface.
"""

try:
    from ._coopgen import *  # noqa: F401,F403  (installed layout)
    from ._coopgen import __doc__  # noqa: F401
except ImportError:  # build-tree layout: extension sits next to the package on sys.path
    from _coopgen import *  # noqa: F401,F403
    from _coopgen import __doc__  # noqa: F401

__all__ = [
    "Cooperative",
    "psnr",
    "ssim",
    "parzen_loglik",
    "select_bandwidth",
    "default_bandwidth_grid",
    "fixed_point_trace",
    "toy_gauss_mixture",
    "ConfigError",
    "DivergenceError",
]
