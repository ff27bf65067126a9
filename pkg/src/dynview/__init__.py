"""Unsupervised dynamic view synthesis on analytic synthetic scenes.

A static radiance field and a time-conditioned dynamic field with 3D scene
flow are trained from a single moving camera, regularized by a
surface-consistency term and a patch-based multi-view term.
"""

__version__ = "0.1.0"

__all__ = [
    "cli_io",
    "fields",
    "geometry",
    "losses",
    "metrics",
    "renderer",
    "synthscene",
    "trainer",
]
