"""Hot inner loops: polygon membership, Gaussian splatting, glyph rasterization.

The compiled extension is used when it imports; otherwise the numpy fallback
is selected. Set ``CROWDSIM_KERNELS=python`` to force the fallback.
"""
import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

_backend = _pykernels
BACKEND = "python"

if os.environ.get("CROWDSIM_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _backend  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        log.debug("compiled kernels unavailable, using numpy fallback")
        _backend = _pykernels

points_in_polygon = _backend.points_in_polygon
splat_gaussians = _backend.splat_gaussians
render_glyphs = _backend.render_glyphs

# mask geometry is always computed in numpy so both backends share it
glyph_bbox = _pykernels.glyph_bbox
glyph_distances = _pykernels.glyph_distances

__all__ = [
    "BACKEND",
    "points_in_polygon",
    "splat_gaussians",
    "render_glyphs",
    "glyph_bbox",
    "glyph_distances",
]
