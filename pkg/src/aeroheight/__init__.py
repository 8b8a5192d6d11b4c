"""Monocular height prediction from aerial imagery.

Two-stage pipeline: a triple-branch multi-task network (height, semantic
labels, surface normals) followed by a denoising-autoencoder refiner, plus
sliding-window tile reconstruction, evaluation metrics, uncertainty maps,
and 3D export.
"""

from .raster import (
    DEFAULT_NORMAL_ENCODING,
    LabelGrid,
    NormalEncoding,
    RasterGrid,
    StitchResult,
    downsample,
    gaussian_window,
    sobel,
    stitch,
    surface_normals,
    window_origins,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_NORMAL_ENCODING",
    "LabelGrid",
    "NormalEncoding",
    "RasterGrid",
    "StitchResult",
    "downsample",
    "gaussian_window",
    "sobel",
    "stitch",
    "surface_normals",
    "window_origins",
    "__version__",
]
