"""Differentiable Gaussian splatting with a brute-force reference rasterizer."""

from .core import (
    DEFAULT_SETTINGS,
    RasterSettings,
    RenderOutput,
    RenderResult,
    Splat2D,
    TileGrid,
    bench,
    bin_tiles,
    compute_cov3d,
    project_splat,
    quat_to_rotmat,
    random_cloud,
    rasterize,
    rasterize_backward,
    rasterize_reference,
    render,
)

__all__ = [
    "DEFAULT_SETTINGS",
    "RasterSettings",
    "RenderOutput",
    "RenderResult",
    "Splat2D",
    "TileGrid",
    "bench",
    "bin_tiles",
    "compute_cov3d",
    "project_splat",
    "quat_to_rotmat",
    "random_cloud",
    "rasterize",
    "rasterize_backward",
    "rasterize_reference",
    "render",
]
