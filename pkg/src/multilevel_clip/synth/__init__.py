"""Synthetic scenario scenes standing in for a real annotated corpus."""

from .dataset import DatasetManifest, read_png, render_dataset, write_png
from .focus import compose_focused_region, focus_weights, gaussian_blur, rbf_mask
from .scenes import (
    PREDICATES,
    SceneConfig,
    action_for,
    build_vocabulary,
    generate_scene,
    spatial_predicate,
)

__all__ = [
    "DatasetManifest", "PREDICATES", "SceneConfig", "action_for", "build_vocabulary",
    "compose_focused_region", "focus_weights", "gaussian_blur", "generate_scene",
    "rbf_mask", "read_png", "render_dataset", "spatial_predicate", "write_png",
]
