"""Attribution back-ends: attention maps, Grad-CAM/Grad-CAM++, LRP, and
heatmap rendering."""

from .cams import (SaliencyMap, attention_maps, default_cam_layer, grad_cam,
                   grad_cam_pp, gradcam_weights, upsampled_spatial_gates)
from .lrp import RelevanceMap, Rule, RuleComposite, composite_presets, lrp
from .render import colormap, normalize_map, render_heatmap

__all__ = [
    "SaliencyMap", "attention_maps", "default_cam_layer", "grad_cam",
    "grad_cam_pp", "gradcam_weights", "upsampled_spatial_gates",
    "RelevanceMap", "Rule", "RuleComposite", "composite_presets", "lrp",
    "colormap", "normalize_map", "render_heatmap",
]
