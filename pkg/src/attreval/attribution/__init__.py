"""Attribution methods and map utilities."""

from .maps import (ATMP_MAGIC, ATMP_VERSION, AttributionMap, channel_sum, gaussian_kernel1d,
                   gaussian_kernel2d, load_map, map_from_bytes, map_to_bytes, save_map,
                   smooth_gaussian, upsample_bilinear)
from .methods import (SMOOTHGRAD_BASES, MethodConfig, gradcam_attr, gradient_attr,
                      guided_backprop_attr, intgrad_attr, ixg_attr, layercam_attr,
                      occlusion_attr, rise_attr, rise_masks, smoothgrad_attr)

__all__ = [
    "ATMP_MAGIC", "ATMP_VERSION", "AttributionMap", "channel_sum", "gaussian_kernel1d",
    "gaussian_kernel2d", "load_map", "map_from_bytes", "map_to_bytes", "save_map",
    "smooth_gaussian", "upsample_bilinear", "SMOOTHGRAD_BASES", "MethodConfig",
    "gradcam_attr", "gradient_attr", "guided_backprop_attr", "intgrad_attr", "ixg_attr",
    "layercam_attr", "occlusion_attr", "rise_attr", "rise_masks", "smoothgrad_attr",
]
