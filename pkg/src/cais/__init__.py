"""Content-aware inter-scale cost aggregation for stereo cost volumes."""
from .aggregate import (BASELINE_METHODS, cais_backward, cais_upsample, disparity_upsample,
                        full3d_backward, full3d_upsample, spatial_upsample, upsample_baseline)
from .estimators import CAISUpsampler, FixedUpsampler
from .flops import FlopReport, flops_analytic, flops_runtime
from .guidance import (GuidanceParams, encoder_params, guidance_backward, guidance_forward,
                       guidance_logit_map, make_location_map, nearest_expand)
from .tensor_io import avg_pool2, read_pfm, read_tensor, write_pfm, write_tensor
from .validation import AggregationConfig, ConfigError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "AggregationConfig", "BASELINE_METHODS", "CAISUpsampler", "ConfigError", "FixedUpsampler",
    "FlopReport", "GuidanceParams", "ShapeError", "avg_pool2", "cais_backward",
    "cais_upsample", "disparity_upsample", "encoder_params", "flops_analytic",
    "flops_runtime", "full3d_backward", "full3d_upsample", "guidance_backward",
    "guidance_forward", "guidance_logit_map", "make_location_map", "nearest_expand",
    "read_pfm", "read_tensor", "spatial_upsample", "upsample_baseline", "write_pfm",
    "write_tensor",
]
