"""Image-pyramid crowd density estimation with across-scale attention fusion."""
from .network import (PRESETS, PyramidModel, build_attention_subnet, build_backbone,
                      count_parameters, forward_pyramid, load_weights, make_config,
                      receptive_field, save_weights)

__version__ = "0.1.0"
