"""CNN description -> NaiveTPU program compiler."""

from .lower import (CompiledNetwork, LayerLowering, build_dram_image, compile, lower_conv,
                    lower_fc, lower_pool, merge_runs)
from .memory import Dram, MemoryMap, OnChip, PLACEMENT_DRAM, PLACEMENT_ONCHIP, Region, plan_memory
from .network import (Conv2D, FullyConnected, MaxPool2D, NetworkDesc, NetworkError,
                      NetworkParseError, ShapeError, count_params, format_network, infer_shapes,
                      lenet5, load_network, parse_network, save_network, vgg16)
from .plan import CompileError
from .tiling import TilingError
from .weights import LayerWeights, WeightsError, read_weights, write_weights

__all__ = [
    "CompiledNetwork", "LayerLowering", "build_dram_image", "compile", "lower_conv", "lower_fc",
    "lower_pool", "merge_runs", "Dram", "MemoryMap", "OnChip", "PLACEMENT_DRAM",
    "PLACEMENT_ONCHIP", "Region", "plan_memory", "Conv2D", "FullyConnected", "MaxPool2D",
    "NetworkDesc", "NetworkError", "NetworkParseError", "ShapeError", "count_params",
    "format_network", "infer_shapes", "lenet5", "load_network", "parse_network", "save_network",
    "vgg16", "CompileError", "TilingError", "LayerWeights", "WeightsError", "read_weights",
    "write_weights",
]
