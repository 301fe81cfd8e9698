"""dfxp: dynamic fixed-point (block floating-point) integer training.

Blocks of b-bit integers share one power-of-two scale; linear, layer-norm,
and embedding layers run forward and backward in integer arithmetic while
FP32 master weights take the optimizer updates. Analyzers verify the
mapping error and gradient-variance bounds empirically.
"""

__version__ = "0.1.0"

from .mapping import (
    DfpTensor,
    ErrorStats,
    Fp32RangeError,
    Nearest,
    RoundingMode,
    Stochastic,
    WideAccumulator,
    derive_stream,
    exponent_of,
    inverse_map,
    inverse_map_wide,
    map_to_dfp,
    quant_error_stats,
    stochastic_round,
)
from .kernels import (
    AccumulatorOverflow,
    MatmulPlan,
    fxp_div,
    int_matmul,
    int_matmul_grad_w,
    int_mean,
    int_variance,
    isqrt,
    requantize,
)
from .layers import (
    Embedding,
    IntEmbedding,
    IntLayerNorm,
    IntLinear,
    LayerNorm,
    Linear,
    QuantConfig,
    StateError,
)
from .model import TinyTransformer, TinyTransformerConfig, build_model, softmax_xent
from .data import Dataset, DatasetSpec, load_dataset
from .train import (
    AdamW,
    NanLossError,
    RunMetrics,
    SGD,
    TrainConfig,
    evaluate,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
    train,
)

__all__ = [
    "__version__",
    "DfpTensor", "WideAccumulator", "Nearest", "Stochastic", "RoundingMode", "ErrorStats",
    "Fp32RangeError", "derive_stream", "exponent_of", "map_to_dfp", "inverse_map",
    "inverse_map_wide", "stochastic_round", "quant_error_stats",
    "AccumulatorOverflow", "MatmulPlan", "int_matmul", "int_matmul_grad_w", "requantize",
    "int_mean", "int_variance", "isqrt", "fxp_div",
    "QuantConfig", "StateError", "IntLinear", "IntLayerNorm", "IntEmbedding",
    "Linear", "LayerNorm", "Embedding",
    "TinyTransformer", "TinyTransformerConfig", "build_model", "softmax_xent",
    "Dataset", "DatasetSpec", "load_dataset",
    "TrainConfig", "RunMetrics", "NanLossError", "SGD", "AdamW",
    "optimizer_step", "train", "evaluate", "save_checkpoint", "load_checkpoint",
]
