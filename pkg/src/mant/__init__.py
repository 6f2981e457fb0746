"""Adaptive 4-bit numeric format toolkit.

Grid construction and coefficient fitting, group-wise tensor codecs with a
binary container format, dequantization-free integer GEMM, real-time
KV-cache quantization, and a cycle-approximate accelerator model.
"""

from .grid import (
    DEFAULT_NF_EPSILON,
    MantGrid,
    ReferenceCurve,
    build_grid,
    fit_coefficient,
    probit,
    reference_curve,
)
from .codec import (
    DEFAULT_GROUP_SIZE,
    INT4_COEFF,
    INT8_COEFF,
    GroupMeta,
    MantCode,
    QuantizedTensor,
    dequantize_group,
    pack_codes,
    quantize_activation_group,
    quantize_activation_tensor,
    quantize_weight_group,
    quantize_weight_tensor,
    unpack_codes,
)
from .container import (
    ContainerError,
    load_quantized,
    load_tensor,
    read_quantized,
    read_tensor,
    save_quantized,
    save_tensor,
    write_quantized,
    write_tensor,
)
from .gemm import (
    AccumulatorTile,
    GroupDotResult,
    combine,
    dequantized_gemm,
    fused_group_dot,
    gemm,
    gemm_int8,
)
from .selection import (
    CalibrationConfig,
    CandidateSet,
    VarianceTable,
    build_variance_table,
    normalized_variance,
    select_by_variance,
    select_weight_coefficient,
)
from .kvcache import KvCache, ProcessWindow
from .attention import AttentionPolicies, ToyAttentionReport, run_toy_attention
from .simulator import (
    ArrayConfig,
    CostModel,
    SimReport,
    compare_configs,
    simulate_attention,
    simulate_gemm,
    simulate_workload,
)

__version__ = "0.1.0"

__all__ = [
    "AccumulatorTile", "ArrayConfig", "AttentionPolicies", "CalibrationConfig",
    "CandidateSet",
    "ContainerError", "CostModel", "DEFAULT_GROUP_SIZE", "DEFAULT_NF_EPSILON",
    "GroupDotResult", "GroupMeta", "INT4_COEFF", "INT8_COEFF", "KvCache",
    "MantCode", "MantGrid", "ProcessWindow", "QuantizedTensor", "ReferenceCurve",
    "SimReport", "ToyAttentionReport", "VarianceTable", "build_grid",
    "build_variance_table", "combine", "compare_configs", "dequantize_group",
    "dequantized_gemm", "fit_coefficient", "fused_group_dot", "gemm", "gemm_int8",
    "load_quantized", "load_tensor", "normalized_variance", "pack_codes", "probit",
    "quantize_activation_group", "quantize_activation_tensor", "quantize_weight_group",
    "quantize_weight_tensor", "read_quantized", "read_tensor", "reference_curve",
    "run_toy_attention", "save_quantized", "save_tensor", "select_by_variance",
    "select_weight_coefficient", "simulate_attention", "simulate_gemm",
    "simulate_workload", "unpack_codes", "write_quantized", "write_tensor",
]
