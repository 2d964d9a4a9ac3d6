"""Block-floating-point quantization toolkit and accelerator model."""

from .codec import (
    SB_BYTES,
    SB_LEN,
    Q2KSuperBlock,
    Q3KSuperBlock,
    Q8KSuperBlock,
    QuantRow,
    Variant,
    bits_per_weight,
    dequantize_q2k,
    dequantize_q3k,
    dequantize_q8k,
    dequantize_row,
    deserialize_row,
    deserialize_sb,
    parse_variant,
    quantize_q2k,
    quantize_q3k,
    quantize_q8k,
    quantize_row,
    serialize_row,
    serialize_sb,
)
from .driver import AccelCaps, Driver, LayerDims, Tile, TilePlan, plan_tiles, run_matmul
from .errors import (
    BadMagic,
    CapacityError,
    CapacityFault,
    EmptyOutput,
    EncodeRange,
    FbfqError,
    FormatError,
    IllegalOpcode,
    InvalidInput,
    PlanError,
    ProtocolFault,
    ShapeError,
    Truncated,
    UnsupportedType,
    UnsupportedVersion,
)
from .fp16 import fp16_to_fp32, fp32_to_fp16
from .isa import (
    Instruction,
    Opcode,
    build_program,
    decode_instruction,
    encode_instruction,
    encode_program,
    parse_program,
    read_stream,
    write_stream,
)
from .kernels import (
    QuantMatrix,
    dequant_matmul_oracle,
    dequantize_matrix,
    matmul_bfq,
    matmul_f32,
    quantize_input,
    quantize_matrix,
    vec_dot_q2k_q8k,
    vec_dot_q3k_q8k,
)
from .sim import CycleStats, SimConfig, Simulator, estimate_cycles

__version__ = "0.1.0"
