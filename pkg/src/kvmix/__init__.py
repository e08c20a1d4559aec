"""Mixed-precision INT2/INT4 KV-cache toolkit.

Pipeline: tag prefill tokens along (temporal, modal, semantic) axes ->
calibrate per-tag attention-output distortion from KV captures -> allocate
bitwidths under an average-bit budget -> store KV in a dual-precision
paged pool and decode through a reference flash-decoding path.
"""

from .allocation import (
    Allocation,
    SweepResult,
    allocate,
    allocate_exhaustive,
    allocate_greedy,
    per_bit_gain,
    realized_average_bitwidth,
    sweep_budget,
)
from .attention import (
    SplitPartial,
    apply_mixed_quantization,
    attention_full,
    attention_selective_quant,
    flash_decode,
    merge_partials,
    output_mse,
    output_mse_per_head,
)
from .calibration import (
    RawDistortion,
    SensitivityTable,
    aggregate,
    build_table,
    estimate_counts,
    joint_replay_mse,
    measure_raw,
)
from .capture import KVCapture, LayerCapture, generate_synthetic_capture, load_capture, save_capture
from .errors import (
    CapacityError,
    InfeasibleBudgetError,
    KvmixError,
    TemplateStructureError,
    ValidationError,
)
from .pool import (
    MixedPrecisionPool,
    PageTable,
    PoolConfig,
    PoolView,
    SlotAddress,
    baseline_bytes_per_token,
    bytes_per_token,
    capacity_tokens,
    init_pool,
)
from .quant import (
    GROUP_SIZE,
    KeyPageBlock,
    QuantGroup,
    TokenBlock,
    decode_key_page_int2,
    decode_token_block,
    dequantize_group,
    encode_key_page_int2,
    encode_token_block,
    pack_codes,
    quantize_group,
    unpack_codes,
)
from .tags import (
    ActiveTagSet,
    TriTag,
    code_to_tag,
    collect_active_tags,
    tag_to_code,
    tag_tokens,
)
from .traces import (
    TemplateDescriptor,
    Trace,
    default_template,
    generate_synthetic_trace,
    load_template,
    load_trace,
    save_template,
    save_trace,
)

__version__ = "0.1.0"
