"""Sparse tensor CP-ALS with a mode-cycling shard layout.

The tensor is partitioned per mode into super-shards (one per interval of
output indices) and fixed-size shards. The parallel MTTKRP kernel streams the
active mode's shards and simultaneously scatters every element into its slot
for the next mode, so each mode reads an already-ordered tensor from one of
two ping-pong buffers.
"""

from .coo import (
    CooTensor,
    Element,
    FactorSet,
    FrosttParseError,
    load_factor_set,
    parse_frostt,
    read_frostt,
    reference_mttkrp,
    save_factor_set,
    synth_tensor,
    write_frostt,
)
from .cpals import CpalsConfig, CpalsResult, cp_als, fit, normalize_factors
from .engine import (
    BufferOrderError,
    RemapCursors,
    ShardOverflowError,
    TrafficCounters,
    mttkrp_mode,
    remap_store,
    sweep_all_modes,
)
from .layout import (
    InfeasibleParamsError,
    PartitionParams,
    PartitionPlan,
    ShardedTensor,
    build_sharded,
    element_size_bits,
    select_params,
    validate_plan,
)
from .schedule import (
    ScheduleMap,
    block_cyclic_loads,
    load_stats,
    optimal_makespan,
    schedule_super_shards,
)

__version__ = "0.1.0"
