"""Sparse diffusion-policy runtime (Python bindings over the C++ core)."""

from ._odrt import (  # noqa: F401
    MaskExport,
    OdrtError,
    Policy,
    RunConfig,
    analyze_similarity,
    apply_overrides,
    bench,
    exit_code,
    export_masks,
    load_config,
    parse_config,
    parse_mask_csv,
    record_demos,
    rollout,
    stream_seed,
    train_policy,
    train_pruner,
)
