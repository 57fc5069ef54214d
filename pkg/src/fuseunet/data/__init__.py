from .records import Dataset, SliceRecord, read_record, write_record
from .phantom import generate_phantom_dataset
from .sampler import (
    DynamicSampler,
    FixedSampler,
    ResampleDraw,
    SamplerConfig,
    batch_size_for,
    draw_patch_size,
)

__all__ = [
    "Dataset",
    "SliceRecord",
    "read_record",
    "write_record",
    "generate_phantom_dataset",
    "DynamicSampler",
    "FixedSampler",
    "ResampleDraw",
    "SamplerConfig",
    "batch_size_for",
    "draw_patch_size",
]
