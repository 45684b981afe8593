"""Skeletons, motion sequences, the corpus format, windowing, splits and synthetic motion."""

from .corpus import (
    MM_PER_M,
    MotionSequence,
    WindowedExample,
    format_sequence,
    load_corpus,
    m_to_mm,
    mm_to_m,
    parse_sequence,
    save_corpus,
    stack_examples,
    window_sequences,
    window_starts,
)
from .split import DatasetSplit, WindowedDataset, build_dataset, make_split, split_counts
from .synth import (
    ACTION_PROFILES,
    MotionParams,
    ReachEvent,
    apply_reach,
    default_corpus,
    forward_kinematics,
    speed_bound_mm_s,
    synth_generate,
)
from .topology import RADIUS_ATLAS_M, SkeletonTopology, default_topology

__all__ = [
    "ACTION_PROFILES",
    "MM_PER_M",
    "RADIUS_ATLAS_M",
    "DatasetSplit",
    "MotionParams",
    "MotionSequence",
    "ReachEvent",
    "SkeletonTopology",
    "WindowedDataset",
    "WindowedExample",
    "apply_reach",
    "build_dataset",
    "default_corpus",
    "default_topology",
    "format_sequence",
    "forward_kinematics",
    "load_corpus",
    "m_to_mm",
    "make_split",
    "mm_to_m",
    "parse_sequence",
    "save_corpus",
    "speed_bound_mm_s",
    "split_counts",
    "stack_examples",
    "synth_generate",
    "window_sequences",
    "window_starts",
]
