"""Hierarchy-aware sequence-to-sequence text classification with path-adaptive masking."""

from .hierarchy import (HierarchyError, LabelHierarchy, ancestors, induced_subtree,
                        is_consistent, load_hierarchy, read_hierarchy)
from .labelseq import (MultiLevelSequence, Vocabulary, bfs_flatten, decode_text, encode_text,
                       flat_sequence, parse_sequence)
from .pamm import PathAdaptiveMask, build_mask, off_path_mass
from .model import ModelConfig, ForwardTrace, init_params
from .train import Checkpoint, Example, LossBreakdown, TrainConfig, train
from .evalinfer import EvalReport, greedy_decode, inconsistency_rate, macro_f1, micro_f1
from .datagen import SynthSpec, generate

__version__ = "0.1.0"
