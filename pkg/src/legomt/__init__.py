"""Detachable multilingual translation: shared and language-specific encoder/decoder branches."""

from .branches import BranchId, Dims, Flow, FlowSpec
from .errors import LegoError
from .registry import BranchStore
from .tokenizer import Vocabulary
from .trainer import Trainer, TrainingPlan

__all__ = ["BranchId", "BranchStore", "Dims", "Flow", "FlowSpec", "LegoError", "Trainer", "TrainingPlan", "Vocabulary"]
__version__ = "0.1.0"
