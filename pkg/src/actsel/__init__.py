"""Learnability-based active data selection at desk scale.

Small proxy models score candidate examples, a softmax sampler keeps the most
learnable half of each super-batch, and a FLOP ledger checks whether the
selection pays for itself against uniform sampling.
"""

from .kernels import BACKEND
from .loop import (LoopConfig, RunResult, pretrain_reference, run_algorithm1, run_algorithm2,
                   run_uniform, speedup_beta)
from .pipeline import Topology, run_async
from .scoring import Policy

__version__ = "0.1.0"

__all__ = ["BACKEND", "LoopConfig", "Policy", "RunResult", "Topology", "pretrain_reference",
           "run_algorithm1", "run_algorithm2", "run_async", "run_uniform", "speedup_beta"]
