"""Safety orchestration middleware for text-generation backends.

Requests pass an input gate (PII redaction, harm screening, population
classification), are wrapped in a contrastive guardian prompt built from a
pattern repository, and run through a staged plan of framing, candidate
exploration, tool verification, self-critique refinement and validation.
"""

from .backend import Backend, BackendError, MockBackend
from .core import (
    CandidateOutput,
    GenerationRequest,
    InvalidInputError,
    ParseError,
    PopulationId,
    PromptGuardError,
    ValidationError,
    VulnGuardConfig,
)
from .pipeline import Pipeline, PipelineResult

__all__ = [
    "Backend",
    "BackendError",
    "CandidateOutput",
    "GenerationRequest",
    "InvalidInputError",
    "MockBackend",
    "ParseError",
    "Pipeline",
    "PipelineResult",
    "PopulationId",
    "PromptGuardError",
    "ValidationError",
    "VulnGuardConfig",
]

__version__ = "0.1.0"
