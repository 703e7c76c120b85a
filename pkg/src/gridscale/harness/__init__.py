"""Command-line harness: configuration, pipeline stages and the responder protocol."""

from .config import DEFAULTS, load_config
from .pipeline import STAGES, Pipeline, PipelineStageError, run_pipeline

__all__ = ["DEFAULTS", "load_config", "STAGES", "Pipeline", "PipelineStageError", "run_pipeline"]
