"""Multi-context KV cache sparsification and selective recomputation on a toy transformer."""

from .engine import ModelSpec, ModelWeights, build_model, prefill_document, prefill_full
from .errors import SamKVError
from .kv_store import DocumentCache, KVBlock, Role
from .pipeline import Mode, PipelineConfig, compare_runs, load_config, run_pipeline
from .recompute import Policy

__all__ = [
    "DocumentCache",
    "KVBlock",
    "Mode",
    "ModelSpec",
    "ModelWeights",
    "PipelineConfig",
    "Policy",
    "Role",
    "SamKVError",
    "build_model",
    "compare_runs",
    "load_config",
    "prefill_document",
    "prefill_full",
    "run_pipeline",
]

__version__ = "0.1.0"
