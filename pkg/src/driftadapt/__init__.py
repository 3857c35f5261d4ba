"""Drift-aware online regression with severity-graded fine-tuning."""

from .config import RunConfig, apply_ablation, load_config
from .harness import compute_metrics, offline_train, run_online, run_pipeline
from .synth import SynthSpec, synth_stream

__version__ = "0.1.0"

__all__ = ["RunConfig", "apply_ablation", "load_config", "compute_metrics", "offline_train",
           "run_online", "run_pipeline", "SynthSpec", "synth_stream"]
