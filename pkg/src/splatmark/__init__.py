"""Fourier-ring latent watermarks, their geometric fragility, and a Gaussian re-render attack."""
from .pipeline import RemovalConfig, SweepReport, TrialConfig, run_detection_sweep, run_removal_pipeline
from .report import emit_report

__all__ = ["RemovalConfig", "SweepReport", "TrialConfig", "emit_report", "run_detection_sweep",
           "run_removal_pipeline"]
