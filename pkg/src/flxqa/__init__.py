"""Dosimetric QA toolkit: dose/fluence I/O, 3D gamma, DVH indices, agreement
statistics and shifted-window attention kernels."""

__version__ = "0.1.0"

from .errors import FlxqaError
from .volgrid import FluenceMap, FluenceSet, Grid3, Mask3, PatientTensorSpec
from .gamma import GammaParams, GammaResult, gamma_index, gamma_index_brute, gamma_index_fast
from .dvh import DvhCurve, DvhIndices, compute_dvh, dose_at_volume, volume_at_dose
from .stats import VoxelMetrics, PairedTTest, cohort_summary, paired_t_test, voxel_metrics

__all__ = [
    "FlxqaError", "FluenceMap", "FluenceSet", "Grid3", "Mask3", "PatientTensorSpec",
    "GammaParams", "GammaResult", "gamma_index", "gamma_index_brute", "gamma_index_fast",
    "DvhCurve", "DvhIndices", "compute_dvh", "dose_at_volume", "volume_at_dose",
    "VoxelMetrics", "PairedTTest", "cohort_summary", "paired_t_test", "voxel_metrics",
]
