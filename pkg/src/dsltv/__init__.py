"""Estimation and prediction of doubly sparse time-varying channels."""

from .channel import (GridDims, OffGridChannel, OnGridChannel, SparsityProfile, SupportMask,
                      apply_channel, gen_offgrid, gen_ongrid, sample_support, sparsity_levels)
from .dpss import DpssBasis, ProlateSpec, compute_dpss, extend_dpss
from .waveform import PilotPlan, WaveformConfig, daft_index, demodulate, modulate, overhead, plan_pilots

__version__ = "0.1.0"
