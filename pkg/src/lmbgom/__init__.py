"""Labeled multi-object filters (LMO-GOM, LMB-GOM, grouped LMB-GOM) for generic observation models."""
from .filters import (
    DegenerateFrameError,
    FilterConfig,
    FunctionLikelihood,
    g_lmb_gom_step,
    lmb_gom_step,
    lmb_gom_update,
    lmb_predict,
    lmo_gom_step,
    lmo_predicted_weights,
)
from .grouping import GroupingConfig, partition_tracks
from .metrics import OspaParams, ospa
from .motion import BirthComponent, BirthModel, FiniteMotionModel, MotionModel
from .rfs import Label, LabeledState, LmbDensity, LmoDensity, Track, best_lmb_approx, lmb_to_lmo
from .sensors import AcousticModel, ObservationFrame, PixelGrid, TbdModel
from .smc import RandomStream

__version__ = "0.1.0"

__all__ = [
    "AcousticModel",
    "BirthComponent",
    "BirthModel",
    "DegenerateFrameError",
    "FilterConfig",
    "FiniteMotionModel",
    "FunctionLikelihood",
    "GroupingConfig",
    "Label",
    "LabeledState",
    "LmbDensity",
    "LmoDensity",
    "MotionModel",
    "ObservationFrame",
    "OspaParams",
    "PixelGrid",
    "RandomStream",
    "TbdModel",
    "Track",
    "best_lmb_approx",
    "g_lmb_gom_step",
    "lmb_gom_step",
    "lmb_gom_update",
    "lmb_predict",
    "lmb_to_lmo",
    "lmo_gom_step",
    "lmo_predicted_weights",
    "ospa",
    "partition_tracks",
]
