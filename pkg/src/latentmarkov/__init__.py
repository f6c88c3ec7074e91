"""Latent Markov models for longitudinal categorical data."""
from .data import DataError, PanelDataset, PatternTable, aggregate_patterns, load_panel, simulate_panel, write_panel
from .decode import DecodedPath, local_decode, viterbi
from .em import ExpectedCounts, FitResult, e_step, fit, m_step
from .inference import em_score, infer, information_criteria, lr_test, observed_information
from .model import compile_model
from .multilevel import MultilevelParams, MultilevelSpec, fit_multilevel, simulate_multilevel
from .params import (
    InitialSpec,
    MeasurementSpec,
    ModelParams,
    ModelSpec,
    SpecError,
    TransitionSpec,
    count_free_parameters,
    validate_params,
)
from .recursions import backward, forward, posteriors

__version__ = "0.1.0"

__all__ = [
    "DataError", "PanelDataset", "PatternTable", "aggregate_patterns", "load_panel", "simulate_panel",
    "write_panel", "DecodedPath", "local_decode", "viterbi", "ExpectedCounts", "FitResult", "e_step", "fit",
    "m_step", "em_score", "infer", "information_criteria", "lr_test", "observed_information", "compile_model",
    "MultilevelParams", "MultilevelSpec", "fit_multilevel", "simulate_multilevel", "InitialSpec",
    "MeasurementSpec", "ModelParams", "ModelSpec", "SpecError", "TransitionSpec", "count_free_parameters",
    "validate_params", "backward", "forward", "posteriors",
]
