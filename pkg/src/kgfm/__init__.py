"""
kgfm: knowledge-guided flux modeling.

Per-PBM GRU surrogates for four ecosystem modules, a weighted combination of
their outputs, an attention embedder over linearized daily records, an LSTM
decoder to target fluxes, and a selector that infers the per-module PBM
weights from observations. Everything runs on the numpy autodiff in
``kgfm.numerics``.
"""

from .cli import main
from .config import ExperimentConfig, load_config
from .errors import KGFMError
from .pipeline import run_experiment
from .weights import WeightMatrix

__all__ = ["main", "ExperimentConfig", "load_config", "KGFMError", "run_experiment", "WeightMatrix"]
