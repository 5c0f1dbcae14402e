"""Bayesian online querying of correlated experts and classifiers.

The panel model treats classifier and expert logits as one correlated
Gaussian vector; experts are queried one at a time, choosing whoever is
expected to shrink the uncertainty about the panel's aggregate label most,
until the estimated error falls below a threshold.
"""
from . import baselines, corr, data, gaussian, harness, inference, kernels, posterior, simplex, theory
from .data import Dataset, ExampleRecord, load_dataset, save_dataset
from .errors import (
    ConsensusQueryError,
    DomainError,
    InferenceError,
    NumericalError,
    ParseError,
    SamplerError,
    SchemaError,
)
from .harness import RunConfig, run_experiment, sweep
from .inference import QueryState, consensus_posterior, run_example, select_next_expert
from .posterior import ChainConfig, History, HyperParams, PosteriorSampleSet, sample_posterior
from .simplex import AggregationFn

__version__ = "0.1.0"
