"""Corpus ingestion, experiment orchestration and the command-line interface."""

from shufflehist.harness.corpus import Corpus, load_corpus, synth_zipf, zipf_pmf
from shufflehist.harness.experiment import (
    ExperimentConfig,
    ExperimentResult,
    ResultRow,
    run_experiment,
    write_results,
)

__all__ = [
    "Corpus",
    "ExperimentConfig",
    "ExperimentResult",
    "ResultRow",
    "load_corpus",
    "run_experiment",
    "synth_zipf",
    "write_results",
    "zipf_pmf",
]
