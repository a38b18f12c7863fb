"""Module networks: learning shared-parent regression-tree models of continuous data."""

from .evaluation import (EvalReport, cross_validate, enrichment_pvalue, heldout_ll,
                         log_enrichment_pvalue, recovered_edge_fraction, top_module_mass, train)
from .initialization import ConfigError, initialize
from .io import load_csv, load_model, save_model, write_csv
from .model import (CycleError, Dataset, ModuleAssignment, ModuleNetwork, StructureError,
                    build_module_graph, check_acyclic, ground_network, validate)
from .scoring import (PriorSpec, ScoreError, fit_parameters, log_likelihood, log_marginal,
                      module_score, total_score)
from .search import SearchConfig, TraceRecord, learn
from .synthetic import GeneratorSpec, generate_truth, sample
from .tree import LeafParams, RegressionTree, TreeError

__all__ = [
    "ConfigError", "CycleError", "Dataset", "EvalReport", "GeneratorSpec", "LeafParams",
    "ModuleAssignment", "ModuleNetwork", "PriorSpec", "RegressionTree", "ScoreError",
    "SearchConfig", "StructureError", "TraceRecord", "TreeError", "build_module_graph",
    "check_acyclic", "cross_validate", "enrichment_pvalue", "fit_parameters",
    "generate_truth", "ground_network", "heldout_ll", "initialize", "learn", "load_csv",
    "load_model", "log_enrichment_pvalue", "log_likelihood", "log_marginal", "module_score",
    "recovered_edge_fraction", "sample", "save_model", "top_module_mass", "total_score",
    "train", "validate", "write_csv",
]
