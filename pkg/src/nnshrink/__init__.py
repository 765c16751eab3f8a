"""Provable simplification of piecewise-linear feed-forward networks."""

from .net import (AffineMap, InputError, LayerTrace, Network, NetworkError, Neuron, NeuronRef,
                  ParseError, PiecewiseLinearFn, PreconditionError, RELU, eliminate_ws_neuron,
                  evaluate, evaluate_batch, parse_network, replace_activation,
                  saturate_ws_elimination, serialize_network, to_affine, validate)
from .pipeline import PipelineConfig, SimplifyReport, simplify
from .prop import BoundsMap, Box, interval_bounds, symbolic_bounds, tighten
from .redundancy import (ErrorLedger, RedundancyVerdict, Replacement, classify_phase_by_bounds,
                         greedy_relaxed_removal, minimal_error_line, propagate_error_bounds,
                         simulate_filter)
from .slicing import (NetworkFamily, RoutingError, SlicePlan, family_evaluate,
                      linearization_report, route, slice_and_simplify, slice_domain)
from .verify import (ArgmaxMismatch, LayerMismatch, LinearConstraint, LinearFeasibility, Query,
                     TwinNetwork, Verdict, brute_force_oracle, build_forward_query,
                     build_phase_query, build_result_preserving_query, solve)

__version__ = "0.1.0"

__all__ = [
    "AffineMap", "InputError", "LayerTrace", "Network", "NetworkError", "Neuron", "NeuronRef",
    "ParseError", "PiecewiseLinearFn", "PreconditionError", "RELU", "eliminate_ws_neuron",
    "evaluate", "evaluate_batch", "parse_network", "replace_activation", "saturate_ws_elimination",
    "serialize_network", "to_affine", "validate", "PipelineConfig", "SimplifyReport", "simplify",
    "BoundsMap", "Box", "interval_bounds", "symbolic_bounds", "tighten", "ErrorLedger",
    "RedundancyVerdict", "Replacement", "classify_phase_by_bounds", "greedy_relaxed_removal",
    "minimal_error_line", "propagate_error_bounds", "simulate_filter", "NetworkFamily",
    "RoutingError", "SlicePlan", "family_evaluate", "linearization_report", "route",
    "slice_and_simplify", "slice_domain", "ArgmaxMismatch", "LayerMismatch", "LinearConstraint",
    "LinearFeasibility", "Query", "TwinNetwork", "Verdict", "brute_force_oracle",
    "build_forward_query", "build_phase_query", "build_result_preserving_query", "solve",
]
