"""Reachability analysis for hierarchical neural-network motion planners.

Submodules: ``nn`` (planner networks), ``bernstein`` (certified polynomial
abstractions), ``reach`` (partitioned reachable-set computation),
``hierarchy`` (behavior and motion layers), ``scenarios`` (left-turn and
merging case studies), ``sim`` (simulation and falsification), ``cli``.
"""

__version__ = "0.1.0"
