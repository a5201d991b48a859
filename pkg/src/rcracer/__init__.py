"""Optimization-based racing controllers for 1:43 scale cars.

Library plus closed-loop simulator: nonlinear bicycle model, stationary
velocity (trim) analysis, spline track geometry, a structure-exploiting
multistage QP interior-point solver, a hierarchical trim-planner controller,
a model predictive contouring controller, and a DP obstacle corridor planner.
"""

__version__ = "0.1.0"
