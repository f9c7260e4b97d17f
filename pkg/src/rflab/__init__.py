"""Ricci flow and Ricci-DeTurck flow laboratory on periodic grids."""
from rflab.grid import (
    DiffeoMap,
    Field,
    GridSpec,
    MetricField,
    ScalarField,
    SymTensorField,
    VectorField,
    backend_name,
    interpolate,
    load_field,
    partial_derivative,
    save_field,
    set_backend,
)

__version__ = "0.1.0"

__all__ = [
    "DiffeoMap",
    "Field",
    "GridSpec",
    "MetricField",
    "ScalarField",
    "SymTensorField",
    "VectorField",
    "backend_name",
    "interpolate",
    "load_field",
    "partial_derivative",
    "save_field",
    "set_backend",
]
