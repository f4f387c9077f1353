"""Python bindings for the kclflow C++ core."""

from ._kclflow import (
    Grid,
    KclflowError,
    __version__,
    branch_flows,
    evaluate,
    generate,
    kcl_metric,
    kcl_residual,
    load_grid,
    parse_case,
    project,
    project_kaczmarz,
    solve,
    train,
)

__all__ = [
    "Grid",
    "KclflowError",
    "branch_flows",
    "evaluate",
    "generate",
    "kcl_metric",
    "kcl_residual",
    "load_grid",
    "parse_case",
    "project",
    "project_kaczmarz",
    "solve",
    "train",
]
