"""Finite-element proxy mini-app with CRS/BCRS SpMV instrumentation."""
from .domain import BoxDims, BoxPartition, dirichlet_rows, get_node_id, rcb_partition
from .harness import PhaseReport, RunConfig, emit_report, run
from .solver import CgConfig, cg_solve
from .sparse import BcrsMatrix, CrsMatrix, crs_to_bcrs, spmv_bcrs, spmv_bcrs_unrolled, spmv_crs

__all__ = [
    "BcrsMatrix", "BoxDims", "BoxPartition", "CgConfig", "CrsMatrix", "PhaseReport", "RunConfig",
    "cg_solve", "crs_to_bcrs", "dirichlet_rows", "emit_report", "get_node_id", "rcb_partition",
    "run", "spmv_bcrs", "spmv_bcrs_unrolled", "spmv_crs",
]
