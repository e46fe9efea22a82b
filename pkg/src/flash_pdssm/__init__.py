"""Flash PD-SSM: hard-selected structured sparse state-space layers on CPU."""

from .pd import PdMatrix, pd_apply, pd_apply_transpose, pd_compose, sparsify_column_argmax, to_dense
from .scan import ScanInput, ScanOutput, scan_backward, scan_chunked, scan_sequential

__version__ = "0.1.0"

__all__ = [
    "PdMatrix",
    "pd_apply",
    "pd_apply_transpose",
    "pd_compose",
    "sparsify_column_argmax",
    "to_dense",
    "ScanInput",
    "ScanOutput",
    "scan_backward",
    "scan_chunked",
    "scan_sequential",
]
