"""Backend switch for the compiled kernels.

Set ``BAATBENCH_NUMBA=0`` to force the pure-numpy path (useful for debugging
and for the benchmark comparison). Any other value, or leaving it unset,
uses numba when it is importable.
"""
import os

_flag = os.environ.get("BAATBENCH_NUMBA", "1").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _flag not in ("0", "false", "no", "off")


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
