"""Kernel selection: compiled extension if available, pure Python otherwise.

Set ``CHAOS_SIM_PURE_PYTHON=1`` to force the fallback (used by the benchmark
and for debugging). ``IMPLEMENTATION`` reports which one is active.
"""

import os

if os.environ.get("CHAOS_SIM_PURE_PYTHON"):
    from . import _kernels_py as _impl
    IMPLEMENTATION = "python"
else:
    try:
        from . import _speedups as _impl  # type: ignore[attr-defined]
        IMPLEMENTATION = "compiled"
    except ImportError:  # pragma: no cover - depends on build environment
        from . import _kernels_py as _impl
        IMPLEMENTATION = "python"

greedy_sweep = _impl.greedy_sweep
brute_force_search = _impl.brute_force_search
