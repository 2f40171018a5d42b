"""Backend selection for the hot integration kernel.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_pykernels``.  Set ``GEOBLOCK_KERNEL=python`` to
force the fallback.
"""

import os

from . import _pykernels
from ._pykernels import dp5_integrate  # noqa: F401  generic path, any metric

_ck = None
if os.environ.get("GEOBLOCK_KERNEL", "").lower() != "python":
    try:
        from . import _ckernels as _ck
    except ImportError:
        _ck = None

BACKEND = "cython" if _ck is not None else "python"


def integrate_conformal(bump_arr, y0, t_eval, ncols=0, rtol=1e-11, atol=1e-12, h0=1e-2, hmax=float("inf"),
                        backend=None):
    """Integrate geodesic (+ Jacobi) rows for exp(2 lambda) * identity.

    ``bump_arr`` rows are ``(cx, cy, amplitude, radius)``; ``y0`` rows are
    ``[q, v, J, J']`` with ``J`` and ``J'`` stored row-major as 2 x ``ncols``.
    ``hmax`` caps the step in arc length.  Returns states at ``t_eval`` with
    shape (B, T, D).
    """
    backend = backend or BACKEND
    if backend == "cython":
        if _ck is None:
            raise RuntimeError("compiled kernel not available")
        return _ck.integrate_conformal(bump_arr, y0, t_eval, ncols, rtol, atol, h0, hmax)
    return _pykernels.integrate_conformal(bump_arr, y0, t_eval, ncols, rtol, atol, h0, hmax)
