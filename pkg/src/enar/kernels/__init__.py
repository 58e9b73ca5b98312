"""Pairwise alpha-distance kernels with selectable backends.

The compiled backend and the pure-numpy fallback compute the same sums but
reduce in different orders, so they agree to float tolerance, not bitwise.
Within one backend, results are bitwise reproducible run to run.

Backend choice is read from the ENAR_KERNELS environment variable at import:
  auto   use the compiled backend when numba imports, else numpy (default)
  numba  require the compiled backend, fail if unavailable
  numpy  force the pure-numpy fallback
"""

import os

import numpy as np

from enar.errors import ConfigError, ShapeError
from enar.kernels import numpy_impl

try:
    from enar.kernels import numba_impl
except ImportError:
    numba_impl = None

_BACKENDS = {"numpy": numpy_impl}
if numba_impl is not None:
    _BACKENDS["numba"] = numba_impl

_active_name = None
_active = None


def select_backend(name):
    """Resolve a backend request ('auto', 'numba', 'numpy') to a module."""
    if name == "auto":
        name = "numba" if "numba" in _BACKENDS else "numpy"
    if name not in ("numba", "numpy"):
        raise ConfigError(f"unknown kernel backend {name!r}; expected auto, numba, or numpy")
    if name not in _BACKENDS:
        raise ConfigError("kernel backend 'numba' requested but numba is not importable")
    return name, _BACKENDS[name]


def use_backend(name):
    """Switch the active backend; returns the resolved name."""
    global _active_name, _active
    _active_name, _active = select_backend(name)
    return _active_name


def active_backend():
    return _active_name


use_backend(os.environ.get("ENAR_KERNELS", "auto").strip().lower() or "auto")


def _as_matrix(a, name):
    arr = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (rows are points), got shape {arr.shape}")
    return arr


def cross_alpha_sums(X, Y, alpha):
    """Row sums and column sums of |x_i - y_j|^alpha over the full cross grid."""
    X = _as_matrix(X, "X")
    Y = _as_matrix(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ShapeError(f"point dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if not 0.0 < alpha <= 2.0:
        raise ConfigError(f"alpha must lie in (0, 2], got {alpha}")
    return _active.cross_alpha_sums(X, Y, float(alpha))


def within_alpha_sums(X, alpha):
    """row[i] = sum over j != i of |x_i - x_j|^alpha."""
    X = _as_matrix(X, "X")
    if not 0.0 < alpha <= 2.0:
        raise ConfigError(f"alpha must lie in (0, 2], got {alpha}")
    return _active.within_alpha_sums(X, float(alpha))
