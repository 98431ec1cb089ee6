"""adhesim: finite-volume simulation of nonlocal cell-cell adhesion with
degenerate diffusion, coupled to receptor-binding dynamics on a ball."""

__version__ = "0.1.0"

from . import errors  # noqa: F401
