"""Backend selection for the mixture kernels.

The compiled extension is used when it was built; set ``DSMBIAS_PURE_PYTHON=1``
to force the numpy implementation.
"""
import os

BACKEND = "python"

if os.environ.get("DSMBIAS_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from dsmbias._ckernels import mixture_logpdf_score, mixture_score_hvp  # noqa: F401

        BACKEND = "cython"
    except ImportError:
        pass

if BACKEND == "python":
    from dsmbias._pykernels import mixture_logpdf_score, mixture_score_hvp  # noqa: F401

__all__ = ["BACKEND", "mixture_logpdf_score", "mixture_score_hvp"]
