"""Synthetic-voice and splice-boundary detection with SE-Res2Net and Conformer blocks.

Everything runs on a small numpy autodiff engine (:mod:`spoofsplice.autodiff`).
"""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("spoofsplice")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0+local"
