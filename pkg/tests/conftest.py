"""Test-session setup: pin the thread cap before anything imports numpy so
every run is single-threaded and bitwise deterministic."""

import os

os.environ.setdefault("CLEARDR_THREADS", "1")

import cleardr  # noqa: E402,F401  (propagates the cap to the BLAS variables)
