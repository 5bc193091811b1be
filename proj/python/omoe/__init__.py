"""Sparse mixture-of-experts decoder training and routing analysis."""

from ._core import *  # noqa: F401,F403
