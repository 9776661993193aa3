"""Crime-driven retail price effects: indexes, stacked event studies, pass-through and welfare."""

from __future__ import annotations

__version__ = "0.1.0"
