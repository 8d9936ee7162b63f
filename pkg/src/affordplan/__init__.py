"""Learned push/grasp affordances with blended conditional-process encoders, plus planners on top."""

__version__ = "0.1.0"
