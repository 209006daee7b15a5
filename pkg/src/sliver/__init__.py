"""Sliding-window sample labelling for streaming multi-task recommendation.

Pipeline: :mod:`simgen` draws a synthetic live-stream log, :mod:`events`
turns it into impression sessions, :mod:`windowing` labels them under one of
three paradigms, :mod:`learner` trains on the labelled stream, :mod:`metrics`
scores it hour by hour and :mod:`rereco` simulates the serving loop.
"""

__version__ = "0.1.0"
