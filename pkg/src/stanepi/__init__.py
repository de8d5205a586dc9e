"""Spatio-temporal attention network for epidemic forecasting.

Subpackages cover the autodiff engine, location-graph construction, the
attention/recurrent forecaster, transmission-dynamics losses, training,
classical compartmental baselines, data handling, evaluation statistics,
model persistence and the batch CLI.
"""

__version__ = "0.1.0"
