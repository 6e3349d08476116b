"""GraphMAGE spatial graph forecasting: autodiff engine, graphs, model, training, evaluation, calibration."""

__version__ = "0.1.0"
