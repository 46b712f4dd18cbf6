"""Glucose forecasting with a convolutional recurrent network in numpy."""

__version__ = "0.1.0"
