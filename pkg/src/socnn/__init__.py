"""Significance-offset convolutional networks for asynchronous series, in numpy."""

__version__ = "0.1.0"
