"""Covariate-informed Skygrid inference on fixed, dated genealogies."""

__version__ = "0.1.0"
