"""Latent-source risk modelling for longitudinal patient records.

Records become daily curves, curves are sampled into a standardized matrix,
ICA splits the matrix into independent sources, a random forest predicts risk
from source expressions and exact tree attributions explain each prediction.
"""

__version__ = "0.1.0"
