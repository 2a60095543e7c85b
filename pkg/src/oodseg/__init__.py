"""Dense anomaly detection toolkit for semantic segmentation.

Provides synthetic outlier compositing, the hybrid loss family with analytic
gradients, logit-based anomaly scoring, dense evaluation metrics, and a toy
per-pixel trainer for end-to-end validation at desk scale.
"""

OUTLIER_ID = 254
IGNORE_ID = 255

__version__ = "0.1.0"
