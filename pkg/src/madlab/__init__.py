"""madlab: self-taught semi-supervised multi-mode anomaly detection on
feature vectors, with the full evaluation protocol (exact AUC, replicate
confidence intervals, Welch t-test)."""

__version__ = "0.1.0"
