"""Heart-rate and SpO2 estimation from PPG windows with small 1-D convolutional networks."""

__version__ = "0.1.0"
