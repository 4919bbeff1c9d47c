"""Group-relative policy-gradient estimators on a tabular softmax policy."""

__version__ = "0.1.0"
