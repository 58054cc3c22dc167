"""rarelift: ensemble fusion and distillation for ranking rare positives."""

__version__ = "0.1.0"
