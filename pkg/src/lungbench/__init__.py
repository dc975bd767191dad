"""Five-class chest X-ray benchmark: autograd, models, training, metrics and a CLI."""

__version__ = "0.1.0"
