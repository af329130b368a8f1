"""Channel pruning toolkit: gradient-flow saliency for Conv-BN-ReLU nets."""

__version__ = "0.1.0"
