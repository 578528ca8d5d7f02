"""Learned local flattening point convolution with a small numpy autograd core."""

__version__ = "0.1.0"
