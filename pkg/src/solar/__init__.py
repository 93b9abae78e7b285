"""Set-wise ranking with SVD-attention: randomized low-rank attention over
long user histories, its backward pass, a synthetic flip-data generator, a
small trainable ranker and numerical checks of the accompanying theory."""

__version__ = "0.1.0"
