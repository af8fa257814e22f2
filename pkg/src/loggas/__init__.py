"""One-dimensional log-gas laboratory."""
