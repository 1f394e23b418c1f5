"""Coarse-to-fine rigid point-cloud registration with an SE(3)-equivariant encoder."""

__version__ = "0.1.0"
