"""Domain-generalized deformable 3D registration with a band-limited Fourier decoder."""

__version__ = "0.1.0"
