"""MULTIFAC: penalized CP factorization of single and linked tensors."""

__version__ = "1.0.0"
