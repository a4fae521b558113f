"""Mean-field and finite-size simulation of coupled continuous time crystals."""

__version__ = "0.1.0"
