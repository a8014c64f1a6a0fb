"""Physics-informed neural networks for fractional and tempered fractional
PDEs in high dimension, with Monte Carlo and Gauss-quadrature estimators of
the nonlocal operators."""

__version__ = "0.1.0"
