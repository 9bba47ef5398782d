"""Energy-based credit assignment: predictive coding, contrastive Hebbian learning,
equilibrium propagation and their relation to exact backpropagation."""

__version__ = "0.1.0"
