"""Identity unlearning with Neural ODE adapters in a frozen toy generator."""

__version__ = "0.1.0"
