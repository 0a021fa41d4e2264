"""SGD with stochastic resetting for learning under label noise."""

__version__ = "0.1.0"
