"""Physics-aware short-term traffic flux prediction.

A recurrent network estimates space-time reaction rates from loop-detector
flux measurements; a discretized traffic flow model (the Traffic Reaction
Model) turns the rates into smoothed and predicted fluxes at every road
interface.
"""

from .errors import ConfigError, DataError, NumericalError

__version__ = "0.1.0"
__all__ = ["ConfigError", "DataError", "NumericalError", "__version__"]
