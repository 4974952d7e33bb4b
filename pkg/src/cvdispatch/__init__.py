"""Order-dispatching engine: spatiotemporal value learning + KM matching."""

__version__ = "0.1.0"
