"""Flow matching and Markov bridges for small point-cloud complexes."""

__version__ = "0.1.0"
