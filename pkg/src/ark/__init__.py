"""Content-addressed geospatial pipelines with information-flow control."""

__version__ = "0.1.0"
