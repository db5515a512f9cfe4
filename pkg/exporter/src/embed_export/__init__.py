"""Text-to-embedding exporter emitting the retrieval engine's binary dataset format."""

__version__ = "0.1.0"
