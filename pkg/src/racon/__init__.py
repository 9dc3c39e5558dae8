"""racon: retrieval-augmented locomotion control at desk scale."""

__version__ = "0.1.0"
