"""Multi-task attention multiple-instance learning over bags of tile features."""

__version__ = "0.1.0"
