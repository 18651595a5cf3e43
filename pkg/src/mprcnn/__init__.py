"""Multi-path region proposal network and boosted-forest face detector at desk scale."""

__version__ = "0.1.0"
