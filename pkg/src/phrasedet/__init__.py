"""Text-conditioned region classifiers for phrase localization and detection."""
__version__ = "0.1.0"
