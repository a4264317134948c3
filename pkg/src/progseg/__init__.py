"""Semi-supervised teacher/student segmentation with confidence-ranked curricula."""

__version__ = "0.1.0"
