"""FiLM-Seg - acquisition-time conditioned 3D segmentation for DCE studies."""

__version__ = "0.1.0"


class FilmSegError(Exception):
    """Base class for all errors raised by filmseg."""
    pass
