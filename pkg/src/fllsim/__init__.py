from .__version__ import __version__, __authors__

__all__ = [
    "__version__",
    "__authors__"
]
