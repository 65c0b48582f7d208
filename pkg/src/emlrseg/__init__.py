"""Teacher-guided masked image modeling with multi-scale local visual fields, on a small numpy autodiff engine."""

__version__ = "0.1.0"
