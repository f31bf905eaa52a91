"""Object-centric token merging, object-centric diffusion sampling and an
attention cost model on a small numpy tensor core."""

__version__ = "0.1.0"
