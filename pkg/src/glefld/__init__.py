"""Fashion landmark detection with stacked global-local embedding modules,
built on a small numpy autograd core."""

__version__ = "0.1.0"
