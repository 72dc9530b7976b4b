"""Post-hoc privacy filtering for synthetic image datasets, with its evaluation harness."""

__version__ = "0.1.0"
