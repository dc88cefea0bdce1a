"""Region-level transferability estimation and transferability-guided masked
attention for cross-domain segmentation, with a synthetic two-domain
experiment harness."""

__version__ = "0.1.0"
