"""Few-shot retinal OCT classification from fused frozen-backbone features."""

__version__ = "0.1.0"
