"""Zero-shot class forgetting for dual-encoder vision-language models."""

__version__ = "0.1.0"
