"""Quantized CNN inference with cross-channel pooling and block-streamed virtual feature maps."""

__version__ = "0.1.0"
