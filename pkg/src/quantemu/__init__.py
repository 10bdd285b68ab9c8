"""Emulating stable LTI flows with ternary-quantized overcomplete inputs."""

__version__ = "0.1.0"
