"""Scene-text recognition with layer-wise CLIP feature distillation."""

__version__ = "0.1.0"
