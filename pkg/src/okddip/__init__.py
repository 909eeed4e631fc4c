"""Online knowledge distillation with attention-weighted peer targets and a group leader."""

__version__ = "0.1.0"
