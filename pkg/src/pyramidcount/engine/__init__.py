"""Minimal dense NCHW numerical core with hand-written backward passes."""
from . import functional, ops
from .tape import GradTape, Var

__all__ = ["GradTape", "Var", "functional", "ops"]
