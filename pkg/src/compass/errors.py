"""Exception types shared across the pipeline."""

from __future__ import annotations


class OutOfBoundsError(ValueError):
    """A pose (or its camera crop) falls outside the world map."""


class FormatError(ValueError):
    """An on-disk dataset or checkpoint is corrupt or inconsistent."""


class ShapeError(ValueError):
    """An array does not match the shape a component expects."""


class NumericError(ArithmeticError):
    """A non-finite value reached a computation that requires finite input."""

    component: str | None = None


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, component: str):
        super().__init__(f"non-finite loss at step {step} in component {component}")
        self.step = step
        self.component = component
