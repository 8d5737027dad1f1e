"""Float64 tensors, reverse-mode autodiff and the Adam optimizer."""
from kaprompt.numerics import ops
from kaprompt.numerics.optim import AdamState, adam_step
from kaprompt.numerics.tensor import GradientTape, Tensor, active_tape, as_tensor, backward

__all__ = ["ops", "AdamState", "adam_step", "GradientTape", "Tensor", "active_tape",
           "as_tensor", "backward"]
