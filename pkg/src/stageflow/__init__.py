"""stageflow: compress ResNet stages into flow mappers, then incubate them back."""

__version__ = "0.1.0"

from .tensor import DualTensor, GradTape, Parameter, Tensor, backward, jvp  # noqa: F401
