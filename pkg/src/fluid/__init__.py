"""Continuous-time transformer with liquid attention.

Attention logits are the state of a gated linear ODE integrated by
explicit Euler under a stability clamp; residual paths can be replaced
by (liquid) hyper-connections. The package ships the model, independent
reference baselines, verification suites for the stability and limit
properties, a desk-scale training harness, and a runtime/memory
benchmark.
"""

from fluid.tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
__version__ = "0.1.0"
