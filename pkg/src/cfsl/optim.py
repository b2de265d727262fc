"""SGD with Nesterov momentum and L2 weight decay folded into the gradient."""
import numpy as np


def sgd_nesterov_step(params, grads, velocities, lr, momentum=0.9, weight_decay=0.0,
                      lr_scales=None):
    """In-place update of ``params`` (arrays) and ``velocities``.

    g' = g + wd * p;  v = mu * v + g';  p -= lr * s * (g' + mu * v)

    ``weight_decay`` is a float or one float per parameter; ``lr_scales``
    gives an optional per-parameter multiplier s (default 1).
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    if lr_scales is None:
        lr_scales = [1.0] * len(params)
    decays = weight_decay if np.ndim(weight_decay) else [weight_decay] * len(params)
    for p, g, v, s, wd in zip(params, grads, velocities, lr_scales, decays):
        if g is None:
            g = np.zeros_like(p)
        g = g + wd * p if wd else g
        v *= momentum
        v += g
        p -= (lr * s) * (g + momentum * v) if momentum else (lr * s) * g


class NesterovSGD:
    def __init__(self, tensors, momentum=0.9, weight_decay=0.0, lr_scales=None):
        self.tensors = list(tensors)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_scales = list(lr_scales) if lr_scales is not None else [1.0] * len(self.tensors)
        if len(self.lr_scales) != len(self.tensors):
            raise ValueError("one lr scale per tensor required")
        if np.ndim(weight_decay) and len(weight_decay) != len(self.tensors):
            raise ValueError("one weight decay per tensor required")
        self.velocities = [np.zeros_like(t.data) for t in self.tensors]

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None

    def step(self, lr):
        sgd_nesterov_step([t.data for t in self.tensors], [t.grad for t in self.tensors],
                          self.velocities, lr, self.momentum, self.weight_decay, self.lr_scales)
