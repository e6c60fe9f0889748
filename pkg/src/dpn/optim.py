"""ADAM with coupled L2 weight decay (decay folded into the gradient)."""

import numpy as np


class OptimizerError(RuntimeError):
    pass


def adam_step(params, t, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=5e-4):
    """One ADAM update over ``params`` at step t (1-based).

    g = grad + weight_decay * value; first/second moments kept on the Param;
    bias-corrected; value -= lr * m_hat / (sqrt(v_hat) + eps). Aborts without
    touching any parameter if a gradient is non-finite.
    """
    if t < 1:
        raise OptimizerError(f"adam_step: t must be >= 1, got {t}")
    for p in params:
        if not np.isfinite(p.grad).all():
            raise OptimizerError(f"adam_step: non-finite gradient in "
                                 f"{p.name}; step aborted")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.value
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * np.square(g)
        p.value -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
