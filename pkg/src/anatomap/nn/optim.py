"""Adam optimizer with bias-corrected moment estimates."""

import numpy as np

from .. import errors


def adam_step(param, grad, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update on a single parameter array.

    ``state`` is a dict with keys ``m``, ``v`` and ``t`` (created by
    :func:`init_state`); it is updated in place and the new parameter
    value is returned.
    """
    param = np.asarray(param)
    grad = np.asarray(grad)
    if param.shape != grad.shape:
        raise errors.ShapeMismatch(f"adam: param {param.shape} vs grad {grad.shape}")
    state["t"] += 1
    t = state["t"]
    state["m"] = beta1 * state["m"] + (1.0 - beta1) * grad
    state["v"] = beta2 * state["v"] + (1.0 - beta2) * grad * grad
    m_hat = state["m"] / (1.0 - beta1 ** t)
    v_hat = state["v"] / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


def init_state(param):
    return {"m": np.zeros_like(param), "v": np.zeros_like(param), "t": 0}


class Adam:
    """Drives :func:`adam_step` over a named parameter collection."""

    def __init__(self, weights, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.weights = weights
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {name: init_state(p.data) for name, p in weights.items()}

    def step(self):
        for name, p in self.weights.items():
            if p.grad is None:
                continue
            p.data = adam_step(p.data, p.grad, self.state[name],
                               self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        self.weights.zero_grad()
