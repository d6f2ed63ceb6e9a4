"""
Optimizer
=========

.. autoclass:: vitprune.optim.Adam
    :members:
"""
import numpy as np


class Adam:
    """
    Adam with bias correction, updating parameter arrays in place.

    :Parameters:
        lr : `float`
            Step size.
        beta1, beta2 : `float`
            Moment decay rates.
        eps : `float`
            Denominator offset.
    """

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.steps = 0
        self.m = {}
        self.v = {}

    def step(self, tensors, grads):
        """
        Applies one update to every tensor in `tensors` that has an entry in
        `grads`, in sorted name order.
        """
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for name in sorted(grads):
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            tensors[name] -= self.lr * (m / correction1) / \
                (np.sqrt(v / correction2) + self.eps)
