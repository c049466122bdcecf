"""SGD with classical momentum and decoupled-from-nothing weight decay.

Update rule per parameter p with gradient g:
    g_eff = g + weight_decay * p
    v     = momentum * v + g_eff
    p    -= lr * v
All updates are in place so parameter views (e.g. slices of a shared tensor)
write through to their backing storage.
"""

import numpy as np

from splitmix.errors import NumericsError


class SGD:
    def __init__(self, momentum=0.9, weight_decay=5e-4):
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity = {}

    def step(self, params, grads, lr):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        for name, p in params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient for {name!r}")
            if self.weight_decay:
                g = g + self.weight_decay * p
            if self.momentum:
                v = self._velocity.get(name)
                if v is None:
                    v = np.zeros_like(p)
                    self._velocity[name] = v
                v *= self.momentum
                v += g
                g = v
            np.subtract(p, lr * g, out=p)
