import numpy as np


class Adam:
    """Adaptive-moment descent over named parameters held by modules.

    ``owners`` expose ``named_parameters()`` and ``set(name, data)``; parameters
    are immutable tensors, so each step installs fresh ones.
    """

    def __init__(self, owners, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.owners = list(owners)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def parameters(self):
        for owner in self.owners:
            for name, p in owner.named_parameters():
                yield owner, name, p

    def zero_grad(self):
        for _, _, p in self.parameters():
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for owner, name, p in list(self.parameters()):
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            v = self.v.get(name)
            m = self.b1 * m + (1 - self.b1) * g if m is not None else (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g if v is not None else (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            new = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(new)):
                raise FloatingPointError(f"non-finite update for {name}")
            owner.set(name, new)
