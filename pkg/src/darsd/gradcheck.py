"""Central-difference checks over every primitive op and every loss."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradient_check
from .contrastive import anti_divergence_loss, self_consistency_loss, supervised_contrastive_loss, total_loss
from .lcib import InvariantBasis, adversarial_loss, binary_cross_entropy, lcib_transform
from .networks import Discriminator


def _away_from_zero(rng, shape, gap=0.05):
    """Gaussian values pushed out of (-gap, gap) so kinked ops are smooth nearby."""
    x = rng.standard_normal(shape)
    return np.where(x >= 0, x + gap, x - gap)


def _cases(rng: np.random.Generator):
    n = int(rng.integers(3, 9))
    d = int(rng.integers(2, 6))
    A = Tensor(rng.standard_normal((n, d)))
    A2 = Tensor(rng.standard_normal((n, d)))
    W = Tensor(rng.standard_normal((d, 3)))
    K = Tensor(_away_from_zero(rng, (n, d)))
    P = Tensor(rng.uniform(0.2, 2.0, (n, d)))
    row = Tensor(rng.standard_normal((1, d)))
    labels = rng.integers(0, 3, n)
    labels[:3] = [0, 1, 0]
    probs = Tensor(rng.uniform(0.05, 0.95, n))
    z = rng.integers(0, 2, n)
    x = Tensor(rng.standard_normal((2, 7, 2)))
    cw = Tensor(rng.standard_normal((3, 2, 3)) * 0.5)
    B = InvariantBasis.random(d + 2, 2, rng)
    F = Tensor(rng.standard_normal((n, d + 2)))
    disc = Discriminator(d, 6, rng=rng)
    dis, aug = Tensor(rng.standard_normal((max(n - 1, 2), d))), Tensor(rng.standard_normal((max(n - 1, 2), d)))
    src = Tensor(rng.standard_normal((n + 2, d)))

    # weights keep every output a genuine function of all inputs
    def wsum(t):
        return ad.sum_(ad.mul(t, Tensor(np.linspace(0.5, 1.5, t.data.size).reshape(t.shape))))

    return {
        "add": (lambda a, b: wsum(ad.add(a, b)), [A, row]),
        "mul": (lambda a, b: wsum(ad.mul(a, b)), [A, A2]),
        "matmul": (lambda a, w: wsum(ad.matmul(a, w)), [A, W]),
        "relu": (lambda a: wsum(ad.relu(a)), [K]),
        "exp": (lambda a: wsum(ad.exp(a)), [A]),
        "log": (lambda a: wsum(ad.log(a)), [P]),
        "sum": (lambda a: wsum(ad.sum_(a, axis=0)), [A]),
        "mean": (lambda a: wsum(ad.mean(a, axis=1)), [A]),
        "softmax": (lambda a: wsum(ad.softmax(a)), [A]),
        "cosine_similarity": (lambda a, b: ad.cosine_similarity(a, b), [Tensor(A.data[0]), Tensor(A2.data[0])]),
        "cosine_matrix": (lambda a, b: wsum(ad.cosine_matrix(a, b)), [A, src]),
        "conv1d": (lambda a, w: wsum(ad.conv1d(a, w, dilation=2)), [x, cw]),
        "concat": (lambda a, b: wsum(ad.concat([a, b], axis=0)), [A, A2]),
        "index": (lambda a: wsum(ad.index(a, np.array([0, 1, 0]))), [A]),
        "reshape": (lambda a: wsum(ad.reshape(a, (d, n))), [A]),
        "transpose": (lambda a: wsum(ad.transpose(a)), [A]),
        "clip": (lambda a: wsum(ad.clip(a, -0.5, 0.5)), [Tensor(np.where(np.abs(K.data) > 0.5, K.data + np.sign(K.data) * 0.1, K.data * 0.8))]),
        "lcib_transform": (lambda f, b: wsum(lcib_transform(InvariantBasis(b), f)), [F, B.B]),
        "bce": (lambda p: binary_cross_entropy(p, z), [probs]),
        "adversarial_loss": (lambda f, r: adversarial_loss(disc, f, r, reverse=None), [A, A2]),
        "supervised_contrastive_loss": (lambda f: supervised_contrastive_loss(f, labels, 0.5), [A]),
        "self_consistency_loss": (lambda a, b: self_consistency_loss(a, b, 0.5), [dis, aug]),
        "anti_divergence_loss": (lambda a, s: anti_divergence_loss(a, s, 0.5), [dis, src]),
        "total_loss": (lambda f, a, b, s: total_loss(supervised_contrastive_loss(f, labels, 0.5),
                                                     self_consistency_loss(a, b, 0.5),
                                                     anti_divergence_loss(a, s, 0.5),
                                                     # pre-scaled, so the objective is the plain weighted sum
                                                     ad.mul(adversarial_loss(disc, f, ad.add(f, Tensor(0.3))), 0.5),
                                                     0.5, 0.5)[1],
                       [A, dis, aug, src]),
    }


def run_gradcheck(seed: int = 0, repeats: int = 3, eps: float = 1e-5) -> dict[str, float]:
    """Max relative error per op/loss over ``repeats`` random batches."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(repeats):
        for name, (fn, inputs) in _cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), gradient_check(fn, inputs, eps))
    return worst
