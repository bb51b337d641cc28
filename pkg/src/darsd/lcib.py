"""Learnable invariant basis: projection, simplex regularization, reconstruction.

The basis ``B`` (d x m) has orthonormal columns.  Features are projected to
coordinates ``w = B^T f``, squashed with a row softmax, and mapped back with
``f_hat = B w_hat``.  A discriminator tries to tell ``f`` from ``f_hat``; the
encoder and basis receive its reversed gradient.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    ContractError,
    ShapeError,
    Tensor,
    clip,
    concat,
    log,
    matmul,
    mean,
    mul,
    softmax,
    transpose,
)
from .networks import grad_reverse

PROB_CLAMP = 1e-7


class DegenerateBasisError(ValueError):
    def __init__(self, msg: str, columns):
        super().__init__(msg)
        self.columns = list(columns)


class InvariantBasis:
    def __init__(self, B, requires_grad: bool = True):
        B = B if isinstance(B, Tensor) else Tensor(B, requires_grad=requires_grad, name="lcib.B")
        if B.ndim != 2:
            raise ShapeError(f"basis must be 2-D, got {B.shape}")
        self.B = B
        self.d, self.m = B.shape
        if not self.m < self.d:
            raise ValueError(f"subspace dim m={self.m} must be smaller than d={self.d}")

    @classmethod
    def random(cls, d: int, m: int, rng: np.random.Generator) -> "InvariantBasis":
        q, _ = _qr_positive(rng.standard_normal((d, m)))
        return cls(q)

    def orthonormality_error(self) -> float:
        B = self.B.data
        return float(np.linalg.norm(B.T @ B - np.eye(self.m)))

    def named_parameters(self):
        yield "lcib.B", self.B

    def set(self, name: str, data: np.ndarray) -> None:
        self.B = Tensor(data, requires_grad=True, name="lcib.B")


def _qr_positive(A: np.ndarray):
    q, r = np.linalg.qr(A)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs, r * signs[:, None]


def project(basis: InvariantBasis, f: Tensor) -> Tensor:
    """Coordinates of each feature row in the basis: batch x d -> batch x m."""
    if f.ndim != 2 or f.shape[1] != basis.d:
        raise ShapeError(f"project: features {f.shape} do not match basis {basis.B.shape}")
    return matmul(f, basis.B)


def regularize_coords(w: Tensor) -> Tensor:
    return softmax(w, axis=1)


def reconstruct(basis: InvariantBasis, w_hat: Tensor) -> Tensor:
    if w_hat.ndim != 2 or w_hat.shape[1] != basis.m:
        raise ShapeError(f"reconstruct: coordinates {w_hat.shape} do not match basis {basis.B.shape}")
    return matmul(w_hat, transpose(basis.B))


def lcib_transform(basis: InvariantBasis, f: Tensor) -> Tensor:
    """f_hat = B softmax(B^T f), row-wise."""
    return reconstruct(basis, regularize_coords(project(basis, f)))


def reorthonormalize(basis: InvariantBasis, tol: float = 1e-10) -> InvariantBasis:
    """Thin QR with a positive R diagonal, so an orthonormal basis maps to itself.

    Raises DegenerateBasisError naming the dependent columns when B loses rank.
    """
    B = basis.B.data
    q, r = _qr_positive(B)
    diag = np.abs(np.diag(r))
    scale = max(float(np.abs(r).max()), 1e-300)
    bad = np.flatnonzero(diag <= tol * scale)
    if bad.size:
        raise DegenerateBasisError(f"basis is rank deficient at columns {bad.tolist()}", bad)
    return InvariantBasis(Tensor(q, requires_grad=basis.B.requires_grad, name="lcib.B"))


def repair_basis(basis: InvariantBasis, columns, rng: np.random.Generator) -> InvariantBasis:
    """Replace the given columns with random directions, then re-orthonormalize."""
    B = basis.B.data.copy()
    for c in columns:
        B[:, c] = rng.standard_normal(basis.d)
    return reorthonormalize(InvariantBasis(B))


def binary_cross_entropy(p: Tensor, z) -> Tensor:
    """Mean of -[z log p + (1 - z) log(1 - p)] with p clamped to [1e-7, 1 - 1e-7]."""
    z = np.asarray(z, dtype=np.float64)
    if p.shape[0] == 0:
        raise ContractError("binary_cross_entropy: empty batch")
    p = clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = mul(log(p), z) + mul(log(1.0 - p), 1.0 - z)
    return mul(mean(ll), -1.0)


def adversarial_loss(disc, feats: Tensor, recon: Tensor, reverse: float | None = None) -> Tensor:
    """Discriminator cross-entropy over the pooled batch of originals (label 1)
    and reconstructions (label 0).

    With ``reverse`` set, both inputs pass through gradient reversal of that
    strength first: the discriminator descends this loss while everything
    upstream ascends it, scaled by ``reverse``.
    """
    if feats.shape[0] == 0 or recon.shape[0] == 0:
        raise ContractError("adversarial_loss: empty batch")
    if feats.shape != recon.shape:
        raise ShapeError(f"adversarial_loss: {feats.shape} vs {recon.shape}")
    if reverse is not None:
        feats, recon = grad_reverse(feats, reverse), grad_reverse(recon, reverse)
    pooled = concat([feats, recon], axis=0)
    z = np.concatenate([np.ones(feats.shape[0]), np.zeros(recon.shape[0])])
    return binary_cross_entropy(disc(pooled), z)


def oracle_subspace_extraction(d: int, m: int, trials: int = 100, seed: int = 0) -> float:
    """Build f = B_inv w_inv + B_spe w_spe from a random orthogonal split of R^d
    and check that projecting onto B_inv returns w_inv.  Returns the max error."""
    if not m < d:
        raise ValueError(f"m={m} must be smaller than d={d}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        B_inv, B_spe = Q[:, :m], Q[:, m:]
        w_inv = rng.standard_normal(m)
        w_spe = rng.standard_normal(d - m)
        f = B_inv @ w_inv + B_spe @ w_spe
        got = project(InvariantBasis(B_inv, requires_grad=False), Tensor(f[None, :])).data[0]
        worst = max(worst, float(np.abs(got - w_inv).max()))
    return worst
