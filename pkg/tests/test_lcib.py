import math

import numpy as np
import pytest

from darsd.autodiff import ContractError, ShapeError, Tape, Tensor, backward, gradient_check
from darsd.lcib import (
    DegenerateBasisError,
    InvariantBasis,
    adversarial_loss,
    binary_cross_entropy,
    lcib_transform,
    oracle_subspace_extraction,
    project,
    reconstruct,
    regularize_coords,
    reorthonormalize,
    repair_basis,
)
from darsd.networks import Discriminator

import oracles


def _split(d, m, seed=0):
    Q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))
    return Q[:, :m], Q[:, m:]


def test_basis_requires_m_below_d():
    with pytest.raises(ValueError):
        InvariantBasis(np.eye(3))


def test_random_basis_orthonormal():
    b = InvariantBasis.random(10, 4, np.random.default_rng(0))
    assert b.orthonormality_error() < 1e-14


# --- project / softmax / reconstruct ------------------------------------------

def test_project_basis_column_gives_one_hot():
    Bi, _ = _split(8, 3)
    b = InvariantBasis(Bi)
    np.testing.assert_allclose(project(b, Tensor(Bi.T)).data, np.eye(3), atol=1e-15)


def test_project_orthogonal_complement_gives_zero():
    Bi, Bs = _split(8, 3)
    np.testing.assert_allclose(project(InvariantBasis(Bi), Tensor(Bs.T)).data, 0.0, atol=1e-15)


def test_project_recovers_invariant_coordinates():
    rng = np.random.default_rng(1)
    Bi, Bs = _split(12, 4, seed=1)
    w, v = rng.standard_normal((5, 4)), rng.standard_normal((5, 8))
    got = project(InvariantBasis(Bi), Tensor(w @ Bi.T + v @ Bs.T)).data
    assert np.abs(got - w).max() < 1e-10


def test_project_shape_error():
    with pytest.raises(ShapeError):
        project(InvariantBasis.random(6, 2, np.random.default_rng(0)), Tensor(np.zeros((2, 5))))


def test_regularize_coords_cases():
    np.testing.assert_allclose(regularize_coords(Tensor(np.full((1, 4), 3.0))).data, 0.25, atol=1e-15)
    assert regularize_coords(Tensor([[10.0, 0, 0, 0]])).data[0, 0] > 0.999


def test_reconstruct_cases():
    rng = np.random.default_rng(2)
    b = InvariantBasis.random(7, 3, rng)
    B = b.B.data
    np.testing.assert_array_equal(reconstruct(b, Tensor(np.eye(3))).data, B.T)
    np.testing.assert_array_equal(reconstruct(b, Tensor(np.zeros((2, 3)))).data, 0.0)
    w = rng.standard_normal((4, 3))
    want = [[sum(w[i, k] * B[j, k] for k in range(3)) for j in range(7)] for i in range(4)]
    np.testing.assert_allclose(reconstruct(b, Tensor(w)).data, want, atol=1e-12)
    with pytest.raises(ShapeError):
        reconstruct(b, Tensor(np.zeros((2, 4))))


def test_reconstruction_lies_in_span():
    rng = np.random.default_rng(3)
    b = InvariantBasis.random(9, 3, rng)
    fh = lcib_transform(b, Tensor(rng.standard_normal((6, 9)))).data
    B = b.B.data
    assert np.abs(fh - fh @ B @ B.T).max() < 1e-10


def test_transform_gradient():
    rng = np.random.default_rng(4)
    b = InvariantBasis.random(6, 2, rng)
    wts = Tensor(rng.standard_normal((3, 6)))
    err = gradient_check(lambda f, B: (lcib_transform(InvariantBasis(B), f) * wts).sum(),
                         [Tensor(rng.standard_normal((3, 6))), b.B])
    assert err < 1e-4


# --- reorthonormalization --------------------------------------------------------

def test_reorthonormalize_idempotent_on_orthonormal():
    b = InvariantBasis.random(8, 3, np.random.default_rng(5))
    np.testing.assert_allclose(reorthonormalize(b).B.data, b.B.data, atol=1e-12)


def test_reorthonormalize_undoes_scaling():
    b = InvariantBasis.random(8, 3, np.random.default_rng(6))
    np.testing.assert_allclose(reorthonormalize(InvariantBasis(2 * b.B.data)).B.data, b.B.data, atol=1e-12)


def test_reorthonormalize_small_perturbation_keeps_subspace():
    rng = np.random.default_rng(7)
    b = InvariantBasis.random(10, 4, rng)
    noisy = b.B.data + 0.01 * rng.standard_normal((10, 4))
    out = reorthonormalize(InvariantBasis(noisy))
    assert out.orthonormality_error() < 1e-12
    # principal angles against an SVD basis of the perturbed input span
    U = np.linalg.svd(noisy, full_matrices=False)[0]
    cosines = np.linalg.svd(U.T @ out.B.data, compute_uv=False)
    assert np.arccos(np.clip(cosines.min(), -1, 1)) < 0.02


def test_rank_deficient_basis_raises_and_repairs():
    rng = np.random.default_rng(8)
    B = rng.standard_normal((6, 3))
    B[:, 2] = 2 * B[:, 0]
    with pytest.raises(DegenerateBasisError) as info:
        reorthonormalize(InvariantBasis(B))
    assert info.value.columns == [2]
    fixed = repair_basis(InvariantBasis(B), info.value.columns, rng)
    assert fixed.orthonormality_error() < 1e-12


# --- adversarial loss ---------------------------------------------------------------

def test_bce_half_is_ln2():
    assert binary_cross_entropy(Tensor(np.full(6, 0.5)), [1, 0, 1, 0, 1, 1]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_perfect_separation_goes_to_zero():
    vals = [binary_cross_entropy(Tensor([1 - e, e]), [1, 0]).item() for e in (1e-2, 1e-4, 1e-6)]
    assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-5
    # clamping keeps even a certain wrong answer finite
    assert math.isfinite(binary_cross_entropy(Tensor([0.0, 1.0]), [1, 0]).item())


def test_bce_matches_hand_sum():
    rng = np.random.default_rng(9)
    p, z = rng.uniform(0.01, 0.99, 8), rng.integers(0, 2, 8)
    assert binary_cross_entropy(Tensor(p), z).item() == pytest.approx(oracles.bce(p, z), abs=1e-12)


def test_adversarial_loss_labels_originals_one():
    rng = np.random.default_rng(10)
    disc = Discriminator(4, 5, rng=rng)
    f, fh = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    probs = disc(Tensor(np.concatenate([f, fh]))).data
    got = adversarial_loss(disc, Tensor(f), Tensor(fh)).item()
    assert got == pytest.approx(oracles.bce(probs, [1, 1, 1, 0, 0, 0]), abs=1e-12)


def test_adversarial_loss_contract_errors():
    disc = Discriminator(4, 5)
    with pytest.raises(ContractError):
        adversarial_loss(disc, Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 4))))
    with pytest.raises(ShapeError):
        adversarial_loss(disc, Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4))))


def test_reversal_splits_gradient_signs():
    rng = np.random.default_rng(11)
    disc = Discriminator(4, 5, rng=rng)
    f = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    fh = Tensor(rng.standard_normal((3, 4)))
    with Tape():
        backward(adversarial_loss(disc, f, fh))
    plain_f, plain_w = f.grad.copy(), disc.params["l1.w"].grad.copy()
    f.grad = None
    for _, p in disc.named_parameters():
        p.grad = None
    with Tape():
        backward(adversarial_loss(disc, f, fh, reverse=0.5))
    np.testing.assert_allclose(f.grad, -0.5 * plain_f, atol=1e-15)
    np.testing.assert_allclose(disc.params["l1.w"].grad, plain_w, atol=1e-15)


# --- coordinate recovery oracle --------------------------------------------------------

@pytest.mark.parametrize("d,m", [(16, 4), (32, 8), (128, 24)])
def test_oracle_exact_recovery(d, m):
    assert oracle_subspace_extraction(d, m, trials=100, seed=0) < 1e-10


def test_oracle_without_specific_part_reconstructs_exactly():
    Bi, _ = _split(10, 3, seed=3)
    w = np.array([[0.3, -1.2, 2.0]])
    b = InvariantBasis(Bi)
    f = w @ Bi.T
    np.testing.assert_allclose(project(b, Tensor(f)).data, w, atol=1e-14)
    np.testing.assert_allclose(reconstruct(b, project(b, Tensor(f))).data, f, atol=1e-14)


def test_oracle_largest_m_zero_invariant_part():
    Bi, Bs = _split(9, 8, seed=4)
    f = 3.0 * Bs.T
    np.testing.assert_allclose(project(InvariantBasis(Bi), Tensor(f)).data, 0.0, atol=1e-14)
