import math

import numpy as np
import pytest
import torch

from fdiff import central_diff_grad, rel_error
from sketchadapt.errors import ShapeError
from sketchadapt.losses import (
    LossConfig,
    photo_recon_loss,
    sketch_recon_loss,
    sketch_recon_steps,
    triplet_loss,
)

torch.manual_seed(0)


def vec_at_sq_dist(base, d, dim=4):
    """A vector at squared distance d from base along the first axis."""
    v = base.clone()
    v[0] += math.sqrt(d)
    return v


def test_triplet_zero_distances_gives_margin():
    z = torch.zeros(4, dtype=torch.float64)
    assert triplet_loss(z, z, z, margin=0.3).item() == pytest.approx(0.3)


def test_triplet_margin_satisfied_is_zero():
    s = torch.zeros(4, dtype=torch.float64)
    pos = vec_at_sq_dist(s, 0.1)
    neg = vec_at_sq_dist(s, 0.5)
    assert triplet_loss(s, pos, neg, margin=0.3).item() == pytest.approx(0.0)


def test_triplet_direct_substitution():
    s = torch.zeros(4, dtype=torch.float64)
    pos = vec_at_sq_dist(s, 0.5)
    neg = vec_at_sq_dist(s, 0.1)
    assert triplet_loss(s, pos, neg, margin=0.3).item() == pytest.approx(0.7)


def test_triplet_orthogonal_invariance():
    rng = torch.Generator().manual_seed(3)
    s, p, n = (torch.randn(6, generator=rng, dtype=torch.float64) for _ in range(3))
    q, _ = torch.linalg.qr(torch.randn(6, 6, generator=rng, dtype=torch.float64))
    base = triplet_loss(s, p, n, margin=0.3)
    rotated = triplet_loss(q @ s, q @ p, q @ n, margin=0.3)
    assert rotated.item() == pytest.approx(base.item(), abs=1e-10)


def test_triplet_shape_mismatch():
    with pytest.raises(ShapeError):
        triplet_loss(torch.zeros(4), torch.zeros(4), torch.zeros(5), margin=0.3)


def test_recon_perfect_prediction_is_tiny():
    t = torch.tensor([[0.2, 0.3, 1, 0, 0], [0.4, 0.5, 0, 0, 1]], dtype=torch.float64)
    psi = t.clone()
    psi[:, 2:] *= 50.0  # large logit on the true class
    assert sketch_recon_loss(psi, t).item() == pytest.approx(0.0, abs=1e-12)


def test_recon_uniform_pen_logits_is_ln3():
    t = torch.tensor([[0.2, 0.3, 1, 0, 0], [0.4, 0.5, 0, 0, 1]], dtype=torch.float64)
    psi = t.clone()
    psi[:, 2:] = 0.7  # equal logits
    assert sketch_recon_loss(psi, t).item() == pytest.approx(math.log(3.0), abs=1e-12)


def test_recon_unit_eta_identity():
    rng = torch.Generator().manual_seed(5)
    t = torch.tensor([[0.2, 0.3, 1, 0, 0], [0.4, 0.5, 0, 1, 0], [0.6, 0.1, 0, 0, 1]], dtype=torch.float64)
    psi = torch.randn(3, 5, generator=rng, dtype=torch.float64)
    weighted = sketch_recon_loss(psi, t, eta=torch.ones(3, dtype=torch.float64))
    plain = sketch_recon_loss(psi, t)
    assert torch.equal(weighted, plain)


def test_recon_linear_in_eta():
    rng = torch.Generator().manual_seed(6)
    t = torch.tensor([[0.2, 0.3, 1, 0, 0], [0.6, 0.1, 0, 0, 1]], dtype=torch.float64)
    psi = torch.randn(2, 5, generator=rng, dtype=torch.float64)
    eta = torch.rand(2, generator=rng, dtype=torch.float64)
    for c in (0.5, 2.0, 7.0):
        assert sketch_recon_loss(psi, t, c * eta).item() == pytest.approx(
            c * sketch_recon_loss(psi, t, eta).item()
        )


def test_recon_length_mismatch():
    t = torch.tensor([[0.2, 0.3, 0, 0, 1]], dtype=torch.float64)
    with pytest.raises(ShapeError):
        sketch_recon_loss(torch.zeros(2, 5, dtype=torch.float64), t)


def test_photo_loss_examples():
    e = torch.rand(8, 8, 3, dtype=torch.float64)
    assert photo_recon_loss(e, e).item() == 0.0
    assert photo_recon_loss(e + 0.1, e).item() == pytest.approx(0.01, abs=1e-12)
    # channel-replicated images are invariant to channel permutation
    mono = torch.rand(8, 8, 1, dtype=torch.float64).repeat(1, 1, 3)
    pred = torch.rand(8, 8, 1, dtype=torch.float64).repeat(1, 1, 3)
    perm = [2, 0, 1]
    assert photo_recon_loss(pred[:, :, perm], mono[:, :, perm]).item() == pytest.approx(
        photo_recon_loss(pred, mono).item()
    )
    with pytest.raises(ShapeError):
        photo_recon_loss(torch.zeros(4, 4, 3), torch.zeros(4, 5, 3))


def test_losses_nonnegative_random():
    rng = torch.Generator().manual_seed(9)
    for _ in range(20):
        s, p, n = (torch.randn(5, generator=rng) for _ in range(3))
        assert triplet_loss(s, p, n, 0.3).item() >= 0.0
        psi = torch.randn(4, 5, generator=rng)
        tgt = torch.zeros(4, 5)
        tgt[:, :2] = torch.rand(4, 2, generator=rng)
        tgt[:3, 2] = 1
        tgt[3, 4] = 1
        assert sketch_recon_loss(psi, tgt).item() >= 0.0


def test_loss_config_validation():
    LossConfig().validate()
    with pytest.raises(Exception):
        LossConfig(margin=0.0).validate()
    with pytest.raises(Exception):
        LossConfig(lambda_tri=0.0, lambda_rec=0.0).validate()


# ------------------------------------------------- finite-difference checks


def test_triplet_gradient_matches_central_differences():
    rng = torch.Generator().manual_seed(21)
    s = torch.randn(6, generator=rng, dtype=torch.float64, requires_grad=True)
    p = torch.randn(6, generator=rng, dtype=torch.float64, requires_grad=True)
    n = torch.randn(6, generator=rng, dtype=torch.float64, requires_grad=True)
    loss = triplet_loss(s, p, n, margin=5.0)  # large margin keeps the hinge active
    loss.backward()
    for leaf in (s, p, n):
        fd = central_diff_grad(lambda: triplet_loss(s, p, n, margin=5.0), leaf)
        assert rel_error(leaf.grad, fd) <= 1e-4


def test_recon_gradients_match_central_differences():
    rng = torch.Generator().manual_seed(22)
    tgt = torch.zeros(3, 5, dtype=torch.float64)
    tgt[:, :2] = torch.rand(3, 2, generator=rng, dtype=torch.float64)
    tgt[:2, 2] = 1
    tgt[2, 4] = 1
    psi = torch.randn(3, 5, generator=rng, dtype=torch.float64, requires_grad=True)
    eta = torch.rand(3, generator=rng, dtype=torch.float64, requires_grad=True)

    sketch_recon_loss(psi, tgt, eta).backward()
    fd_psi = central_diff_grad(lambda: sketch_recon_loss(psi, tgt, eta), psi)
    fd_eta = central_diff_grad(lambda: sketch_recon_loss(psi, tgt, eta), eta)
    assert rel_error(psi.grad, fd_psi) <= 1e-4
    assert rel_error(eta.grad, fd_eta) <= 1e-4


def test_photo_gradient_matches_central_differences():
    rng = torch.Generator().manual_seed(23)
    target = torch.rand(4, 4, 3, generator=rng, dtype=torch.float64)
    pred = torch.rand(4, 4, 3, generator=rng, dtype=torch.float64, requires_grad=True)
    photo_recon_loss(pred, target).backward()
    fd = central_diff_grad(lambda: photo_recon_loss(pred, target), pred)
    assert rel_error(pred.grad, fd) <= 1e-4
