import math

import numpy as np
import pytest
import torch

from fdiff import central_diff_grad, rel_error, tiny_meta_problem
from helpers import tiny_batch, tiny_dataset, tiny_model
from sketchadapt.errors import NumericalError
from sketchadapt.losses import LossConfig
from sketchadapt.metatrain import (
    TrainConfig,
    compute_eta,
    inner_update,
    model_params,
    outer_step,
    sgd_adapt,
    train,
    training_loss,
    validation_loss,
)
from sketchadapt.nets import clone_params, params_equal


@pytest.fixture(scope="module")
def setup():
    ds = tiny_dataset(samples=6, seed=2)
    model = tiny_model(seed=1, dtype=torch.float64)
    batch = tiny_batch(model, ds, seed=3, dtype=torch.float64)
    return ds, model, batch


LOSS = LossConfig()
TRAIN = TrainConfig(meta_batch=1, n_train_pairs=3, n_val_pairs=2, pool_size=3)


# ------------------------------------------------------------ inner update


def test_toy_scalar_sgd_step():
    theta = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)
    alpha = torch.tensor(0.1, dtype=torch.float64, requires_grad=True)
    adapted = sgd_adapt({"theta": theta}, lambda p: 0.5 * p["theta"] ** 2, ["theta"], alpha)
    assert adapted["theta"].item() == pytest.approx(0.9)


def test_toy_quadratic_meta_gradients_exact():
    theta = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)
    alpha = torch.tensor(0.1, dtype=torch.float64, requires_grad=True)
    adapted = sgd_adapt({"theta": theta}, lambda p: 0.5 * p["theta"] ** 2, ["theta"], alpha)
    l_val = 0.5 * adapted["theta"] ** 2
    g_theta, g_alpha = torch.autograd.grad(l_val, [theta, alpha])
    assert g_theta.item() == pytest.approx(0.81, abs=1e-6)
    assert g_alpha.item() == pytest.approx(-0.9, abs=1e-6)

    # central-difference oracle on L_val(theta, alpha)
    def l_val_fn():
        a = sgd_adapt({"theta": theta}, lambda p: 0.5 * p["theta"] ** 2, ["theta"], alpha)
        return 0.5 * a["theta"] ** 2

    assert central_diff_grad(l_val_fn, theta).item() == pytest.approx(0.81, abs=1e-6)
    assert central_diff_grad(l_val_fn, alpha).item() == pytest.approx(-0.9, abs=1e-6)


def test_toy_first_order_gradient():
    theta = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)
    alpha = torch.tensor(0.1, dtype=torch.float64, requires_grad=True)
    adapted = sgd_adapt(
        {"theta": theta}, lambda p: 0.5 * p["theta"] ** 2, ["theta"], alpha, first_order=True
    )
    (g_theta,) = torch.autograd.grad(0.5 * adapted["theta"] ** 2, [theta])
    assert g_theta.item() == pytest.approx(0.9, abs=1e-9)


def test_meta_gradients_match_finite_differences_small_model():
    params, val_loss = tiny_meta_problem(seed=4)
    analytic = torch.autograd.grad(val_loss(), list(params.values()))
    for (name, p), g in zip(params.items(), analytic):
        fd = central_diff_grad(val_loss, p)
        assert rel_error(g, fd) <= 1e-3, name


def test_meta_gradients_match_fd_two_inner_steps():
    params, val_loss = tiny_meta_problem(seed=5, inner_steps=2)
    analytic = torch.autograd.grad(val_loss(), list(params.values()))
    for (name, p), g in zip(params.items(), analytic):
        fd = central_diff_grad(val_loss, p)
        assert rel_error(g, fd) <= 1e-3, name


def test_alpha_zero_makes_inner_update_identity(setup):
    _, model, batch = setup
    with torch.no_grad():
        saved = model.alpha.clone()
        model.alpha.zero_()
    try:
        params = model_params(model)
        adapted, _ = inner_update(model, params, batch, LOSS, TRAIN)
        for name in params:
            assert torch.equal(adapted[name], params[name]), name
    finally:
        with torch.no_grad():
            model.alpha.copy_(saved)


def test_lambda_rec_zero_reduces_to_triplet(setup):
    _, model, batch = setup
    params = model_params(model)
    cfg = LossConfig(lambda_rec=0.0, lambda_tri=0.7)
    total, parts = training_loss(model, params, batch, cfg, use_eta=True)
    assert parts["rec_sketch"] == 0.0 and parts["rec_photo"] == 0.0
    assert total.item() == pytest.approx(0.7 * parts["triplet"])


def test_alpha_zero_outer_gradient_equals_plain_gradient(setup):
    _, model, batch = setup
    with torch.no_grad():
        saved = model.alpha.clone()
        model.alpha.zero_()
    try:
        params = model_params(model)
        adapted, _ = inner_update(model, params, batch, LOSS, TRAIN)
        enc = [params[n] for n in params if n.startswith(("encoder.", "primary."))]
        g_meta = torch.autograd.grad(
            validation_loss(model, adapted, batch, LOSS.margin), enc, allow_unused=True
        )
        g_plain = torch.autograd.grad(
            validation_loss(model, params, batch, LOSS.margin), enc, allow_unused=True
        )
        for a, b in zip(g_meta, g_plain):
            if b is None:
                assert a is None or torch.all(a == 0)
            else:
                assert torch.allclose(a, b, atol=1e-12)
    finally:
        with torch.no_grad():
            model.alpha.copy_(saved)


# ------------------------------------------------------------- stroke eta


def test_eta_zero_initialized_net_gives_half(setup):
    _, model, batch = setup
    with torch.no_grad():
        saved = [p.clone() for p in model.eta_net.parameters()]
        for p in model.eta_net.parameters():
            p.zero_()
    try:
        params = model_params(model)
        eta = compute_eta(
            model, params, batch.sketches[0], batch.targets[0],
            batch.photos[0], batch.negatives[0], LOSS.margin,
        )
        assert torch.allclose(eta, torch.full_like(eta, 0.5))
        # weighted loss is then exactly half the unweighted loss
        t_half, _ = training_loss(model, params, batch, LOSS, use_eta=True)
        t_full, parts = training_loss(model, params, batch, LOSS, use_eta=False)
        rec_half = (t_half.item() - LOSS.lambda_tri * parts["triplet"]) / LOSS.lambda_rec - parts["rec_photo"]
        rec_full = parts["rec_sketch"]
        assert rec_half == pytest.approx(0.5 * rec_full, rel=1e-9)
    finally:
        with torch.no_grad():
            for p, s in zip(model.eta_net.parameters(), saved):
                p.copy_(s)


def test_eta_single_step_and_determinism(setup):
    _, model, batch = setup
    params = model_params(model)
    args = (
        model, params, batch.sketches[0], batch.targets[0][:1],
        batch.photos[0], batch.negatives[0], LOSS.margin,
    )
    eta1 = compute_eta(*args)
    assert eta1.shape == (1,)
    assert 0.0 < eta1.item() < 1.0
    eta2 = compute_eta(*args)
    assert torch.equal(eta1.detach(), eta2.detach())


def test_eta_net_receives_outer_gradient(setup):
    _, model, batch = setup
    model.zero_grad(set_to_none=True)
    params = model_params(model)
    adapted, _ = inner_update(model, params, batch, LOSS, TRAIN)
    validation_loss(model, adapted, batch, LOSS.margin).backward()
    norms = [p.grad.abs().sum().item() for p in model.eta_net.parameters() if p.grad is not None]
    assert norms and sum(norms) > 0.0
    model.zero_grad(set_to_none=True)


# ------------------------------------------------------------- outer step


def test_outer_step_updates_unfrozen_groups(setup):
    ds, _, _ = setup
    model = tiny_model(seed=5, dtype=torch.float64)
    for name, p in model.named_parameters():
        if name.startswith("photo_decoder."):
            p.requires_grad_(False)
    batch = tiny_batch(model, ds, seed=9, dtype=torch.float64)
    before = clone_params(model)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=1e-3)
    cfg = TrainConfig(meta_batch=1, n_train_pairs=3, n_val_pairs=2, pool_size=3,
                      frozen_groups=("photo_decoder",))
    rec = outer_step(model, opt, [batch], LOSS, cfg)
    assert rec["adapted"] is True
    after = clone_params(model)
    changed_groups = {
        n.split(".")[0] for n in before
        if not torch.equal(before[n], after[n])
    }
    assert "photo_decoder" not in changed_groups
    assert {"encoder", "primary", "sketch_decoder", "eta_net", "alpha"} <= changed_groups


def test_outer_step_single_episode_equals_batch_of_one(setup):
    ds, _, _ = setup
    results = []
    for _ in range(2):
        model = tiny_model(seed=7, dtype=torch.float64)
        batch = tiny_batch(model, ds, seed=11, dtype=torch.float64)
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        outer_step(model, opt, [batch], LOSS, TRAIN)
        results.append(clone_params(model))
    assert params_equal(*results)


def test_joint_mode_skips_adaptation(setup):
    ds, _, _ = setup
    model = tiny_model(seed=8, dtype=torch.float64)
    batch = tiny_batch(model, ds, seed=13, dtype=torch.float64)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    cfg = TrainConfig(meta_batch=1, use_meta=False, use_eta=False,
                      n_train_pairs=3, n_val_pairs=2, pool_size=3)
    rec = outer_step(model, opt, [batch], LOSS, cfg)
    assert rec["adapted"] is False
    assert math.isnan(rec["l_val"])


def test_non_finite_loss_raises(setup):
    ds, _, _ = setup
    model = tiny_model(seed=9, dtype=torch.float64)
    batch = tiny_batch(model, ds, seed=15, dtype=torch.float64)
    batch.targets[0][0, 0] = float("nan")
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    with pytest.raises(NumericalError):
        outer_step(model, opt, [batch], LOSS, TRAIN)


def test_alpha_underflow_clamps_and_warns(setup):
    ds, _, _ = setup
    model = tiny_model(seed=10, dtype=torch.float64)
    with torch.no_grad():
        model.alpha.fill_(1e-9)
    batch = tiny_batch(model, ds, seed=17, dtype=torch.float64)
    opt = torch.optim.Adam(model.parameters(), lr=1e-12)
    with pytest.warns(UserWarning, match="underflow"):
        outer_step(model, opt, [batch], LOSS, TRAIN)
    assert model.alpha.item() >= 1e-8


# ------------------------------------------------------------------ train


def test_train_zero_iterations_keeps_initialization(tmp_path):
    from helpers import TINY_NET
    from sketchadapt.nets import RetrievalModel
    from sketchadapt.seeding import derive_seed

    ds = tiny_dataset(samples=6, seed=2)
    cfg = TrainConfig(outer_iters=0, seed=123)
    model, rows = train(ds, TINY_NET, LOSS, cfg, out_dir=tmp_path / "run0")
    assert rows == []
    torch.manual_seed(derive_seed(123, "init"))
    reference = RetrievalModel(TINY_NET)
    assert params_equal(clone_params(model), clone_params(reference))
    assert (tmp_path / "run0" / "checkpoint.pt").exists()


def test_train_reproducible_given_seed(tmp_path):
    ds = tiny_dataset(samples=6, seed=2)
    from helpers import TINY_NET

    cfg = TrainConfig(outer_iters=2, meta_batch=2, n_train_pairs=2, n_val_pairs=1,
                      pool_size=2, seed=7, outer_lr=1e-3)
    m1, rows1 = train(ds, TINY_NET, LOSS, cfg)
    m2, rows2 = train(ds, TINY_NET, LOSS, cfg)
    assert params_equal(clone_params(m1), clone_params(m2))
    assert [r["l_trn"] for r in rows1] == [r["l_trn"] for r in rows2]
    assert [r["l_val"] for r in rows1] == [r["l_val"] for r in rows2]
