import dataclasses

import numpy as np
import pytest
import torch

from eigen import find_equilibria_reduced, regime, sweep_rho
from errors import ConfigError, ModeError
from flows import Hyper, flow_rhs
from trainer import (
    Batch,
    TrainerConfig,
    ModelState,
    ema_update,
    flow_agreement,
    flow_agreement_ratio,
    init_state,
    loss_and_grads,
    loss_terms,
    params_of,
    sample_batch,
    sgd_step,
    train,
)

MSE = dict(sim1_loss="mse", sim2_loss="mse")


def _perturbed(state: ModelState, name: str, index, delta: float) -> ModelState:
    out = state.clone()
    out.online[name][index] += delta
    return out


# =============================================================================
# Config
# =============================================================================


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainerConfig(model="byol")
    with pytest.raises(ConfigError):
        TrainerConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainerConfig(ema_beta=1.5)
    with pytest.raises(ConfigError):
        TrainerConfig(exact=True)  # cosine sim1 has no closed form
    with pytest.raises(ConfigError):
        TrainerConfig.from_dict({"modle": "phinet"})
    assert TrainerConfig.from_dict(TrainerConfig().to_dict()) == TrainerConfig()


def test_closed_form_configs():
    assert TrainerConfig(**MSE).is_closed_form
    assert not TrainerConfig(**MSE, model="xphinet").is_closed_form
    assert not TrainerConfig(**MSE, arch="mlp1").is_closed_form
    assert not TrainerConfig(**MSE, with_aug=True).is_closed_form


# =============================================================================
# Data
# =============================================================================


def test_sample_batch_without_augmentation(rng):
    batch = sample_batch(16, 3, 0.0, rng)
    assert torch.equal(batch.x, batch.x1) and torch.equal(batch.x, batch.x2)
    assert batch.x.dtype == torch.float64
    assert batch.x3 is None


def test_sample_batch_view_covariance(rng):
    batch = sample_batch(200_000, 2, 1.0, rng, with_aug=True)
    cov = np.cov(batch.x1.numpy().T)
    np.testing.assert_allclose(cov, 2.0 * np.eye(2), atol=0.03)
    cross = batch.x1.numpy().T @ batch.x2.numpy() / 200_000
    np.testing.assert_allclose(cross, np.eye(2), atol=0.03)
    assert batch.x3.shape == (200_000, 2)


def test_sample_batch_is_deterministic(rng_factory):
    a = sample_batch(8, 2, 0.5, rng_factory(3))
    b = sample_batch(8, 2, 0.5, rng_factory(3))
    assert torch.equal(a.x1, b.x1) and torch.equal(a.x2, b.x2)


# =============================================================================
# Losses and gradients
# =============================================================================


def test_zero_params_have_zero_loss_and_gradient(rng):
    config = TrainerConfig(**MSE, init_scale=0.0)
    state = init_state(config, rng)
    losses, grads = loss_and_grads(state, sample_batch(64, 2, 1.5, rng), config)
    assert losses["total"] == 0.0
    assert all(float(g.abs().max()) == 0.0 for g in grads.values())


def test_zero_params_guard_the_cosine(rng):
    config = TrainerConfig(init_scale=0.0)
    state = init_state(config, rng)
    losses, _ = loss_and_grads(state, sample_batch(8, 2, 1.5, rng), config)
    assert losses["guarded"]
    assert np.isfinite(losses["total"])


@pytest.mark.parametrize(
    "overrides",
    [
        {},
        MSE,
        {"model": "simsiam"},
        {"model": "xphinet", "sim2_loss": "cosine"},
        {"arch": "mlp1", "hidden_width": 4, "tanh_output": True},
    ],
)
def test_autograd_matches_finite_differences(rng, overrides):
    config = TrainerConfig(d=3, m=2, **overrides)
    state = init_state(config, rng)
    if state.long is not None:
        state.long["wf"] = state.long["wf"] + 0.1
    batch = sample_batch(32, 3, 1.5, rng, with_aug=config.with_aug)
    _, grads = loss_and_grads(state, batch, config)
    h = 1e-6
    for name, theta in state.online.items():
        for index in [(0, 0), (theta.shape[0] - 1, theta.shape[1] - 1)]:
            up = loss_terms(_perturbed(state, name, index, h), batch, config, target=state)["total"]
            down = loss_terms(_perturbed(state, name, index, -h), batch, config, target=state)["total"]
            numeric = (up - down) / (2 * h)
            assert float(grads[name][index]) == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_sampled_loss_and_gradient_match_closed_form(rng):
    config = TrainerConfig(**MSE, d=3, m=2)
    state = init_state(config, rng)
    sampled, sampled_grads = loss_and_grads(state, sample_batch(100_000, 3, 1.5, rng), config)
    exact, exact_grads = loss_and_grads(state, None, dataclasses.replace(config, exact=True))
    assert sampled["total"] == pytest.approx(exact["total"], rel=2e-2)
    diff = np.concatenate([(sampled_grads[k] - exact_grads[k]).numpy().ravel() for k in exact_grads])
    ref = np.concatenate([exact_grads[k].numpy().ravel() for k in exact_grads])
    assert np.linalg.norm(diff) <= 5e-2 * np.linalg.norm(ref)


def test_cosine_sim1_is_symmetric_in_the_views(rng):
    config = TrainerConfig(model="simsiam")
    state = init_state(config, rng)
    batch = sample_batch(32, 2, 1.5, rng)
    swapped = Batch(x=batch.x, x1=batch.x2, x2=batch.x1)
    assert loss_terms(state, batch, config)["sim1"] == pytest.approx(loss_terms(state, swapped, config)["sim1"], rel=1e-12)


def test_mse_sim2_is_the_mean_of_half_squared_errors(rng):
    config = TrainerConfig(**MSE)
    state = init_state(config, rng)
    batch = sample_batch(64, 2, 1.5, rng)
    wf, wh, wg = (state.online[k] for k in ("wf", "wh", "wg"))
    z = batch.x @ wf.T
    y1 = batch.x1 @ wf.T @ wh.T @ wg.T
    y2 = batch.x2 @ wf.T @ wh.T @ wg.T
    by_hand = 0.25 * (((y1 - z) ** 2).sum(dim=1).mean() + ((y2 - z) ** 2).sum(dim=1).mean())
    assert loss_terms(state, batch, config)["sim2"] == pytest.approx(float(by_hand), rel=1e-12)


def test_exact_mode_needs_no_batch(rng):
    config = TrainerConfig(**MSE)
    with pytest.raises(ConfigError):
        loss_and_grads(init_state(config, rng), None, config)


# =============================================================================
# Updates
# =============================================================================


def test_sgd_step_applies_weight_decay(rng):
    config = TrainerConfig(lr=0.1, rho=0.5)
    state = init_state(config, rng)
    zeros = {k: torch.zeros_like(v) for k, v in state.online.items()}
    stepped = sgd_step(state, zeros, config)
    for name, theta in state.online.items():
        torch.testing.assert_close(stepped.online[name], 0.95 * theta)


def test_exact_training_step_is_an_euler_step(rng):
    config = TrainerConfig(**MSE, exact=True, steps=1, lr=0.01)
    start = init_state(config, rng)
    final, _ = train(config, init=start)
    params = params_of(start)
    expected = params.flatten() + config.lr * flow_rhs(params, config.hyper, form="exact").flatten()
    np.testing.assert_allclose(params_of(final).flatten(), expected, rtol=1e-12, atol=1e-14)


def test_ema_update():
    config = TrainerConfig(model="xphinet", ema_beta=0.99)
    state = ModelState(
        online={"wf": torch.ones((2, 2), dtype=torch.float64)},
        long={"wf": torch.zeros((2, 2), dtype=torch.float64)},
    )
    twice = ema_update(ema_update(state, config), config)
    torch.testing.assert_close(twice.long["wf"], torch.full((2, 2), 0.0199, dtype=torch.float64))
    frozen = ema_update(state, dataclasses.replace(config, ema_beta=1.0))
    assert torch.equal(frozen.long["wf"], state.long["wf"])
    copied = ema_update(state, dataclasses.replace(config, ema_beta=0.0))
    assert torch.equal(copied.long["wf"], state.online["wf"])
    with pytest.raises(ModeError):
        ema_update(state, TrainerConfig(model="phinet"))


def test_frozen_long_encoder_never_moves(rng):
    config = TrainerConfig(model="xphinet", ema_beta=1.0, steps=5, batch=16)
    start = init_state(config, rng)
    final, _ = train(config, init=start)
    torch.testing.assert_close(final.long["wf"], start.long["wf"])
    assert not torch.equal(final.online["wf"], start.online["wf"])


def test_long_encoder_gets_no_gradient(rng):
    config = TrainerConfig(model="xphinet")
    state = init_state(config, rng)
    _, grads = loss_and_grads(state, sample_batch(16, 2, 1.5, rng), config)
    assert set(grads) == set(state.online)


# =============================================================================
# Training
# =============================================================================


def test_training_is_deterministic():
    config = TrainerConfig(steps=20, batch=32, seed=7)
    a, metrics_a = train(config)
    b, metrics_b = train(config)
    for name in a.online:
        assert torch.equal(a.online[name], b.online[name])
    assert metrics_a.series == metrics_b.series


def test_metrics_are_recorded_on_schedule():
    config = TrainerConfig(steps=10, batch=8, record_every=4)
    _, metrics = train(config)
    assert metrics.steps == [0, 4, 8, 10]
    assert metrics.columns()[0] == "step"
    assert len(list(metrics.rows())) == 4


def test_mlp_training_runs():
    config = TrainerConfig(arch="mlp1", hidden_width=8, tanh_output=True, steps=10, batch=16)
    state, metrics = train(config)
    assert set(state.online) == {"wf", "h_in", "h_out", "g_in", "g_out"}
    assert np.isfinite(metrics.final("loss_total"))
    assert np.isnan(metrics.final("principal_angle_max"))


def test_exact_training_reaches_the_eigen_sinks():
    config = TrainerConfig(**MSE, exact=True, sigma2=1.5, rho=0.03, lr=0.05, steps=6000, d=3, m=3,
                           init_scale=0.6, seed=3)
    sink = max((eq for eq in find_equilibria_reduced(config.hyper, form="exact") if eq.klass == "sink"),
               key=lambda eq: eq.psi)
    final, metrics = train(config)
    wf = final.online["wf"].numpy()
    eigs = np.linalg.eigvalsh(wf @ wf.T)
    np.testing.assert_allclose(eigs, [0.0, sink.psi ** 2, sink.psi ** 2], atol=1e-3)
    assert metrics.final("principal_angle_max") <= 5.0


def test_simsiam_collapses_above_the_critical_decay():
    config = TrainerConfig(**MSE, model="simsiam", exact=True, rho=0.12, lr=0.05, steps=4000, seed=1)
    _, metrics = train(config)
    assert metrics.final("top_eigenvalue") <= 1e-3


def test_phinet_collapses_above_the_exact_form_boundary():
    boundary = max(sweep_rho(1.5, 0.05, 0.3, grid=8, form="exact").boundaries)
    assert 0.12 < boundary < 0.15
    assert regime(Hyper(1.5, 0.12), form="exact").regime == "medium"
    assert regime(Hyper(1.5, 0.15), form="exact").regime == "strong"
    for seed in range(3):
        config = TrainerConfig(**MSE, exact=True, rho=0.15, lr=0.05, steps=6000, seed=seed)
        _, metrics = train(config)
        assert metrics.final("top_eigenvalue") <= 1e-3


# =============================================================================
# Flow agreement
# =============================================================================


def test_flow_agreement_is_first_order():
    config = TrainerConfig(**MSE, exact=True, lr=0.05, seed=2)
    assert flow_agreement_ratio(config, horizon=5.0) == pytest.approx(2.0, rel=0.2)


def test_flow_agreement_from_zero_is_exact():
    config = TrainerConfig(**MSE, exact=True, init_scale=0.0)
    assert flow_agreement(config, horizon=1.0) <= 1e-8


def test_flow_agreement_errors():
    with pytest.raises(ConfigError):
        flow_agreement(TrainerConfig(), horizon=1.0)
    with pytest.raises(ConfigError):
        flow_agreement(TrainerConfig(**MSE, batch=256), horizon=1.0)
    with pytest.raises(ConfigError):
        flow_agreement(TrainerConfig(**MSE, exact=True, lr=0.3), horizon=1.0)
