import logging

import pytest
import torch

from flowrec.config import RunConfig
from flowrec.dataset import pad_contexts
from flowrec.encoder import prior_loss
from flowrec.errors import TrainingError
from flowrec.flow import align_loss, cfm_loss, interpolate, single_step_estimate
from flowrec.model import LossParts, build_model, init_state

f64 = torch.float64


def tiny_config(**sections) -> RunConfig:
    mapping = {
        "data": {"max_len": 4},
        "model": {
            "dim": 8,
            "layers": 1,
            "heads": 2,
            "embed_dropout": 0.0,
            "hidden_dropout": 0.0,
        },
    }
    for name, values in sections.items():
        mapping.setdefault(name, {}).update(values)
    return RunConfig.from_mapping(mapping)


def tiny_batch(num_items: int = 20, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    contexts = [(3, 7, 1), (12,), (5, 6, 9, 20), (2, 2)]
    ids, _ = pad_contexts(contexts, max_len=4)
    targets = torch.randint(1, num_items + 1, (len(contexts),), generator=gen)
    t = torch.rand(len(contexts), 1, generator=gen, dtype=f64)
    lam = 1 + 0.03 * torch.randn(len(contexts), 8, generator=gen, dtype=f64)
    return ids, targets, t, lam


def assert_gradients_match(model, loss_fn, h: float = 1e-5, prefix: str = "") -> None:
    """Central differences against autograd for every parameter under ``prefix``."""
    model.zero_grad()
    loss_fn().backward()
    with torch.no_grad():
        for name, param in model.named_parameters():
            if not name.startswith(prefix):
                continue
            flat = param.view(-1)
            if param.grad is None:
                grad = torch.zeros_like(flat)
            else:
                grad = param.grad.view(-1)
            for i in range(flat.numel()):
                original = float(flat[i])
                flat[i] = original + h
                up = float(loss_fn())
                flat[i] = original - h
                down = float(loss_fn())
                flat[i] = original
                numeric = (up - down) / (2 * h)
                analytic = float(grad[i])
                tolerance = 1e-4 * max(abs(analytic), abs(numeric)) + 1e-8
                message = f"{name}[{i}]: {analytic} vs {numeric}"
                assert abs(analytic - numeric) <= tolerance, message


# --------------------------------------------------------------------------
# Gradients
# --------------------------------------------------------------------------


def test_joint_objective_gradients_match_finite_differences() -> None:
    model = build_model(20, tiny_config(), dtype=f64).train()
    ids, targets, t, lam = tiny_batch()

    def loss_fn():
        return model.loss_parts(ids, targets, t, lam, detach_flow=False).total(
            alpha=10.0, beta=2.0
        )

    assert_gradients_match(model, loss_fn)


def test_detached_objective_gradients_match_for_the_field() -> None:
    model = build_model(20, tiny_config(), dtype=f64).train()
    ids, targets, t, lam = tiny_batch(seed=3)

    def loss_fn():
        return model.loss_parts(ids, targets, t, lam).total(alpha=10.0, beta=2.0)

    assert_gradients_match(model, loss_fn, prefix="flow.")


def test_prior_loss_gradients_match_finite_differences() -> None:
    model = build_model(20, tiny_config(), dtype=f64).train()
    ids, targets, _, _ = tiny_batch(seed=1)

    def loss_fn():
        return prior_loss(model.prior(ids), targets, model.table)

    assert_gradients_match(model, loss_fn)


# --------------------------------------------------------------------------
# Loss composition
# --------------------------------------------------------------------------


def test_loss_parts_match_independent_computation() -> None:
    model = build_model(20, tiny_config(), dtype=f64).eval()
    ids, targets, t, lam = tiny_batch(seed=2)
    parts = model.loss_parts(ids, targets, t, lam)
    with torch.no_grad():
        x0 = model.prior(ids)
        x1 = model.table[targets]
        x_t = interpolate(x0, x1, t)
        v = model.flow(x_t, t, lam, "unit_mean_mult")
        expected_prior = prior_loss(x0, targets, model.table)
        expected_cfm = cfm_loss(v, x0, x1)
        expected_align = align_loss(
            single_step_estimate(x_t, t, v), targets, model.table
        )
    assert torch.allclose(parts.prior, expected_prior, rtol=1e-12, atol=0)
    assert torch.allclose(parts.cfm, expected_cfm, rtol=1e-12, atol=0)
    assert torch.allclose(parts.align, expected_align, rtol=1e-12, atol=0)
    total = parts.total(alpha=10.0, beta=2.0)
    assert torch.allclose(
        total,
        expected_prior + 10 * expected_cfm + 2 * expected_align,
        rtol=1e-12,
        atol=0,
    )


def test_detached_flow_keeps_loss_values() -> None:
    model = build_model(20, tiny_config(), dtype=f64).eval()
    ids, targets, t, lam = tiny_batch(seed=4)
    detached = model.loss_parts(ids, targets, t, lam).as_floats()
    joint = model.loss_parts(ids, targets, t, lam, detach_flow=False).as_floats()
    assert detached == joint


def test_detached_cfm_only_trains_the_field() -> None:
    model = build_model(20, tiny_config(), dtype=f64).train()
    ids, targets, t, lam = tiny_batch(seed=5)
    parts = model.loss_parts(ids, targets, t, lam, use_prior=False, use_align=False)
    parts.cfm.backward()
    for name, param in model.named_parameters():
        moved = param.grad is not None and bool(param.grad.abs().sum() > 0)
        assert moved == name.startswith("flow."), name


def test_joint_cfm_reaches_the_encoder() -> None:
    model = build_model(20, tiny_config(), dtype=f64).train()
    ids, targets, t, lam = tiny_batch(seed=5)
    parts = model.loss_parts(
        ids, targets, t, lam, use_prior=False, use_align=False, detach_flow=False
    )
    parts.cfm.backward()
    assert float(model.item_embedding.weight.grad.abs().sum()) > 0


def test_zero_weights_leave_prior_alone_bitwise() -> None:
    model = build_model(20, tiny_config(), dtype=f64)
    ids, targets, t, lam = tiny_batch()
    parts = model.loss_parts(ids, targets, t, lam)
    assert torch.equal(parts.total(alpha=0.0, beta=0.0), parts.prior)


def test_disabled_losses_are_skipped() -> None:
    model = build_model(20, tiny_config(), dtype=f64)
    ids, targets, t, lam = tiny_batch()
    parts = model.loss_parts(ids, targets, t, lam, use_align=False, use_prior=False)
    assert parts.prior is None and parts.align is None
    assert parts.as_floats()["align"] == 0.0
    assert torch.equal(parts.total(alpha=3.0, beta=2.0), 3.0 * parts.cfm)


def test_no_active_loss() -> None:
    with pytest.raises(TrainingError, match="no active loss"):
        LossParts().total(alpha=10.0, beta=2.0)
    with pytest.raises(TrainingError, match="no active loss"):
        LossParts(cfm=torch.tensor(1.0)).total(alpha=0.0, beta=2.0)


# --------------------------------------------------------------------------
# Construction and state
# --------------------------------------------------------------------------


def test_build_model_is_seeded() -> None:
    a = build_model(20, tiny_config(), seed=5).state_dict()
    b = build_model(20, tiny_config(), seed=5).state_dict()
    c = build_model(20, tiny_config(), seed=6).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not torch.equal(a["item_embedding.weight"], c["item_embedding.weight"])


def test_build_model_leaves_global_rng_alone() -> None:
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    build_model(20, tiny_config())
    assert torch.equal(torch.rand(3), expected)


def test_pad_row_is_zero_and_shapes() -> None:
    model = build_model(20, tiny_config(), dtype=f64)
    assert torch.equal(model.table[0], torch.zeros(8, dtype=f64))
    assert model.table.shape == (21, 8)
    ids, _, _, _ = tiny_batch()
    assert model.prior(ids).shape == (4, 8)


def test_gru_backend_builds() -> None:
    model = build_model(20, tiny_config(model={"encoder": "gru"}))
    ids, _, _, _ = tiny_batch()
    assert model.prior(ids).shape == (4, 8)


def test_velocity_uses_mean_modulation() -> None:
    model = build_model(
        20, tiny_config(modulation={"mode": "literal_mult", "delta": 0.5}), dtype=f64
    )
    x = torch.randn(3, 8, dtype=f64)
    lam = torch.full((8,), 0.5, dtype=f64)
    assert torch.equal(
        model.velocity(x, 0.25), model.flow(x, 0.25, lam, "literal_mult")
    )


def test_init_state_warns_about_modulation_mode(caplog) -> None:
    with caplog.at_level(logging.WARNING, logger="flowrec"):
        state = init_state(20, tiny_config())
    assert "literal_mult" in caplog.text
    assert set(state.generators) == {"time", "modulation"}
    assert state.epoch == 0
    assert state.num_items == 20
