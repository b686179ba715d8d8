import json

import pytest
import torch

from flowrec.config import RunConfig
from flowrec.dataset import Split, UserSequence, make_batches
from flowrec.errors import DivergedError
from flowrec.flow import single_step_estimate
from flowrec.model import build_model
from flowrec.sampler import (
    Trajectory,
    collect_trajectories,
    dump_rankings,
    euler_integrate,
    iter_rankings,
    mask_seen,
    read_trace,
    sample_endpoints,
    score,
    top_k,
    trace_export,
)

f64 = torch.float64


def small_model(**model):
    config = RunConfig.from_mapping(
        {"data": {"max_len": 6}, "model": {"dim": 8, "layers": 1, "heads": 2, **model}}
    )
    return build_model(15, config, dtype=f64).eval()


def small_split(users: int = 5) -> Split:
    return Split(
        tuple(UserSequence(u, tuple(range(1 + u, 7 + u))) for u in range(users))
    )


# --------------------------------------------------------------------------
# Integration
# --------------------------------------------------------------------------


def test_constant_field_telescopes_exactly() -> None:
    x0 = torch.tensor([[0.5, -1.25]], dtype=f64)
    c = torch.tensor([[2.0, -3.0]], dtype=f64)
    for steps in (1, 2, 4, 8, 16, 32):
        x1, _ = euler_integrate(x0, lambda x, t: c, steps)
        assert torch.equal(x1, x0 + c)


def test_constant_field_any_step_count() -> None:
    x0 = torch.randn(3, 4, dtype=f64)
    c = torch.randn(3, 4, dtype=f64)
    results = [
        euler_integrate(x0, lambda x, t: c, steps)[0] for steps in (1, 5, 10, 15, 35)
    ]
    for x1 in results:
        assert torch.allclose(x1, x0 + c, rtol=0, atol=1e-14)


def test_zero_field_is_identity() -> None:
    x0 = torch.randn(2, 3)
    x1, _ = euler_integrate(x0, lambda x, t: torch.zeros_like(x), 10)
    assert torch.equal(x1, x0)


def test_euler_on_decay_matches_closed_form() -> None:
    x0 = torch.ones(1, dtype=f64)
    for steps in (1, 5, 10, 35):
        x1, _ = euler_integrate(x0, lambda x, t: -x, steps)
        assert abs(float(x1) - (1 - 1 / steps) ** steps) <= 1e-12
    x1, _ = euler_integrate(x0, lambda x, t: -x, 10)
    assert float(x1) == pytest.approx(0.34868, abs=1e-5)


def test_euler_uses_left_endpoint_grid() -> None:
    seen = []

    def field(x, t):
        seen.append(t)
        return torch.zeros_like(x)

    euler_integrate(torch.zeros(1), field, 4)
    assert seen == [0.0, 0.25, 0.5, 0.75]


def test_euler_records_states() -> None:
    x0 = torch.zeros(2, 3, dtype=f64)
    x1, states = euler_integrate(x0, lambda x, t: torch.ones_like(x), 4, record=True)
    assert states.shape == (5, 2, 3)
    assert torch.equal(states[0], x0)
    assert torch.equal(states[-1], x1)


def test_euler_divergence_names_step() -> None:
    def field(x, t):
        return torch.full_like(x, float("inf")) if t >= 0.4 else torch.zeros_like(x)

    with pytest.raises(DivergedError, match="step 3") as info:
        euler_integrate(torch.ones(2), field, 5)
    assert info.value.step == 3


def test_euler_rejects_zero_steps() -> None:
    with pytest.raises(ValueError):
        euler_integrate(torch.zeros(1), lambda x, t: x, 0)


def test_one_step_equals_single_step_estimate() -> None:
    model = small_model()
    ids = next(make_batches(small_split(), "test", max_len=6)).ids
    with torch.no_grad():
        x0 = model.prior(ids)
        expected = single_step_estimate(x0, 0.0, model.velocity(x0, 0.0))
    assert torch.equal(sample_endpoints(model, ids, 1), expected)


def test_endpoints_do_not_depend_on_batch_composition() -> None:
    model = small_model()
    split = small_split(7)
    whole = next(make_batches(split, "test", batch_size=7, max_len=6))
    together = sample_endpoints(model, whole.ids, 5)
    for b in range(7):
        alone = sample_endpoints(model, whole.ids[b : b + 1], 5)
        assert torch.allclose(alone[0], together[b], rtol=0, atol=1e-12)


def test_from_prior_skips_the_flow() -> None:
    model = small_model()
    ids = next(make_batches(small_split(), "test", max_len=6)).ids
    with torch.no_grad():
        assert torch.equal(
            sample_endpoints(model, ids, 10, from_prior=True), model.prior(ids)
        )


# --------------------------------------------------------------------------
# Scoring and ranking
# --------------------------------------------------------------------------


def test_score_orthonormal_table() -> None:
    table = torch.cat([torch.zeros(1, 4), torch.eye(4)])
    assert int(score(table[3], table).argmax()) + 1 == 3
    assert torch.equal(score(torch.zeros(4), table), torch.zeros(4))


def test_score_matches_dot_product_loop() -> None:
    torch.manual_seed(0)
    table = torch.randn(11, 8, dtype=f64)
    x = torch.randn(8, dtype=f64)
    scores = score(x, table)
    for i in range(1, 11):
        assert float(scores[i - 1]) == pytest.approx(
            sum(float(x[j] * table[i, j]) for j in range(8)), abs=1e-12
        )


def test_top_k_orders_by_score() -> None:
    ranked = top_k(torch.tensor([0.1, 0.9, 0.5]), 2)
    assert [i for i, _ in ranked] == [2, 3]


def test_top_k_ties_prefer_lower_id() -> None:
    assert [i for i, _ in top_k(torch.zeros(6), 3)] == [1, 2, 3]
    assert [i for i, _ in top_k(torch.tensor([1.0, 2.0, 1.0, 2.0]), 4)] == [2, 4, 1, 3]


def test_top_k_matches_full_sort_oracle() -> None:
    gen = torch.Generator().manual_seed(9)
    scores = torch.randint(0, 50, (1000,), generator=gen).double()
    oracle = sorted(range(1000), key=lambda i: (-float(scores[i]), i))
    assert [i - 1 for i, _ in top_k(scores, 100)] == oracle[:100]


def test_top_k_bounds() -> None:
    with pytest.raises(ValueError, match="positive"):
        top_k(torch.zeros(3), 0)
    with pytest.raises(ValueError, match="exceeds"):
        top_k(torch.zeros(3), 4)


def test_mask_seen_pushes_history_down() -> None:
    scores = torch.tensor([[3.0, 2.0, 1.0]])
    ids = torch.tensor([[0, 1, 3]])
    assert mask_seen(scores, ids).tolist() == [[float("-inf"), 2.0, float("-inf")]]


# --------------------------------------------------------------------------
# Exports
# --------------------------------------------------------------------------


def test_trace_rows_and_round_trip(tmp_path) -> None:
    model = small_model()
    batch = next(make_batches(small_split(5), "test", max_len=6))
    trajectories = collect_trajectories(model, batch, 10)
    assert all(t.steps == 10 for t in trajectories)
    path = trace_export(trajectories, tmp_path / "trace.csv")
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + 55
    assert lines[0].split(",")[:3] == ["user", "step", "dim_0"]
    loaded = read_trace(path)
    assert [t.user for t in loaded] == [t.user for t in trajectories]
    for mine, theirs in zip(trajectories, loaded):
        assert theirs.target_id == mine.target_id
        assert torch.equal(theirs.states, mine.states.double())


def test_trajectory_ends_at_sampled_endpoint() -> None:
    model = small_model()
    batch = next(make_batches(small_split(3), "test", max_len=6))
    trajectories = collect_trajectories(model, batch, 4)
    endpoints = sample_endpoints(model, batch.ids, 4)
    with torch.no_grad():
        priors = model.prior(batch.ids)
    for b, trajectory in enumerate(trajectories):
        assert torch.equal(trajectory.states[0], priors[b])
        assert torch.equal(trajectory.states[-1], endpoints[b])


def test_empty_trace_is_header_only(tmp_path) -> None:
    path = trace_export([], tmp_path / "empty.csv", dim=2)
    assert path.read_text().strip() == "user,step,dim_0,dim_1,target_id"
    assert read_trace(path) == []


def test_dump_rankings(tmp_path) -> None:
    model = small_model()
    batches = make_batches(small_split(3), "test", max_len=6)
    path = dump_rankings(tmp_path / "ranked.jsonl", iter_rankings(model, batches, 5, 4))
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["user"] for r in records] == [0, 1, 2]
    for record in records:
        assert len(record["items"]) == 4
        assert record["scores"] == sorted(record["scores"], reverse=True)


def test_trajectory_steps_property() -> None:
    assert Trajectory(user=0, states=torch.zeros(4, 2), target_id=1).steps == 3
