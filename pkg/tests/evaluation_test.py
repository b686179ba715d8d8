import json
import math

import numpy as np
import pytest
import torch
from torch import nn

from flowrec.config import RunConfig, SamplerConfig
from flowrec.dataset import Split, UserSequence, compute_groups
from flowrec.evaluation import (
    EvalReport,
    evaluate,
    hr_at_k,
    metrics_from_ranks,
    ndcg_at_k,
    popularity_baseline,
    rank_report,
    steps_sweep,
    target_ranks,
    timing_report,
    write_csv,
)
from flowrec.model import build_model
from flowrec.sampler import score

f64 = torch.float64


def markov_split(users: int, items: int, length: int = 8, seed: int = 0) -> Split:
    rng = np.random.default_rng(seed)
    return Split(
        tuple(
            UserSequence(u, tuple(int(i) for i in rng.integers(1, items + 1, length)))
            for u in range(users)
        )
    )


def small_model(num_items: int = 30):
    config = RunConfig.from_mapping(
        {"data": {"max_len": 8}, "model": {"dim": 8, "layers": 1, "heads": 2}}
    )
    return build_model(num_items, config, dtype=f64).eval()


# --------------------------------------------------------------------------
# Per-user metrics
# --------------------------------------------------------------------------


def test_hr_at_k() -> None:
    assert hr_at_k(1, 5) == 1
    assert hr_at_k(6, 5) == 0
    assert hr_at_k(10, 10) == 1
    assert hr_at_k(None, 10) == 0


def test_ndcg_at_k() -> None:
    assert ndcg_at_k(1, 10) == 1.0
    assert ndcg_at_k(3, 10) == 0.5
    assert ndcg_at_k(11, 10) == 0.0
    assert ndcg_at_k(None, 5) == 0.0


def test_target_ranks_tie_rule() -> None:
    scores = torch.tensor([[1.0, 3.0, 3.0, 2.0], [0.0, 0.0, 0.0, 0.0]])
    assert target_ranks(scores, torch.tensor([3, 4])).tolist() == [2, 4]
    assert target_ranks(scores, torch.tensor([2, 1])).tolist() == [1, 1]


def test_metrics_from_ranks_match_per_user_functions() -> None:
    ranks = np.array([1, 3, 6, 10, 11, 200])
    metrics = metrics_from_ranks(ranks)
    for k in (5, 10):
        hits = [hr_at_k(int(r), k) for r in ranks]
        gains = [ndcg_at_k(int(r), k) for r in ranks]
        assert metrics[f"hr@{k}"] == pytest.approx(np.mean(hits))
        assert metrics[f"ndcg@{k}"] == pytest.approx(np.mean(gains))
    assert list(metrics) == ["hr@5", "ndcg@5", "hr@10", "ndcg@10"]


def test_metric_ordering_invariants() -> None:
    ranks = np.random.default_rng(0).integers(1, 40, size=500)
    m = metrics_from_ranks(ranks)
    assert 0 <= m["hr@5"] <= m["hr@10"] <= 1
    assert m["ndcg@5"] <= m["ndcg@10"]
    assert m["ndcg@5"] <= m["hr@5"] and m["ndcg@10"] <= m["hr@10"]


# --------------------------------------------------------------------------
# Rankers
# --------------------------------------------------------------------------


def test_oracle_scores_exactly_one() -> None:
    split = markov_split(40, 25)
    table = torch.cat([torch.zeros(1, 25), torch.eye(25)])
    def oracle(batch):
        return score(table[batch.targets], table)

    report = rank_report(oracle, split, batch_size=16)
    assert report.overall == {"hr@5": 1.0, "ndcg@5": 1.0, "hr@10": 1.0, "ndcg@10": 1.0}
    assert report.users == 40


def test_random_ranker_hits_at_uniform_rate() -> None:
    items, users = 500, 3000
    split = markov_split(users, items, seed=1)
    gen = torch.Generator().manual_seed(2)
    report = rank_report(lambda b: torch.rand(len(b), items, generator=gen), split)
    p = 10 / items
    sigma = math.sqrt(p * (1 - p) / users)
    assert abs(report.overall["hr@10"] - p) <= 3 * sigma


def test_sharded_evaluation_is_bitwise_identical() -> None:
    model = small_model()
    split = markov_split(90, 30, seed=3)
    groups = compute_groups(split, 30)
    sampler = SamplerConfig(steps=5)
    single = evaluate(model, split, sampler, groups, batch_size=8, workers=1)
    sharded = evaluate(model, split, sampler, groups, batch_size=8, workers=4)
    assert single.overall == sharded.overall
    assert single.groups == sharded.groups


def test_group_sizes_partition_users() -> None:
    model = small_model()
    split = markov_split(60, 30, seed=4)
    report = evaluate(model, split, SamplerConfig(steps=2), compute_groups(split, 30))
    sizes = report.group_sizes
    assert sizes["head"] + sizes["tail"] == report.users == 60
    assert sizes["short"] + sizes["middle"] + sizes["long"] == 60


def test_prior_ranker_has_no_steps() -> None:
    model = small_model()
    split = markov_split(10, 30)
    report = evaluate(model, split, SamplerConfig(), from_prior=True)
    assert report.ranker == "prior"
    assert report.steps is None


def test_valid_phase_uses_valid_targets() -> None:
    split = Split((UserSequence(0, (1, 2, 3, 4)),))
    table = torch.cat([torch.zeros(1, 4), torch.eye(4)])
    def always_three(batch):
        return score(table[3:4].expand(len(batch), -1), table)

    report = rank_report(always_three, split, phase="valid")
    assert report.overall["hr@5"] == 1.0


# --------------------------------------------------------------------------
# Popularity baseline
# --------------------------------------------------------------------------


def test_popularity_dominant_target() -> None:
    # Item 1 dominates training and is every test target.
    seqs = tuple(UserSequence(u, (1, 1, 2 + u % 5, 1 + u % 7, 1)) for u in range(9))
    report = popularity_baseline(Split(seqs), num_items=8)
    assert report.overall["hr@5"] == 1.0
    assert report.ranker == "popularity"


def test_popularity_ties_fall_back_to_item_id() -> None:
    # Every item appears exactly once in training, so all scores tie.
    sequences = tuple(
        UserSequence(u, (u + 1, (u + 3) % 12 + 1, (5 * u) % 12 + 1)) for u in range(12)
    )
    report = popularity_baseline(Split(sequences), num_items=12)
    expected = np.array([s.items[-1] for s in sequences])
    assert report.overall == metrics_from_ranks(expected)


def test_popularity_is_deterministic() -> None:
    split = markov_split(50, 20, seed=5)
    a = popularity_baseline(split, 20, compute_groups(split, 20))
    b = popularity_baseline(split, 20, compute_groups(split, 20))
    assert a.to_dict() == b.to_dict()


# --------------------------------------------------------------------------
# Sweeps, timing and serialization
# --------------------------------------------------------------------------


def test_steps_sweep_single_entry_matches_evaluate() -> None:
    model = small_model()
    split = markov_split(20, 30, seed=6)
    sweep = steps_sweep(model, split, [1])
    assert sweep == {1: evaluate(model, split, SamplerConfig(steps=1)).overall}


def test_steps_sweep_constant_field_is_flat() -> None:
    model = small_model()
    for param in model.flow.parameters():
        nn.init.zeros_(param)
    split = markov_split(20, 30, seed=7)
    sweep = steps_sweep(model, split, [1, 5, 10, 35])
    assert len({tuple(m.values()) for m in sweep.values()}) == 1


def test_timing_report_records_steps() -> None:
    model = small_model()
    split = markov_split(10, 30)
    history = [{"epoch": 1, "seconds": 2.0}, {"epoch": 2, "seconds": 4.0}]
    timing = timing_report(model, split, [1, 5], steps=10, history=history, repeats=3)
    assert timing.steps == 10
    assert set(timing.inference_seconds) == {1, 5, 10}
    assert all(s > 0 for s in timing.inference_seconds.values())
    assert timing.train_seconds_per_epoch == 3.0
    assert timing.to_dict()["repeats"] == 3


def test_report_serializes_percentages() -> None:
    report = EvalReport(
        phase="test",
        steps=10,
        users=3,
        overall={"hr@5": 1 / 3, "ndcg@5": 0.123456789, "hr@10": 2 / 3, "ndcg@10": 1},
        groups={"head": {"hr@5": 0.5}},
        config_hash="abc",
    )
    data = json.loads(report.to_json())
    assert data["overall"] == {
        "hr@5": 33.3333,
        "ndcg@5": 12.3457,
        "hr@10": 66.6667,
        "ndcg@10": 100.0,
    }
    assert data["steps"] == 10
    row = report.to_csv_row(variant="full")
    assert row["variant"] == "full"
    assert row["head_hr@5"] == 50.0
    assert row["config_hash"] == "abc"


def test_write_csv(tmp_path) -> None:
    rows = [{"a": 1, "b": 2.5}, {"a": 2, "b": 3.5}]
    text = write_csv(rows, tmp_path / "rows.csv").read_text()
    assert text.splitlines() == ["a,b", "1,2.5", "2,3.5"]
