import numpy as np

from .dataset import InteractionLog


def _transitions(
    rng: np.random.Generator, num_items: int, fanout: int, follow_prob: float
) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 <= follow_prob <= 1.0:
        raise ValueError(f"follow_prob must lie in [0, 1]; got {follow_prob}.")
    if not 1 <= fanout <= num_items:
        raise ValueError(f"fanout must lie in [1, {num_items}]; got {fanout}.")
    successors = np.stack(
        [rng.choice(num_items, size=fanout, replace=False) for _ in range(num_items)]
    )
    weights = rng.dirichlet(np.ones(fanout), size=num_items)
    return successors, weights


def markov_corpus(
    num_users: int = 2000,
    num_items: int = 300,
    *,
    min_len: int = 8,
    max_len: int = 30,
    fanout: int = 3,
    follow_prob: float = 0.9,
    seed: int = 0,
) -> InteractionLog:
    """
    Generate a seeded first-order Markov interaction corpus.

    Every item gets ``fanout`` preferred successors with random weights. Each
    user starts at a random item and at every step follows the transition
    table with probability ``follow_prob`` or jumps to a uniform random item.
    With ``fanout=1`` and ``follow_prob=1`` the next item is fully determined
    by the current one.
    """
    rng = np.random.default_rng(seed)
    successors, weights = _transitions(rng, num_items, fanout, follow_prob)
    rows: list[tuple[str, str, int]] = []
    for user in range(num_users):
        length = int(rng.integers(min_len, max_len + 1))
        current = int(rng.integers(num_items))
        for step in range(length):
            rows.append((f"u{user}", f"i{current}", step))
            if rng.random() < follow_prob:
                current = int(
                    successors[current, rng.choice(fanout, p=weights[current])]
                )
            else:
                current = int(rng.integers(num_items))
    return InteractionLog.from_records(rows)


def markov_ndcg_ceiling(
    num_items: int = 300,
    *,
    fanout: int = 3,
    follow_prob: float = 0.9,
    seed: int = 0,
    k: int = 10,
) -> float:
    """
    Expected NDCG@k of the ideal next-item ranker on ``markov_corpus(seed=seed)``.

    The ideal ranker orders items by their true transition probability from
    the current item. The result averages over current items uniformly, so
    it is a reference level rather than an exact bound on a finite sample.
    """
    rng = np.random.default_rng(seed)
    successors, weights = _transitions(rng, num_items, fanout, follow_prob)
    probs = np.full((num_items, num_items), (1.0 - follow_prob) / num_items)
    probs[np.arange(num_items)[:, None], successors] += follow_prob * weights
    depth = min(k, num_items)
    top = -np.sort(-probs, axis=1)[:, :depth]
    discounts = 1.0 / np.log2(np.arange(2, depth + 2))
    return float((top @ discounts).mean())
