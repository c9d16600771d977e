"""AUROC (with its correct/incorrect decomposition), rank correlation and
the almost-stochastic-order significance test.

ID samples are the positive class throughout; higher scores mean "more
in-distribution".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the group average."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    boundaries = np.r_[True, sorted_vals[1:] != sorted_vals[:-1]]
    group = np.cumsum(boundaries) - 1
    counts = np.bincount(group)
    ends = np.cumsum(counts)
    avg = ends - (counts - 1) / 2.0
    ranks = np.empty(len(values))
    ranks[order] = avg[group]
    return ranks


def auroc(pos, neg) -> float:
    """Mann-Whitney AUROC with ties counted 0.5, via a single sort.

    Equals the pairwise fraction  (#(p>n) + 0.5 #(p==n)) / (|pos| |neg|).
    """
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc needs non-empty positive and negative scores")
    ranks = _midranks(np.concatenate([pos, neg]))
    n_pos, n_neg = pos.size, neg.size
    rank_sum = ranks[:n_pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class AurocTriple:
    """AUROC of all / correctly classified / misclassified ID samples
    against one OOD set. A part is None when its sample set is empty."""

    id_vs_ood: float
    correct_vs_ood: float | None
    incorrect_vs_ood: float | None
    n_correct: int
    n_incorrect: int
    n_ood: int

    def to_json(self) -> dict:
        return {
            "id_vs_ood": self.id_vs_ood,
            "correct_vs_ood": self.correct_vs_ood,
            "incorrect_vs_ood": self.incorrect_vs_ood,
            "n_correct": self.n_correct,
            "n_incorrect": self.n_incorrect,
            "n_ood": self.n_ood,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AurocTriple":
        return cls(**obj)


def auroc_triple(id_scores, id_correct_mask, ood_scores) -> AurocTriple:
    """Decomposed AUROC; the decomposition identity
    id = (n_c * correct + n_i * incorrect) / (n_c + n_i) holds exactly."""
    id_scores = np.asarray(id_scores, dtype=np.float64).ravel()
    mask = np.asarray(id_correct_mask, dtype=bool).ravel()
    ood_scores = np.asarray(ood_scores, dtype=np.float64).ravel()
    if mask.shape != id_scores.shape:
        raise ValueError("correctness mask length differs from ID scores")
    if ood_scores.size == 0:
        raise ValueError("empty OOD score set")
    n_correct = int(mask.sum())
    n_incorrect = int(mask.size - n_correct)
    return AurocTriple(
        id_vs_ood=auroc(id_scores, ood_scores),
        correct_vs_ood=auroc(id_scores[mask], ood_scores) if n_correct else None,
        incorrect_vs_ood=auroc(id_scores[~mask], ood_scores) if n_incorrect else None,
        n_correct=n_correct,
        n_incorrect=n_incorrect,
        n_ood=int(ood_scores.size),
    )


def aggregate_median(per_ood_set) -> float:
    """Median over OOD sets (mean of the two middle values for even counts)."""
    values = list(per_ood_set.values()) if isinstance(per_ood_set, dict) else list(per_ood_set)
    if not values:
        raise ValueError("nothing to aggregate")
    return float(np.median(values))


def aggregate_mean(per_ood_set) -> float:
    values = list(per_ood_set.values()) if isinstance(per_ood_set, dict) else list(per_ood_set)
    if not values:
        raise ValueError("nothing to aggregate")
    return float(np.mean(values))


def spearman(x, y) -> float:
    """Pearson correlation of midranks; nan when either side is constant."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("spearman inputs differ in length")
    if x.size < 2:
        raise ValueError("spearman needs at least 2 points")
    rx, ry = _midranks(x), _midranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0.0:
        return float("nan")
    return float((rx * ry).sum() / denom)


@dataclass
class AsoResult:
    """Outcome of the almost-stochastic-order comparison of A against B."""

    eps_min: float
    alpha: float
    n_bootstrap: int
    seed: int

    @property
    def a_better_than_b(self) -> bool:
        # the claim "A better than B" requires eps_min < 0.5
        return self.eps_min < 0.5


def _quantiles_on_grid(sorted_vals: np.ndarray, mids: np.ndarray) -> np.ndarray:
    idx = np.minimum((mids * sorted_vals.size).astype(np.int64), sorted_vals.size - 1)
    return sorted_vals[idx]


def violation_ratio(scores_a, scores_b) -> float:
    """Stochastic-order violation ratio of "A >= B" between empirical
    quantile functions: integral of the squared violation (where A's
    quantile sits below B's) over the squared quantile gap. 0 when A
    dominates everywhere, 1 in the reversed case, 0.5 for identical inputs.
    """
    a = np.sort(np.asarray(scores_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(scores_b, dtype=np.float64).ravel())
    # both quantile functions are step functions; integrate exactly over the
    # merged breakpoint grid, evaluating at interval midpoints
    ts = np.union1d(np.arange(1, a.size + 1) / a.size,
                    np.arange(1, b.size + 1) / b.size)
    starts = np.r_[0.0, ts[:-1]]
    lengths = ts - starts
    mids = (starts + ts) / 2.0
    qa = _quantiles_on_grid(a, mids)
    qb = _quantiles_on_grid(b, mids)
    gap = qb - qa
    denom = float((lengths * gap * gap).sum())
    if denom == 0.0:
        return 0.5
    num = float((lengths * np.clip(gap, 0.0, None) ** 2).sum())
    return num / denom


def aso(scores_a, scores_b, alpha: float = 0.05, n_bootstrap: int = 1000,
        seed: int = 0) -> AsoResult:
    """Almost Stochastic Order test: eps_min is the level-(1-alpha) upper
    confidence bound (bootstrap quantile) on the violation ratio of
    "A stochastically better than B". Deterministic given the seed."""
    a = np.asarray(scores_a, dtype=np.float64).ravel()
    b = np.asarray(scores_b, dtype=np.float64).ravel()
    if a.size < 5 or b.size < 5:
        raise ValueError("aso needs at least 5 samples per side")
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    ratios = np.empty(n_bootstrap)
    for r in range(n_bootstrap):
        ra = a[gen.integers(0, a.size, a.size)]
        rb = b[gen.integers(0, b.size, b.size)]
        ratios[r] = violation_ratio(ra, rb)
    eps_min = float(np.clip(np.quantile(ratios, 1.0 - alpha), 0.0, 1.0))
    return AsoResult(eps_min=eps_min, alpha=alpha, n_bootstrap=n_bootstrap, seed=seed)
