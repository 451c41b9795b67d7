"""Pairwise system comparison and evaluation analysis utilities.

Covers Bradley-Terry aggregation of per-instance wins with exact sign tests,
propensity-score weighting and stratification, Fleiss' kappa agreement,
evaluation-set sampling (score-decile stratification, k-means++ seeding for
diverse subsets), iterative-coding support, and the global error profile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .metric import ScoreRecord

ERROR_CATEGORIES = (
    "good_enough",
    "too_vague",
    "factual_error",
    "formatting_error",
    "mis_focused",
    "too_long",
)

PROPENSITY_CLIP = 0.01
BT_REL_TOL = 1e-10
BT_MAX_ITER = 100_000


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Outcome matrices and Bradley-Terry fitting


@dataclass
class OutcomeMatrix:
    """Counts of per-instance pairwise wins between systems.

    wins[i][j] counts shared instances where system i's score strictly exceeds
    system j's; ties[i][j] counts exact ties (symmetric).
    """

    systems: list[str]
    wins: np.ndarray
    ties: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.systems)
        self.wins = np.asarray(self.wins, dtype=np.float64)
        self.ties = np.asarray(self.ties, dtype=np.float64)
        if self.wins.shape != (n, n) or self.ties.shape != (n, n):
            raise AnalysisError("matrix shapes must match the system list")
        if np.any(np.diag(self.wins) != 0):
            raise AnalysisError("diagonal wins must be zero")

    def index(self, system: str) -> int:
        return self.systems.index(system)


def build_outcomes(records: Iterable[ScoreRecord], systems: Sequence[str] | None = None) -> OutcomeMatrix:
    """Tally pairwise wins over instances (entity, language) shared by both systems."""
    by_system: dict[str, dict[tuple[str, str], float]] = {}
    for rec in records:
        by_system.setdefault(rec.system, {})[(rec.entity_id, rec.language)] = rec.score
    names = list(systems) if systems is not None else sorted(by_system)
    missing = [s for s in names if s not in by_system]
    if missing:
        raise AnalysisError(f"no scores for systems: {missing}")
    n = len(names)
    wins = np.zeros((n, n))
    ties = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            a, b = by_system[names[i]], by_system[names[j]]
            for key in set(a) & set(b):
                if a[key] > b[key]:
                    wins[i, j] += 1
                elif b[key] > a[key]:
                    wins[j, i] += 1
                else:
                    ties[i, j] += 1
                    ties[j, i] += 1
    return OutcomeMatrix(names, wins, ties)


@dataclass
class BTScores:
    systems: list[str]
    scores: dict[str, float]  # normalized so the first system's score is 1
    pairwise: np.ndarray  # pairwise[i][j] = s_i / (s_i + s_j)

    def probability(self, a: str, b: str) -> float:
        return float(self.pairwise[self.systems.index(a), self.systems.index(b)])


def _check_connected(systems: Sequence[str], wins: np.ndarray) -> None:
    """The MLE exists iff every ordered pair is linked by a directed win path."""
    n = len(systems)
    zero_total = [systems[i] for i in range(n) if wins[i].sum() == 0]
    if zero_total:
        raise AnalysisError(f"systems with zero total wins: {zero_total}")
    adjacency = wins > 0
    reach = np.eye(n, dtype=bool) | adjacency
    for _ in range(n):
        reach = reach | (reach @ reach)
    if not reach.all():
        bad = sorted(
            {systems[i] for i in range(n) for j in range(n) if not reach[i, j]}
            | {systems[j] for i in range(n) for j in range(n) if not reach[i, j]}
        )
        raise AnalysisError(f"comparison graph not strongly connected; involves: {bad}")


def fit_bradley_terry(outcomes: OutcomeMatrix) -> BTScores:
    """Maximum-likelihood latent scores via minorization-maximization.

    Ties contribute half a win to each side before fitting. Iterates until the
    relative change of every score drops below ``BT_REL_TOL``.
    """
    systems = outcomes.systems
    n = len(systems)
    if n < 2:
        raise AnalysisError("need at least two systems")
    wins = outcomes.wins + 0.5 * outcomes.ties
    _check_connected(systems, wins)
    games = wins + wins.T
    total_wins = wins.sum(axis=1)
    s = np.ones(n)
    for _ in range(BT_MAX_ITER):
        denom = np.where(games > 0, games / (s[:, None] + s[None, :]), 0.0).sum(axis=1)
        new_s = total_wins / denom
        new_s = new_s / new_s[0]
        rel = np.max(np.abs(new_s - s) / np.maximum(np.abs(s), 1e-300))
        s = new_s
        if rel < BT_REL_TOL:
            break
    # mirror the upper triangle so P[i][j] + P[j][i] = 1 holds exactly in floats
    pairwise = np.full((n, n), 0.5)
    for i in range(n):
        for j in range(i + 1, n):
            pairwise[i, j] = s[i] / (s[i] + s[j])
            pairwise[j, i] = 1.0 - pairwise[i, j]
    return BTScores(list(systems), {name: float(v) for name, v in zip(systems, s)}, pairwise)


def sign_test(wins_ij: int, wins_ji: int) -> float:
    """Exact two-sided binomial p-value for H0: win probability = 0.5 (ties excluded)."""
    n = wins_ij + wins_ji
    if n < 1:
        raise AnalysisError("sign test needs at least one untied comparison")
    m = min(wins_ij, wins_ji)
    if 2 * m >= n:
        return 1.0
    tail = sum(math.comb(n, k) for k in range(m + 1))
    return min(1.0, 2 * tail / 2**n)


@dataclass
class PairwiseReport:
    """Bradley-Terry probabilities plus per-pair sign tests (the model-comparison table)."""

    systems: list[str]
    probabilities: np.ndarray
    p_values: np.ndarray
    significant: np.ndarray  # p < 0.05 and at least one untied comparison


def pairwise_comparison(outcomes: OutcomeMatrix, alpha: float = 0.05) -> PairwiseReport:
    bt = fit_bradley_terry(outcomes)
    n = len(outcomes.systems)
    p_values = np.ones((n, n))
    significant = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            w_ij, w_ji = int(outcomes.wins[i, j]), int(outcomes.wins[j, i])
            if w_ij + w_ji >= 1:
                p_values[i, j] = sign_test(w_ij, w_ji)
                significant[i, j] = p_values[i, j] < alpha
    return PairwiseReport(list(outcomes.systems), bt.pairwise, p_values, significant)


# ---------------------------------------------------------------------------
# Propensity scores


@dataclass
class PropensityRecord:
    entity_id: str
    p: float

    def __post_init__(self) -> None:
        self.p = clip_propensity(self.p)

    @property
    def weight(self) -> float:
        return (1.0 - self.p) / self.p


def clip_propensity(p: float, eps: float = PROPENSITY_CLIP) -> float:
    return min(max(p, eps), 1.0 - eps)


def propensity_weight(p: float, eps: float = PROPENSITY_CLIP) -> float:
    p = clip_propensity(p, eps)
    return (1.0 - p) / p


def _text_features(text: str) -> np.ndarray:
    tokens = text.split()
    n_tokens = len(tokens)
    n_chars = len(text)
    mean_len = n_chars / n_tokens if n_tokens else 0.0
    unique_fraction = len(set(tokens)) / n_tokens if n_tokens else 0.0
    digit_fraction = sum(ch.isdigit() for ch in text) / n_chars if n_chars else 0.0
    return np.array(
        [math.log1p(n_tokens), math.log1p(n_chars), mean_len, unique_fraction, digit_fraction]
    )


@dataclass
class PropensityModel:
    """Logistic regression over simple token-count features of the article text."""

    weights: np.ndarray
    bias: float
    feature_mean: np.ndarray
    feature_scale: np.ndarray

    def predict_proba(self, text: str) -> float:
        z = (_text_features(text) - self.feature_mean) / self.feature_scale
        logit = float(z @ self.weights + self.bias)
        return 1.0 / (1.0 + math.exp(-logit))


def train_propensity(
    examples: Sequence[tuple[str, bool]],
    seed: int = 0,
    epochs: int = 400,
    lr: float = 0.5,
    l2: float = 1e-3,
) -> PropensityModel:
    """Fit the has-description classifier by full-batch gradient descent.

    Deterministic given the seed (used only for the initial weights).
    """
    if not examples:
        raise AnalysisError("no training examples")
    labels = np.array([1.0 if has_desc else 0.0 for _, has_desc in examples])
    if labels.min() == labels.max():
        raise AnalysisError("propensity training needs both classes")
    features = np.stack([_text_features(text) for text, _ in examples])
    mean = features.mean(axis=0)
    scale = np.maximum(features.std(axis=0), 1e-9)
    z = (features - mean) / scale
    rng = np.random.default_rng(seed)
    w = rng.normal(scale=0.01, size=z.shape[1])
    b = 0.0
    for _ in range(epochs):
        logits = z @ w + b
        probs = 1.0 / (1.0 + np.exp(-logits))
        grad_w = z.T @ (probs - labels) / len(labels) + l2 * w
        grad_b = float((probs - labels).mean())
        w -= lr * grad_w
        b -= lr * grad_b
    return PropensityModel(w, b, mean, scale)


def weighted_mean(scores: Sequence[float], weights: Sequence[float]) -> float:
    if len(scores) != len(weights):
        raise AnalysisError("scores and weights must align")
    if any(w <= 0 for w in weights):
        raise AnalysisError("weights must be positive")
    total = float(sum(weights))
    if total == 0:
        raise AnalysisError("zero total weight")
    return float(sum(s * w for s, w in zip(scores, weights)) / total)


@dataclass
class Stratum:
    lower: float
    upper: float
    count: int
    mean_score: float | None


def stratify(
    records: Sequence[tuple[float, float]],
    n_bins: int = 10,
    mode: str = "quantile",
) -> list[Stratum]:
    """Bin (stratifier value, score) pairs and report per-bin means and counts.

    ``mode`` is "quantile" (default: equal-population deciles of the observed
    values) or "width" (equal-width bins over the observed range).
    """
    if not records:
        raise AnalysisError("nothing to stratify")
    if n_bins < 1:
        raise AnalysisError("need at least one bin")
    values = np.array([v for v, _ in records])
    scores = np.array([s for _, s in records])
    if mode == "quantile":
        edges = np.quantile(values, np.linspace(0, 1, n_bins + 1))
    elif mode == "width":
        edges = np.linspace(values.min(), values.max(), n_bins + 1)
    else:
        raise AnalysisError(f"unknown stratification mode {mode!r}")
    out: list[Stratum] = []
    for b in range(n_bins):
        lo, hi = float(edges[b]), float(edges[b + 1])
        if b < n_bins - 1:
            mask = (values >= lo) & (values < hi)
        else:
            mask = (values >= lo) & (values <= hi)
        count = int(mask.sum())
        out.append(Stratum(lo, hi, count, float(scores[mask].mean()) if count else None))
    return out


# ---------------------------------------------------------------------------
# Fleiss' kappa


def fleiss_kappa(counts: Sequence[Sequence[int]], n_raters: int) -> float | None:
    """Chance-corrected agreement for ``n_raters`` ratings per item.

    ``counts[i][j]`` is the number of raters assigning item i to category j.
    Returns None when expected agreement is 1 (kappa undefined).
    """
    table = np.asarray(counts, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] < 1:
        raise AnalysisError("counts must be an item x category table")
    if n_raters < 2:
        raise AnalysisError("need at least two raters")
    if not np.all(table.sum(axis=1) == n_raters):
        raise AnalysisError(f"every item must have exactly {n_raters} ratings")
    n_items = table.shape[0]
    p_agree = ((table * (table - 1)).sum(axis=1) / (n_raters * (n_raters - 1))).mean()
    category_share = table.sum(axis=0) / (n_items * n_raters)
    p_expected = float((category_share**2).sum())
    if abs(1.0 - p_expected) < 1e-12:
        return None
    return float((p_agree - p_expected) / (1.0 - p_expected))


# ---------------------------------------------------------------------------
# Evaluation-set sampling


def stratified_sample_by_metric(
    scores: Mapping[str, float],
    per_bin: int,
    n_bins: int,
    rng: np.random.Generator,
) -> list[str]:
    """Uniform sample of ``per_bin`` ids from each score-quantile bin."""
    if not scores:
        raise AnalysisError("no scores to sample from")
    ids = sorted(scores)
    values = np.array([scores[i] for i in ids])
    edges = np.quantile(values, np.linspace(0, 1, n_bins + 1))
    sampled: list[str] = []
    for b in range(n_bins):
        if b < n_bins - 1:
            members = [i for i, v in zip(ids, values) if edges[b] <= v < edges[b + 1]]
        else:
            members = [i for i, v in zip(ids, values) if edges[b] <= v <= edges[b + 1]]
        if len(members) < per_bin:
            raise AnalysisError(
                f"bin {b} has {len(members)} members, cannot sample {per_bin}"
            )
        take = rng.choice(len(members), size=per_bin, replace=False)
        sampled.extend(members[k] for k in sorted(take))
    return sampled


def kmeanspp_sample(points: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    """k-means++ seeding: far-apart subset selection (no clustering iterations).

    The first index is uniform; each next index is drawn with probability
    proportional to its squared distance to the nearest already-selected point.
    Duplicates of selected points have zero probability while distinct points
    remain; if only duplicates remain, selection falls back to uniform.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k > n:
        raise AnalysisError(f"cannot select {k} of {n} points")
    if k == 0:
        return []
    selected = [int(rng.integers(n))]
    sq_dist = ((points - points[selected[0]]) ** 2).sum(axis=1)
    sq_dist[selected[0]] = 0.0
    for _ in range(k - 1):
        total = sq_dist.sum()
        if total <= 0.0:
            remaining = [i for i in range(n) if i not in set(selected)]
            choice = int(remaining[int(rng.integers(len(remaining)))])
        else:
            choice = int(rng.choice(n, p=sq_dist / total))
        selected.append(choice)
        sq_dist = np.minimum(sq_dist, ((points - points[choice]) ** 2).sum(axis=1))
        sq_dist[choice] = 0.0
    return selected


# ---------------------------------------------------------------------------
# Iterative coding and error profiles


@dataclass(frozen=True)
class ErrorLabel:
    entity_id: str
    category: str
    annotator_id: str
    round_id: int = 0

    def __post_init__(self) -> None:
        if self.category not in ERROR_CATEGORIES:
            raise AnalysisError(f"unknown error category {self.category!r}")


@dataclass
class CodingRound:
    kappa: float | None
    disagreements: list[str]
    stop: bool


def coding_round(
    labels_a: Mapping[str, str],
    labels_b: Mapping[str, str],
    stop_threshold: float = 0.6,
) -> CodingRound:
    """Compare one labeling round from two annotators over the same items.

    Agreement uses Fleiss' kappa with two raters over the categories either
    annotator used; the round stops the iterative coding once kappa exceeds
    the threshold. Disagreeing items are listed for reconciliation.
    """
    if set(labels_a) != set(labels_b):
        raise AnalysisError("annotators labeled different item sets")
    if not labels_a:
        raise AnalysisError("empty round")
    items = sorted(labels_a)
    categories = sorted(set(labels_a.values()) | set(labels_b.values()))
    cat_index = {c: i for i, c in enumerate(categories)}
    counts = np.zeros((len(items), len(categories)), dtype=int)
    for row, item in enumerate(items):
        counts[row, cat_index[labels_a[item]]] += 1
        counts[row, cat_index[labels_b[item]]] += 1
    kappa = fleiss_kappa(counts, 2)
    disagreements = [item for item in items if labels_a[item] != labels_b[item]]
    stop = kappa is not None and kappa > stop_threshold
    return CodingRound(kappa, disagreements, stop)


def agreement_report_csv(rows: Sequence[tuple[str, float | None, int]]) -> str:
    """Kappa report as CSV, columns: label,kappa,n_items (kappa empty when undefined)."""
    lines = ["label,kappa,n_items"]
    for label, kappa, n_items in rows:
        cell = "" if kappa is None else f"{kappa:.4f}"
        lines.append(f"{label},{cell},{n_items}")
    return "\n".join(lines) + "\n"


def bt_report_csv(scores: BTScores) -> str:
    """Bradley-Terry report as CSV, columns: system,score,<P(beats each system)>."""
    header = "system,score," + ",".join(f"p_beats_{s}" for s in scores.systems)
    lines = [header]
    for i, system in enumerate(scores.systems):
        cells = [f"{scores.pairwise[i, j]:.4f}" if i != j else "" for j in range(len(scores.systems))]
        lines.append(f"{system},{scores.scores[system]:.6f}," + ",".join(cells))
    return "\n".join(lines) + "\n"


@dataclass
class ErrorProfile:
    """Per-system outcome fractions over the full evaluated set."""

    system: str
    total: int
    identical_fraction: float
    preferred_fraction: float
    good_enough_fraction: float
    error_fractions: dict[str, float]
    acceptable_fraction: float = field(init=False)  # identical + preferred + good enough

    def __post_init__(self) -> None:
        self.acceptable_fraction = (
            self.identical_fraction + self.preferred_fraction + self.good_enough_fraction
        )


def error_distribution_report(
    system: str,
    n_identical: int,
    preference_outcomes: Mapping[str, bool],  # item -> True when this system was preferred
    labels: Mapping[str, str],  # non-preferred item -> error category
) -> ErrorProfile:
    """Global outcome profile: identical, preferred, or labeled error category.

    Every non-preferred item must carry a label; the headline "acceptable"
    fraction sums identical, preferred, and good-enough shares.
    """
    non_preferred = {item for item, won in preference_outcomes.items() if not won}
    unlabeled = non_preferred - set(labels)
    if unlabeled:
        raise AnalysisError(f"non-preferred items missing labels: {sorted(unlabeled)[:5]}")
    total = n_identical + len(preference_outcomes)
    if total == 0:
        raise AnalysisError("empty evaluation")
    n_preferred = sum(1 for won in preference_outcomes.values() if won)
    category_counts = {cat: 0 for cat in ERROR_CATEGORIES}
    for item in non_preferred:
        category_counts[labels[item]] += 1
    return ErrorProfile(
        system=system,
        total=total,
        identical_fraction=n_identical / total,
        preferred_fraction=n_preferred / total,
        good_enough_fraction=category_counts["good_enough"] / total,
        error_fractions={
            cat: category_counts[cat] / total for cat in ERROR_CATEGORIES if cat != "good_enough"
        },
    )
