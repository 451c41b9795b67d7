"""Embedding-space similarity between generated and reference text.

The score is 1 / (1 + EMD) where EMD is the earth mover's distance between
the two texts' token-embedding distributions under a Euclidean ground cost.
It lies in [0, 1], equals 1.0 exactly when the embedding multisets coincide,
and larger is better. Token masses are uniform by default; inverse document
frequency weighting is available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linprog

# An embedder maps text to (tokens, m x d embedding matrix), row i for token i.
Embedder = Callable[[str], tuple[list[str], np.ndarray]]

EXACT_CELL_LIMIT = 1024  # above this, "auto" switches to the regularized solver
SINKHORN_EPSILON = 1e-3
SINKHORN_TOL = 1e-5  # target L1 marginal violation before rounding onto exact marginals
SINKHORN_ACCEPT = 5e-4  # stalled iterations may stop at this violation (degenerate optima)
SINKHORN_MAX_ITER = 100_000
SINKHORN_STALL_WINDOW = 3000  # iterations without meaningful progress before stopping


class MetricError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    """Regularized transport failed to converge; carries iteration diagnostics."""

    def __init__(self, iterations: int, marginal_error: float):
        super().__init__(
            f"Sinkhorn did not converge after {iterations} iterations "
            f"(marginal error {marginal_error:.3e})"
        )
        self.iterations = iterations
        self.marginal_error = marginal_error


@dataclass
class TokenDistribution:
    """Weighted point cloud of token embeddings."""

    embeddings: np.ndarray  # (m, d)
    masses: np.ndarray  # (m,), nonnegative, sums to 1

    def __post_init__(self) -> None:
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise MetricError("embeddings must be a nonempty (m, d) matrix")
        if self.masses.shape != (self.embeddings.shape[0],):
            raise MetricError("masses must align with embedding rows")
        if not np.all(np.isfinite(self.embeddings)):
            raise MetricError("embeddings must be finite")
        if np.any(self.masses < 0) or abs(self.masses.sum() - 1.0) > 1e-9:
            raise MetricError("masses must be nonnegative and sum to 1")


def compute_idf(reference_corpus: Iterable[Sequence[str]]) -> dict[str, float]:
    """Smoothed inverse document frequency: idf(t) = ln((N+1)/(df(t)+1)) + 1."""
    docs = [set(doc) for doc in reference_corpus]
    if not docs:
        raise MetricError("empty reference corpus")
    n = len(docs)
    df: dict[str, int] = {}
    for doc in docs:
        for token in doc:
            df[token] = df.get(token, 0) + 1
    return {token: math.log((n + 1) / (count + 1)) + 1.0 for token, count in sorted(df.items())}


def idf_weight(idf: Mapping[str, float], token: str, n_documents: int | None = None) -> float:
    """IDF for a token; unseen tokens get the df = 0 value ln(N+1) + 1.

    Without the document count, the fallback is max(idf) + ln 2, which equals
    ln(N+1) + 1 exactly whenever some token appears in a single document.
    """
    if token in idf:
        return idf[token]
    if n_documents is not None:
        return math.log(n_documents + 1) + 1.0
    return max(idf.values()) + math.log(2.0)


def pairwise_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix between the rows of x and y."""
    diff = x[:, None, :] - y[None, :, :]
    return np.sqrt(np.maximum((diff * diff).sum(axis=2), 0.0))


def emd_exact(p: TokenDistribution, q: TokenDistribution, cost: np.ndarray | None = None) -> float:
    """Exact optimal-transport cost via the transportation linear program."""
    if cost is None:
        cost = pairwise_distances(p.embeddings, q.embeddings)
    m, k = cost.shape
    if (m, k) != (len(p.masses), len(q.masses)):
        raise MetricError("cost matrix shape mismatch")
    # equality constraints: row sums = p, column sums = q (drop one redundant row)
    a_eq = np.zeros((m + k, m * k))
    for i in range(m):
        a_eq[i, i * k : (i + 1) * k] = 1.0
    for j in range(k):
        a_eq[m + j, j::k] = 1.0
    b_eq = np.concatenate([p.masses, q.masses])
    res = linprog(cost.ravel(), A_eq=a_eq[:-1], b_eq=b_eq[:-1], bounds=(0, None), method="highs")
    if not res.success:
        raise MetricError(f"transport LP failed: {res.message}")
    return float(res.fun)


def emd_sinkhorn(
    p: TokenDistribution,
    q: TokenDistribution,
    cost: np.ndarray | None = None,
    epsilon: float = SINKHORN_EPSILON,
    tol: float = SINKHORN_TOL,
    max_iter: int = SINKHORN_MAX_ITER,
) -> float:
    """Entropic-regularized transport cost, log-domain iterations with epsilon scaling.

    The regularization is annealed from the cost scale down to ``epsilon``
    (halving each level, warm-starting the dual potentials), which keeps the
    iteration count practical for small epsilon. Returns the linear cost of
    the final plan after rounding it onto the exact marginals, so the value
    converges to the exact EMD as epsilon -> 0. Raises
    :class:`ConvergenceError` when the marginal violation stays above ``tol``
    after ``max_iter`` total iterations.
    """
    if cost is None:
        cost = pairwise_distances(p.embeddings, q.embeddings)
    log_p = np.log(np.maximum(p.masses, 1e-300))
    log_q = np.log(np.maximum(q.masses, 1e-300))
    f = np.zeros(len(p.masses))
    g = np.zeros(len(q.masses))

    def logsumexp(mat: np.ndarray, axis: int) -> np.ndarray:
        peak = mat.max(axis=axis, keepdims=True)
        return (peak + np.log(np.exp(mat - peak).sum(axis=axis, keepdims=True))).squeeze(axis)

    levels = [epsilon]
    start = max(float(cost.max()), epsilon)
    while levels[-1] < start:
        levels.append(min(levels[-1] * 2.0, start))
    levels.reverse()

    iterations_used = 0
    err = np.inf
    for eps in levels:
        scaled = -cost / eps
        level_tol = tol if eps == epsilon else max(tol, 1e-4)
        best_err = np.inf
        since_progress = 0
        while True:
            if iterations_used >= max_iter:
                break
            iterations_used += 1
            f = eps * (log_p - logsumexp(scaled + (f[:, None] + g[None, :]) / eps, axis=1)) + f
            g = eps * (log_q - logsumexp(scaled + (f[:, None] + g[None, :]) / eps, axis=0)) + g
            plan = np.exp(scaled + (f[:, None] + g[None, :]) / eps)
            err = np.abs(plan.sum(axis=1) - p.masses).sum() + np.abs(plan.sum(axis=0) - q.masses).sum()
            if err < level_tol:
                break
            # sublinear tail near a degenerate optimum: such plans mix
            # cost-equal vertices, so a small residual violation is benign
            if err < 0.999 * best_err:
                best_err = err
                since_progress = 0
            else:
                since_progress += 1
                if since_progress >= SINKHORN_STALL_WINDOW:
                    break
    if err >= max(tol, SINKHORN_ACCEPT):
        raise ConvergenceError(iterations_used, float(err))
    plan = np.exp(-cost / epsilon + (f[:, None] + g[None, :]) / epsilon)
    plan = _round_to_marginals(plan, p.masses, q.masses, cost)
    return float((plan * cost).sum())


def _round_to_marginals(
    plan: np.ndarray, p: np.ndarray, q: np.ndarray, cost: np.ndarray | None = None
) -> np.ndarray:
    """Project an approximately feasible plan onto exact marginals.

    Rows and columns are scaled down to fit, then the leftover mass is routed
    greedily through the cheapest cells (falling back to an arbitrary filler
    when no cost matrix is given), keeping the cost perturbation small.
    """
    plan = plan.copy()
    row = plan.sum(axis=1)
    plan *= np.minimum(1.0, p / np.maximum(row, 1e-300))[:, None]
    col = plan.sum(axis=0)
    plan *= np.minimum(1.0, q / np.maximum(col, 1e-300))[None, :]
    dr = np.maximum(p - plan.sum(axis=1), 0.0)
    dc = np.maximum(q - plan.sum(axis=0), 0.0)
    slack = dr.sum()
    if slack <= 1e-300:
        return plan
    if cost is None:
        return plan + np.outer(dr, dc) / slack
    dr = dr.copy()
    dc = dc.copy()
    for flat_index in np.argsort(cost, axis=None):
        i, j = divmod(int(flat_index), cost.shape[1])
        move = min(dr[i], dc[j])
        if move > 0.0:
            plan[i, j] += move
            dr[i] -= move
            dc[j] -= move
    return plan


def emd(
    p: TokenDistribution,
    q: TokenDistribution,
    cost: np.ndarray | None = None,
    method: str = "auto",
) -> float:
    """Earth mover's distance between two token distributions.

    ``method`` is "exact" (LP), "sinkhorn", or "auto" (exact up to
    ``EXACT_CELL_LIMIT`` transport cells, regularized beyond).
    """
    if method == "auto":
        method = "exact" if len(p.masses) * len(q.masses) <= EXACT_CELL_LIMIT else "sinkhorn"
    if method == "exact":
        return emd_exact(p, q, cost)
    if method == "sinkhorn":
        return emd_sinkhorn(p, q, cost)
    raise MetricError(f"unknown method {method!r}")


def token_distribution(
    text: str,
    embedder: Embedder,
    weighting: str = "uniform",
    idf: Mapping[str, float] | None = None,
    idf_documents: int = 0,
) -> TokenDistribution:
    tokens, embeddings = embedder(text)
    if len(tokens) == 0:
        raise MetricError(f"text tokenizes to nothing: {text!r}")
    if weighting == "uniform":
        masses = np.full(len(tokens), 1.0 / len(tokens))
    elif weighting == "idf":
        if idf is None:
            raise MetricError("idf weighting requires an idf table")
        raw = np.array([idf_weight(idf, tok, idf_documents or None) for tok in tokens])
        masses = raw / raw.sum()
    else:
        raise MetricError(f"unknown weighting {weighting!r}")
    return TokenDistribution(np.asarray(embeddings, dtype=np.float64), masses)


def similarity(
    generated: str,
    reference: str,
    embedder: Embedder,
    weighting: str = "uniform",
    idf: Mapping[str, float] | None = None,
    method: str = "auto",
) -> float:
    """Similarity score 1 / (1 + EMD) in [0, 1]; 1.0 iff zero transport cost."""
    p = token_distribution(generated, embedder, weighting, idf)
    q = token_distribution(reference, embedder, weighting, idf)
    distance = emd(p, q, method=method)
    # tiny negative or epsilon-level costs from the solvers are numerical zero
    if distance < 1e-12:
        distance = 0.0
    return 1.0 / (1.0 + distance)


# ---------------------------------------------------------------------------
# Score tables


@dataclass(frozen=True)
class ScoreRecord:
    entity_id: str
    language: str
    system: str
    score: float


@dataclass
class ScoreSummary:
    per_language_mean: dict[str, dict[str, float]]  # system -> language -> mean
    per_instance: list[ScoreRecord] = field(repr=False, default_factory=list)


def corpus_average(records: Iterable[ScoreRecord]) -> ScoreSummary:
    """Per-(system, language) arithmetic means plus the retained instance table."""
    table = list(records)
    if not table:
        raise MetricError("no scores to aggregate")
    sums: dict[str, dict[str, list[float]]] = {}
    for rec in table:
        sums.setdefault(rec.system, {}).setdefault(rec.language, []).append(rec.score)
    means = {
        system: {lang: sum(vals) / len(vals) for lang, vals in sorted(by_lang.items())}
        for system, by_lang in sorted(sums.items())
    }
    return ScoreSummary(per_language_mean=means, per_instance=table)
