"""Shared-backbone extraction from a collection of per-subject multiscale DAGs.

The candidate universe holds every scale-tagged arc that appears in strictly
more than p subjects; arcs outside it stay fixed as per-subject idiosyncratic
structure.  The search greedily adds the universe arc with the most negative
score change, where the score is the profile-likelihood Gaussian criterion

    sum over (subject, scale, node) of  N log(RSS/N)  +  xi * (arc count),

with xi = 2 log K (risk-inflation penalty, default) or log N (BIC).  Adding a
backbone arc re-fits only the child node's regression in every subject, so
score changes are exact and cheap to maintain incrementally.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import graphs
from .dagsolve import MultiscaleDag
from .errors import ConfigError, ShapeMismatch
from .wavelets import MultiscalePanel

logger = logging.getLogger(__name__)

Arc = tuple[int, int, int]  # (scale, src, dst)

_VARIANCE_FLOOR = 1e-12
_RANK_CUTOFF = 1e-10


def penalty_coefficient(score_kind: str, n_nodes: int, n_samples: int) -> float:
    """xi for the chosen criterion: 'ric' -> 2 log K, 'bic' -> log N."""
    if score_kind == "ric":
        return 2.0 * math.log(n_nodes)
    if score_kind == "bic":
        return math.log(n_samples)
    raise ConfigError(f"unknown score kind '{score_kind}' (expected 'ric' or 'bic')")


@dataclass
class TraceEntry:
    iteration: int
    arc: Arc
    delta: float
    total_after: float


@dataclass
class ArcStability:
    """Bootstrap summary for one backbone arc."""

    frequency: float
    mean_weight: float
    interval_low: float
    interval_high: float
    significant: bool


@dataclass
class Backbone:
    """Unweighted scale-tagged arc set shared by the population."""

    arcs: set[Arc]
    persistence_p: int
    score_trace: list[TraceEntry] = field(default_factory=list)
    n_nodes: int = 0
    n_scales: int = 0
    initial_score: float = float("nan")
    final_score: float = float("nan")
    arc_stats: dict[Arc, ArcStability] = field(default_factory=dict)
    audit: dict = field(default_factory=dict)

    def arcs_at_scale(self, scale: int) -> set[tuple[int, int]]:
        return {(l, m) for (j, l, m) in self.arcs if j == scale}

    def validate(self):
        for scale in range(self.n_scales):
            support = np.zeros((self.n_nodes, self.n_nodes))
            for l, m in self.arcs_at_scale(scale):
                support[l, m] = 1.0
            if not graphs.is_acyclic(support):
                raise ValueError(f"backbone scale {scale} contains a cycle")
        return self


@dataclass
class CandidateUniverse:
    """Per-scale persistent-arc sets with their subject counts."""

    per_scale: list[dict[tuple[int, int], int]]
    persistence_p: int

    def arc_count(self) -> int:
        return sum(len(d) for d in self.per_scale)

    def contains(self, arc: Arc) -> bool:
        j, l, m = arc
        return (l, m) in self.per_scale[j]


@dataclass
class IdiosyncraticSets:
    """Per-subject, per-scale arcs outside the candidate universe."""

    per_subject: list[list[set[tuple[int, int]]]]

    def parents_of(self, subject: int, scale: int, node: int) -> tuple[int, ...]:
        return tuple(sorted(l for (l, m) in self.per_subject[subject][scale] if m == node))


def build_universe(dags: list[MultiscaleDag], p: int) -> tuple[CandidateUniverse, IdiosyncraticSets]:
    """Split the collection's arcs into persistent candidates and leftovers.

    An arc is persistent iff its weight is nonzero in strictly more than p of
    the subjects' layers.
    """
    if not dags:
        raise ShapeMismatch("empty DAG collection")
    if not 0 <= p <= len(dags) - 1:
        raise ConfigError(f"persistence p={p} outside [0, S-1] for S={len(dags)}")
    k, j = dags[0].n_nodes, dags[0].n_scales
    for dag in dags:
        if dag.n_nodes != k or dag.n_scales != j:
            raise ShapeMismatch(
                f"DAG '{dag.subject_id}' has shape (K={dag.n_nodes}, J={dag.n_scales}),"
                f" expected (K={k}, J={j})"
            )

    counts = [defaultdict(int) for _ in range(j)]
    subject_arcs = []
    for dag in dags:
        arcs_per_scale = []
        for scale in range(j):
            arcs = {(int(l), int(m)) for l, m in zip(*np.nonzero(dag.layers[scale]))}
            arcs_per_scale.append(arcs)
            for arc in arcs:
                counts[scale][arc] += 1
        subject_arcs.append(arcs_per_scale)

    per_scale = [
        {arc: count for arc, count in sorted(counts[scale].items()) if count > p}
        for scale in range(j)
    ]
    universe = CandidateUniverse(per_scale, p)
    idio = IdiosyncraticSets(
        [
            [arcs - set(per_scale[scale]) for scale, arcs in enumerate(arcs_per_scale)]
            for arcs_per_scale in subject_arcs
        ]
    )
    return universe, idio


@dataclass
class FamilyState:
    parents: tuple[int, ...]
    rss: float
    rank_deficient: bool = False


def _fit_rss(block: np.ndarray, node: int, parents: tuple[int, ...]):
    """Least squares of one node on its parents (no intercept; zero-mean model).

    Rank-deficient designs fall back to the minimum-norm SVD solution.
    Returns (rss, coefficients, rank_deficient).
    """
    y = block[node]
    if not parents:
        return float(y @ y), np.zeros(0), False
    a = block[list(parents)].T
    coef, _, rank, _ = np.linalg.lstsq(a, y, rcond=_RANK_CUTOFF)
    resid = y - a @ coef
    return float(resid @ resid), coef, rank < len(parents)


class ScoreLedger:
    """Incremental per-(subject, scale, node) family-score state."""

    def __init__(self, n_subjects: int, n_scales: int, n_nodes: int,
                 n_samples: int, xi: float):
        self.n_subjects = n_subjects
        self.n_scales = n_scales
        self.n_nodes = n_nodes
        self.n_samples = n_samples
        self.xi = xi
        self.entries: dict[tuple[int, int, int], FamilyState] = {}
        self.flags: list[str] = []

    @classmethod
    def initialize(cls, panels: list[MultiscalePanel], idio: IdiosyncraticSets,
                   xi: float, fit_cache: dict | None = None) -> "ScoreLedger":
        n_subjects = len(panels)
        n_scales = panels[0].scale_count
        n_nodes = panels[0].n_nodes
        ledger = cls(n_subjects, n_scales, n_nodes, panels[0].n_samples, xi)
        for s, panel in enumerate(panels):
            if panel.scale_count != n_scales or panel.n_nodes != n_nodes:
                raise ShapeMismatch(f"panel {s} disagrees on (K, J)")
            for scale in range(n_scales):
                block = panel.blocks[scale]
                for node in range(n_nodes):
                    parents = idio.parents_of(s, scale, node)
                    key = None
                    if fit_cache is not None:
                        key = (id(panel), scale, node, parents)
                        if key in fit_cache:
                            ledger.entries[(s, scale, node)] = fit_cache[key]
                            continue
                    rss, _, rank_def = _fit_rss(block, node, parents)
                    state = FamilyState(parents, rss, rank_def)
                    if rank_def:
                        ledger.flags.append(f"rank_deficient:s{s}:j{scale}:k{node}")
                    ledger.entries[(s, scale, node)] = state
                    if key is not None:
                        fit_cache[key] = state
        return ledger

    def state(self, subject: int, scale: int, node: int) -> FamilyState:
        return self.entries[(subject, scale, node)]

    def family_score(self, subject: int, scale: int, node: int) -> float:
        """N log(sigma^2) + xi * |incoming arcs|, sigma^2 = RSS/N floored."""
        st = self.entries[(subject, scale, node)]
        sigma2 = st.rss / self.n_samples
        if sigma2 < _VARIANCE_FLOOR:
            sigma2 = _VARIANCE_FLOOR
            self.flags.append(f"variance_floor:s{subject}:j{scale}:k{node}")
        return self.n_samples * math.log(sigma2) + self.xi * len(st.parents)

    def total_score(self) -> float:
        return math.fsum(
            self.family_score(s, j, k)
            for s in range(self.n_subjects)
            for j in range(self.n_scales)
            for k in range(self.n_nodes)
        )

    def set_parents(self, subject: int, scale: int, node: int, block: np.ndarray,
                    parents: tuple[int, ...]):
        rss, _, rank_def = _fit_rss(block, node, parents)
        if rank_def:
            self.flags.append(f"rank_deficient:s{subject}:j{scale}:k{node}")
        self.entries[(subject, scale, node)] = FamilyState(parents, rss, rank_def)


def family_score(subject: int, scale: int, node: int, ledger: ScoreLedger) -> float:
    """Module-level convenience wrapper over :meth:`ScoreLedger.family_score`."""
    return ledger.family_score(subject, scale, node)


def _log_variance(rss: float, n: int) -> float:
    return math.log(max(rss / n, _VARIANCE_FLOOR))


def delta_ric(arc: Arc, ledger: ScoreLedger, panels: list[MultiscalePanel]) -> float:
    """Score change from adding ``arc`` to every subject's graph.

    For each subject the child is re-fit on (current parents + src), with
    coefficients free to differ across subjects; the cached parent fit serves
    as the null model.  The result includes the xi * S penalty increment.
    """
    scale, src, dst = arc
    n = ledger.n_samples
    total = 0.0
    for s in range(ledger.n_subjects):
        st = ledger.state(s, scale, dst)
        if src in st.parents:
            raise ConfigError(f"arc {arc} already present for subject {s}")
        rss1, _, _ = _fit_rss(panels[s].blocks[scale], dst, st.parents + (src,))
        total += n * (_log_variance(rss1, n) - _log_variance(st.rss, n))
    return total + ledger.xi * ledger.n_subjects


def _search_scale(scale: int, panels: list[MultiscalePanel], ledger: ScoreLedger,
                  universe_scale: dict[tuple[int, int], int]) -> list[tuple[Arc, float]]:
    """Greedy forward pass over one scale's candidates; returns acceptances."""
    deltas: dict[tuple[int, int], float] = {}
    for (l, m) in sorted(universe_scale):
        arc = (scale, l, m)
        try:
            deltas[(l, m)] = delta_ric(arc, ledger, panels)
        except Exception:
            logger.warning("skipping arc %s: evaluation failed", arc, exc_info=True)

    children: dict[int, set[int]] = defaultdict(set)
    accepted: list[tuple[Arc, float]] = []
    while deltas:
        (l, m), delta = min(
            ((pair, d) for pair, d in deltas.items()), key=lambda t: (t[1], t[0])
        )
        if delta >= 0:
            break
        del deltas[(l, m)]  # evaluated arcs leave the universe either way
        if graphs.creates_cycle(children, l, m):
            logger.debug("arc (%d, %d, %d) rejected by cycle guard", scale, l, m)
            continue
        children[l].add(m)
        accepted.append(((scale, l, m), delta))
        for s in range(ledger.n_subjects):
            st = ledger.state(s, scale, m)
            ledger.set_parents(s, scale, m, panels[s].blocks[scale], st.parents + (l,))
        stale = [pair for pair in deltas if pair[1] == m]
        for pair in stale:
            try:
                deltas[pair] = delta_ric((scale, pair[0], pair[1]), ledger, panels)
            except Exception:
                logger.warning("skipping arc %s: evaluation failed",
                               (scale, *pair), exc_info=True)
                del deltas[pair]
    return accepted


def _audit_subject_graphs(idio: IdiosyncraticSets, accepted: set[Arc],
                          n_nodes: int, n_scales: int) -> list[tuple[int, int]]:
    """Verify per-subject graphs (backbone union idiosyncratic) stay acyclic."""
    violations = []
    for s, per_scale in enumerate(idio.per_subject):
        for scale in range(n_scales):
            support = np.zeros((n_nodes, n_nodes))
            for l, m in per_scale[scale]:
                support[l, m] = 1.0
            for j, l, m in accepted:
                if j == scale:
                    support[l, m] = 1.0
            if not graphs.is_acyclic(support):
                violations.append((s, scale))
                logger.warning(
                    "subject %d scale %d: union graph contains a cycle", s, scale
                )
    return violations


def _run_search(dags: list[MultiscaleDag], panels: list[MultiscalePanel], p: int,
                score_kind: str, fit_cache: dict | None = None):
    universe, idio = build_universe(dags, p)
    k, j = dags[0].n_nodes, dags[0].n_scales
    n = panels[0].n_samples
    if len(panels) != len(dags):
        raise ShapeMismatch("panel and DAG collections differ in size")
    xi = penalty_coefficient(score_kind, k, n)
    ledger = ScoreLedger.initialize(panels, idio, xi, fit_cache=fit_cache)
    initial_total = ledger.total_score()

    trace: list[TraceEntry] = []
    deltas_so_far: list[float] = []
    arcs: set[Arc] = set()
    for scale in range(j):
        for arc, delta in _search_scale(scale, panels, ledger, universe.per_scale[scale]):
            arcs.add(arc)
            deltas_so_far.append(delta)
            trace.append(TraceEntry(
                iteration=len(trace),
                arc=arc,
                delta=delta,
                total_after=initial_total + math.fsum(deltas_so_far),
            ))

    violations = _audit_subject_graphs(idio, arcs, k, j)
    backbone = Backbone(
        arcs=arcs,
        persistence_p=p,
        score_trace=trace,
        n_nodes=k,
        n_scales=j,
        initial_score=initial_total,
        final_score=trace[-1].total_after if trace else initial_total,
        audit={"subject_cycle_violations": violations,
               "universe_size": universe.arc_count()},
    )
    return backbone.validate(), ledger, idio


def search_mcb(dags: list[MultiscaleDag], panels: list[MultiscalePanel], p: int,
               score_kind: str = "ric") -> Backbone:
    """Greedy score-minimizing backbone search (one independent pass per scale)."""
    backbone, _, _ = _run_search(dags, panels, p, score_kind)
    return backbone


def recompute_total_score(panels: list[MultiscalePanel], idio: IdiosyncraticSets,
                          accepted: set[Arc], score_kind: str = "ric") -> float:
    """From-scratch total score of (idiosyncratic + accepted) structures.

    Independent of the incremental ledger path; used to audit decomposability.
    """
    n_nodes = panels[0].n_nodes
    n = panels[0].n_samples
    xi = penalty_coefficient(score_kind, n_nodes, n)
    total = []
    for s, panel in enumerate(panels):
        for scale in range(panel.scale_count):
            block = panel.blocks[scale]
            for node in range(n_nodes):
                parents = set(idio.parents_of(s, scale, node))
                parents.update(l for (j, l, m) in accepted if j == scale and m == node)
                parents = tuple(sorted(parents))
                rss, _, _ = _fit_rss(block, node, parents)
                total.append(n * _log_variance(rss, n) + xi * len(parents))
    return math.fsum(total)


def _fitted_weights(backbone: Backbone, ledger: ScoreLedger,
                    panels: list[MultiscalePanel]) -> dict[Arc, np.ndarray]:
    """Per-subject least-squares weight of every backbone arc in the final fit."""
    weights = {arc: np.zeros(ledger.n_subjects) for arc in backbone.arcs}
    children = {(scale, m) for (scale, l, m) in backbone.arcs}
    for s in range(ledger.n_subjects):
        for scale, m in children:
            st = ledger.state(s, scale, m)
            _, coef, _ = _fit_rss(panels[s].blocks[scale], m, st.parents)
            for pos, parent in enumerate(st.parents):
                arc = (scale, parent, m)
                if arc in weights:
                    weights[arc][s] = coef[pos]
    return weights


def bootstrap_backbone(dags: list[MultiscaleDag], panels: list[MultiscalePanel],
                       p: int, n_boot: int, alpha: float,
                       score_kind: str = "ric", seed: int | None = None,
                       indices: list[np.ndarray] | None = None) -> Backbone:
    """Backbone with arc-level significance from resampling the subject set.

    Each of the ``n_boot`` resamples redraws S subjects with replacement and
    reruns the search.  An arc's bootstrap statistic is its mean fitted weight
    across the resampled subjects (zero when the arc is not selected); arcs
    whose percentile interval at level ``alpha`` excludes zero are retained.
    """
    if n_boot < 1:
        raise ConfigError("n_boot must be >= 1")
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    s_count = len(dags)
    if indices is None:
        rng = np.random.default_rng(seed)
        indices = [rng.integers(0, s_count, size=s_count) for _ in range(n_boot)]
    elif len(indices) != n_boot:
        raise ConfigError("explicit index list must have n_boot entries")

    base = search_mcb(dags, panels, p, score_kind)

    fit_cache: dict = {}
    mean_weights: dict[Arc, np.ndarray] = defaultdict(lambda: np.zeros(n_boot))
    selected: dict[Arc, np.ndarray] = defaultdict(lambda: np.zeros(n_boot, dtype=bool))
    for b, idx in enumerate(indices):
        sub_dags = [dags[i] for i in idx]
        sub_panels = [panels[i] for i in idx]
        boot, ledger, _ = _run_search(sub_dags, sub_panels, p, score_kind,
                                      fit_cache=fit_cache)
        for arc, per_subject in _fitted_weights(boot, ledger, sub_panels).items():
            mean_weights[arc][b] = float(per_subject.mean())
            selected[arc][b] = True

    lo_q, hi_q = alpha / 2.0, 1.0 - alpha / 2.0
    retained: set[Arc] = set()
    stats: dict[Arc, ArcStability] = {}
    for arc in sorted(mean_weights):
        values = mean_weights[arc]
        lo, hi = float(np.quantile(values, lo_q)), float(np.quantile(values, hi_q))
        significant = lo > 0.0 or hi < 0.0
        stats[arc] = ArcStability(
            frequency=float(selected[arc].mean()),
            mean_weight=float(values.mean()),
            interval_low=lo,
            interval_high=hi,
            significant=significant,
        )
        if significant:
            retained.add(arc)

    return Backbone(
        arcs=retained,
        persistence_p=p,
        score_trace=base.score_trace,
        n_nodes=base.n_nodes,
        n_scales=base.n_scales,
        initial_score=base.initial_score,
        final_score=base.final_score,
        arc_stats=stats,
        audit=dict(base.audit, n_boot=n_boot, alpha=alpha),
    ).validate()
