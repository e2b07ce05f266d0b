import itertools
import math

import numpy as np
import pytest

from mcbackbone import graphs
from mcbackbone.backbone import (
    Backbone,
    ScoreLedger,
    bootstrap_backbone,
    build_universe,
    delta_ric,
    family_score,
    penalty_coefficient,
    recompute_total_score,
    search_mcb,
    _run_search,
)
from mcbackbone.dagsolve import MultiscaleDag
from mcbackbone.errors import ConfigError, ShapeMismatch
from mcbackbone.synth import GeneratorConfig, generate_population
from mcbackbone.wavelets import MultiscalePanel


def dag_from_arcs(arcs, k, j=1):
    layers = [np.zeros((k, k)) for _ in range(j)]
    for (scale, l, m), w in arcs.items():
        layers[scale][l, m] = w
    return MultiscaleDag(layers)


def strong_population(seed, subjects=10, nodes=5, samples=400, scales=1):
    return generate_population(GeneratorConfig(
        subjects=subjects, nodes=nodes, samples=samples, scales=scales,
        backbone_density=0.3, idio_density=0.4, min_abs_weight=0.35, seed=seed,
    ))


class TestBuildUniverse:
    def test_persistence_boundary_strict(self):
        # arc (0, 1, 0) present in 3 of 4 subjects
        dags = [dag_from_arcs({(0, 1, 0): 0.5}, k=3) for _ in range(3)]
        dags.append(dag_from_arcs({}, k=3))
        universe, idio = build_universe(dags, p=2)
        assert (1, 0) in universe.per_scale[0]
        assert universe.per_scale[0][(1, 0)] == 3
        assert all(not s[0] for s in idio.per_subject)

        universe, idio = build_universe(dags, p=3)
        assert (1, 0) not in universe.per_scale[0]
        assert [s[0] for s in idio.per_subject[:3]] == [{(1, 0)}] * 3

    def test_p_zero_collects_every_arc(self):
        dags = [dag_from_arcs({(0, 2, 1): 0.4}, k=3),
                dag_from_arcs({(0, 2, 0): -0.3}, k=3)]
        universe, idio = build_universe(dags, p=0)
        assert set(universe.per_scale[0]) == {(2, 1), (2, 0)}
        assert all(not s[0] for s in idio.per_subject)

    def test_idempotent(self):
        pop = strong_population(0)
        u1, i1 = build_universe(pop.dags, p=4)
        u2, i2 = build_universe(pop.dags, p=4)
        assert u1.per_scale == u2.per_scale
        assert i1.per_subject == i2.per_subject

    def test_shape_mismatch(self):
        dags = [dag_from_arcs({}, k=3), dag_from_arcs({}, k=4)]
        with pytest.raises(ShapeMismatch):
            build_universe(dags, p=0)

    def test_p_out_of_range(self):
        dags = [dag_from_arcs({}, k=3)] * 3
        with pytest.raises(ConfigError):
            build_universe(dags, p=3)


class TestFamilyScore:
    def _ledger(self, blocks, idio_arcs=None, xi=2 * math.log(3)):
        panels = [MultiscalePanel([b]) for b in blocks]
        dags = [dag_from_arcs(idio_arcs or {}, k=blocks[0].shape[0]) for _ in blocks]
        universe, idio = build_universe(dags, p=len(dags) - 1)
        return ScoreLedger.initialize(panels, idio, xi), panels

    def test_orphan_node_score_is_ml_variance(self):
        rng = np.random.default_rng(0)
        block = rng.normal(size=(3, 500))
        ledger, _ = self._ledger([block])
        n = 500
        rss = float(block[1] @ block[1])
        assert ledger.state(0, 0, 1).rss == pytest.approx(rss, rel=1e-12)
        expected = n * math.log(rss / n)
        assert family_score(0, 0, 1, ledger) == pytest.approx(expected, rel=1e-12)

    def test_perfect_predictor_drops_score(self):
        rng = np.random.default_rng(1)
        block = rng.normal(size=(2, 300))
        block[1] = 0.9 * block[0] + 1e-7 * rng.normal(size=300)
        ledger, panels = self._ledger([block])
        before = ledger.family_score(0, 0, 1)
        ledger.set_parents(0, 0, 1, block, (0,))
        after = ledger.family_score(0, 0, 1)
        assert after < before

    def test_zero_variance_floor_flagged(self):
        block = np.zeros((2, 100))
        block[0] = np.random.default_rng(2).normal(size=100)
        ledger, _ = self._ledger([block])
        score = ledger.family_score(0, 0, 1)
        assert np.isfinite(score)
        assert any(f.startswith("variance_floor") for f in ledger.flags)

    def test_exhaustive_three_node_ranking_oracle(self):
        # brute-force -2 log-likelihood + penalty over all parent sets,
        # constants kept, must rank identically to the family score
        rng = np.random.default_rng(3)
        n, k = 400, 3
        block = rng.normal(size=(k, n))
        block[2] += 0.8 * block[0] - 0.5 * block[1]
        xi = penalty_coefficient("ric", k, n)

        for child in range(k):
            others = [i for i in range(k) if i != child]
            subsets = []
            for r in range(len(others) + 1):
                subsets.extend(itertools.combinations(others, r))

            module_scores, oracle_scores = [], []
            for parents in subsets:
                panels = [MultiscalePanel([block])]
                ledger = ScoreLedger(1, 1, 1 * 0 + 1, n, xi)
                ledger.n_nodes = k
                ledger.set_parents(0, 0, child, block, tuple(parents))
                module_scores.append(ledger.family_score(0, 0, child))

                y = block[child]
                if parents:
                    a = block[list(parents)].T
                    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
                    resid = y - a @ coef
                else:
                    resid = y
                sigma2 = float(resid @ resid) / n
                neg2loglik = n * math.log(2 * math.pi * sigma2) + n
                oracle_scores.append(neg2loglik + xi * len(parents))

            assert np.argsort(module_scores).tolist() == np.argsort(oracle_scores).tolist()


class TestDeltaRic:
    def _setup(self, seed=0, subjects=20, n=600, weight=0.0):
        rng = np.random.default_rng(seed)
        panels, dags = [], []
        for _ in range(subjects):
            x0 = rng.normal(size=n)
            x1 = weight * x0 + rng.normal(size=n)
            block = np.vstack([x0, x1, rng.normal(size=n)])
            panels.append(MultiscalePanel([block]))
            dags.append(dag_from_arcs({}, k=3))
        universe, idio = build_universe(dags, p=subjects - 1)
        xi = penalty_coefficient("ric", 3, n)
        ledger = ScoreLedger.initialize(panels, idio, xi)
        return ledger, panels

    def test_independent_candidate_penalized(self):
        ledger, panels = self._setup(weight=0.0)
        assert delta_ric((0, 0, 1), ledger, panels) > 0

    def test_true_parent_strongly_negative(self):
        ledger, panels = self._setup(subjects=50, n=1200, weight=0.8)
        delta = delta_ric((0, 0, 1), ledger, panels)
        # analytic expectation: N log(sigma2/(w^2+sigma2)) per subject
        analytic = 50 * 1200 * math.log(1.0 / (1.0 + 0.8**2))
        assert delta < 0.5 * analytic

    def test_existing_parent_rejected(self):
        ledger, panels = self._setup()
        ledger.set_parents(0, 0, 1, panels[0].blocks[0], (0,))
        with pytest.raises(ConfigError):
            delta_ric((0, 0, 1), ledger, panels)

    def test_rank_deficient_design_flagged_not_fatal(self):
        rng = np.random.default_rng(9)
        base = rng.normal(size=400)
        block = np.vstack([base, base, rng.normal(size=400)])  # duplicate columns
        panels = [MultiscalePanel([block])]
        dags = [dag_from_arcs({(0, 0, 2): 0.5, (0, 1, 2): 0.5}, k=3)]
        universe, idio = build_universe(dags, p=0)
        ledger = ScoreLedger.initialize(panels, idio, penalty_coefficient("ric", 3, 400))
        assert any(f.startswith("rank_deficient") for f in ledger.flags)
        assert np.isfinite(ledger.family_score(0, 0, 2))


class TestSearchMcb:
    def test_empty_universe_empty_backbone(self):
        rng = np.random.default_rng(4)
        dags = [dag_from_arcs({}, k=4) for _ in range(5)]
        panels = [MultiscalePanel([rng.normal(size=(4, 200))]) for _ in range(5)]
        result = search_mcb(dags, panels, p=4)
        assert result.arcs == set()
        assert result.score_trace == []

    def test_true_backbone_recovered_from_exact_universe(self):
        hits = 0
        for seed in range(50):
            pop = strong_population(seed)
            # p = S-1: only arcs present in all subjects are candidates
            result = search_mcb(pop.dags, pop.panels, p=len(pop.dags) - 1)
            if result.arcs == pop.backbone.arcs:
                hits += 1
        assert hits >= 45

    def test_monotone_descent(self):
        pop = strong_population(1)
        result = search_mcb(pop.dags, pop.panels, p=5)
        assert all(entry.delta < 0 for entry in result.score_trace)
        totals = [result.initial_score] + [e.total_after for e in result.score_trace]
        assert all(b < a for a, b in zip(totals, totals[1:]))

    def test_cycle_guard_rejects_reverse_arc(self):
        # two nodes tightly coupled: both directions persist in every subject
        rng = np.random.default_rng(6)
        dags, panels = [], []
        for _ in range(6):
            x0 = rng.normal(size=500)
            x1 = 0.9 * x0 + 0.1 * rng.normal(size=500)
            block = np.vstack([x0, x1])
            panels.append(MultiscalePanel([block]))
            dags.append(dag_from_arcs({(0, 0, 1): 0.9, (0, 1, 0): 0.9}, k=2))
        result = search_mcb(dags, panels, p=5)
        assert len(result.arcs) == 1
        result.validate()

    def test_decomposability_incremental_vs_scratch(self):
        for seed in range(20):
            pop = strong_population(seed, subjects=6, nodes=5, samples=200)
            backbone, ledger, idio = _run_search(pop.dags, pop.panels, p=3,
                                                 score_kind="ric")
            accepted = []
            for entry in backbone.score_trace:
                accepted.append(entry.arc)
                scratch = recompute_total_score(pop.panels, idio, set(accepted), "ric")
                assert entry.total_after == pytest.approx(scratch, abs=1e-9)

    def test_acyclic_after_every_acceptance(self):
        pop = strong_population(2, subjects=8)
        backbone, _, _ = _run_search(pop.dags, pop.panels, p=4, score_kind="ric")
        prefix = set()
        for entry in backbone.score_trace:
            prefix.add(entry.arc)
            for scale in range(backbone.n_scales):
                support = np.zeros((backbone.n_nodes, backbone.n_nodes))
                for (j, l, m) in prefix:
                    if j == scale:
                        support[l, m] = 1
                assert graphs.is_acyclic(support)

    def test_scale_independence(self):
        pop = strong_population(3, subjects=6, scales=2)
        full = search_mcb(pop.dags, pop.panels, p=3)
        # replace scale-1 data and structure; scale-0 results must not move
        pop2 = strong_population(99, subjects=6, scales=2)
        dags_mixed = []
        panels_mixed = []
        for d1, d2, p1, p2 in zip(pop.dags, pop2.dags, pop.panels, pop2.panels):
            dags_mixed.append(MultiscaleDag([d1.layers[0], d2.layers[1]]))
            panels_mixed.append(MultiscalePanel([p1.blocks[0], p2.blocks[1]]))
        mixed = search_mcb(dags_mixed, panels_mixed, p=3)
        scale0 = {a for a in full.arcs if a[0] == 0}
        scale0_mixed = {a for a in mixed.arcs if a[0] == 0}
        assert scale0 == scale0_mixed

    def test_local_consistency_smoke(self):
        # arcs absent from the true backbone accepted at rate < 10%
        false_rates = []
        for seed in range(5):
            pop = generate_population(GeneratorConfig(
                subjects=12, nodes=6, samples=1200, backbone_density=0.3,
                idio_density=0.4, min_abs_weight=0.3, seed=seed + 200))
            result = search_mcb(pop.dags, pop.panels, p=7)
            extra = result.arcs - pop.backbone.arcs
            possible = 6 * 5 - len(pop.backbone.arcs)
            false_rates.append(len(extra) / possible)
        assert float(np.mean(false_rates)) < 0.10


class TestBootstrap:
    def test_identity_resample_reduces_to_search(self):
        pop = strong_population(7, subjects=6)
        identity = [np.arange(6)]
        plain = search_mcb(pop.dags, pop.panels, p=3)
        boot = bootstrap_backbone(pop.dags, pop.panels, p=3, n_boot=1, alpha=0.10,
                                  indices=identity)
        assert boot.arcs == plain.arcs
        for arc in boot.arcs:
            stats = boot.arc_stats[arc]
            assert stats.frequency == 1.0
            assert stats.significant

    def test_true_arcs_survive_bootstrap(self):
        pop = strong_population(8, subjects=12)
        boot = bootstrap_backbone(pop.dags, pop.panels, p=8, n_boot=25, alpha=0.10,
                                  seed=0)
        assert pop.backbone.arcs <= boot.arcs

    def test_null_arc_killed(self):
        # inject a spurious persistent arc whose true weight is zero
        pop = strong_population(9, subjects=15, nodes=4)
        null_arc = None
        for l in range(3, 0, -1):
            for m in range(l):
                if (0, l, m) not in pop.backbone.arcs:
                    null_arc = (0, l, m)
                    break
            if null_arc:
                break
        dags = []
        for dag in pop.dags:
            d = dag.copy()
            d.layers[0][null_arc[1], null_arc[2]] = 0.01  # present, meaningless
            dags.append(d)
        boot = bootstrap_backbone(dags, pop.panels, p=10, n_boot=30, alpha=0.10, seed=1)
        assert null_arc not in boot.arcs

    def test_bad_parameters_rejected(self):
        pop = strong_population(10, subjects=4)
        with pytest.raises(ConfigError):
            bootstrap_backbone(pop.dags, pop.panels, p=2, n_boot=0, alpha=0.1)
        with pytest.raises(ConfigError):
            bootstrap_backbone(pop.dags, pop.panels, p=2, n_boot=5, alpha=1.5)
