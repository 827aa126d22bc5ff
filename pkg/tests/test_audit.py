import numpy as np
import pytest

from ragcanary.audit import (
    AuditPlan,
    RemoteResponder,
    SimulatorResponder,
    bootstrap_auc_interval,
    evaluate_roc,
    roc_auc_trapezoid,
    run_audit,
    select_queries,
)
from ragcanary.errors import DetectionError, ValidationError
from ragcanary.experiment import ExperimentConfig, SyntheticWorld
from ragcanary.gateway import FixtureStore, Gateway, post_fingerprint
from ragcanary.simulator import derive_seed
from ragcanary.synthesis import (
    CanaryRecord,
    DocumentAttributes,
    EntitySet,
    Registry,
)
from ragcanary.watermark import WatermarkKey, threshold_for_fpr


def auc_pair_enumeration(pos, neg) -> float:
    """Oracle: direct enumeration of all (positive, negative) pairs, ties = 1/2."""
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


@pytest.fixture(scope="module")
def tiny_world():
    cfg = ExperimentConfig(
        axis="quota", values=(1,), trials_positive=10, trials_negative=10,
        bootstrap_replicates=0, seed=21,
    )
    return cfg, SyntheticWorld(cfg, 8, 2.0, 2)


def make_plan(world, quota, per_canary=1, seed=0, **kwargs):
    return AuditPlan(
        registry=world.registry,
        vocabulary=world.vocabulary,
        quota=quota,
        eta=threshold_for_fpr(0.01),
        queries_per_canary=per_canary,
        selection_seed=seed,
        **kwargs,
    )


class TestPlanAndSelection:
    def test_zero_quota_rejected(self, tiny_world):
        _, world = tiny_world
        with pytest.raises(ValidationError):
            make_plan(world, 0)

    def test_quota_beyond_available_rejected(self, tiny_world):
        _, world = tiny_world
        with pytest.raises(ValidationError, match="exceeds"):
            make_plan(world, 9, per_canary=1)

    def test_distinct_canaries_at_one_query_each(self, tiny_world):
        _, world = tiny_world
        picked = select_queries(make_plan(world, 8, per_canary=1, seed=3))
        assert len(picked) == 8
        assert len({canary_id for canary_id, _ in picked}) == 8

    def test_round_robin_with_multiple_queries(self, tiny_world):
        _, world = tiny_world
        picked = select_queries(make_plan(world, 16, per_canary=2, seed=3))
        assert len(picked) == 16
        counts = {}
        for canary_id, _ in picked:
            counts[canary_id] = counts.get(canary_id, 0) + 1
        assert set(counts.values()) == {2}
        # First 8 picks are first questions of distinct canaries.
        assert len({c for c, _ in picked[:8]}) == 8

    def test_selection_deterministic_per_seed(self, tiny_world):
        _, world = tiny_world
        a = select_queries(make_plan(world, 5, seed=9))
        b = select_queries(make_plan(world, 5, seed=9))
        assert a == b


class TestRunAudit:
    def test_counts_sum_across_responses(self, tiny_world):
        _, world = tiny_world
        responder = SimulatorResponder(world.positive_sim, world.embedder, seed=4)
        outcome = run_audit(responder, make_plan(world, 2))
        assert outcome.report.token_count == sum(q.token_count for q in outcome.queries)
        assert outcome.report.green_count == sum(q.green_count for q in outcome.queries)
        assert outcome.report.token_count == 200

    def test_verdict_positive_with_canaries(self, tiny_world):
        _, world = tiny_world
        responder = SimulatorResponder(world.positive_sim, world.embedder, seed=4)
        outcome = run_audit(responder, make_plan(world, 8))
        assert outcome.verdict
        assert outcome.report.z > outcome.report.eta

    def test_verdict_negative_without_canaries(self, tiny_world):
        _, world = tiny_world
        responder = SimulatorResponder(world.negative_sim, world.embedder, seed=4)
        outcome = run_audit(responder, make_plan(world, 8))
        assert not outcome.verdict

    def test_responder_failures_produce_partial_outcome(self, tiny_world):
        _, world = tiny_world
        inner = SimulatorResponder(world.positive_sim, world.embedder, seed=4)
        calls = {"n": 0}

        def flaky(query):
            calls["n"] += 1
            if calls["n"] == 2:
                raise RuntimeError("boom")
            return inner(query)

        outcome = run_audit(flaky, make_plan(world, 4))
        assert len(outcome.failures) == 1
        assert len(outcome.queries) == 3

    def test_all_failures_rejected(self, tiny_world):
        _, world = tiny_world

        def dead(query):
            raise RuntimeError("down")

        with pytest.raises(DetectionError):
            run_audit(dead, make_plan(world, 3))

    def test_empty_response_is_failure_not_zero(self, tiny_world):
        _, world = tiny_world
        inner = SimulatorResponder(world.positive_sim, world.embedder, seed=4)
        first = {"used": False}

        def empty_once(query):
            if not first["used"]:
                first["used"] = True
                return ""
            return inner(query)

        outcome = run_audit(empty_once, make_plan(world, 3))
        assert len(outcome.failures) == 1

    def test_mask_question_tokens_flag(self, tiny_world):
        _, world = tiny_world

        def echoer(query):
            return query + world.documents[0].text

        masked = run_audit(echoer, make_plan(world, 2, mask_question_tokens=True))
        unmasked = run_audit(echoer, make_plan(world, 2))
        assert masked.report.token_count < unmasked.report.token_count


class TestQuotaScaling:
    def test_mean_z_slope_matches_theory_over_quota_grid(self):
        from oracles import expected_z_slope

        cfg = ExperimentConfig(
            axis="quota", values=(1,), trials_positive=1, trials_negative=1,
            bootstrap_replicates=0, seed=33,
        )
        world = SyntheticWorld(cfg, 20, 2.0, 1)
        quotas = (1, 4, 16)
        means = []
        for quota in quotas:
            zs = []
            for t in range(150):
                responder = SimulatorResponder(
                    world.positive_sim, world.embedder, seed=derive_seed(5, quota, t)
                )
                plan = make_plan(world, quota, seed=derive_seed(6, quota, t))
                zs.append(run_audit(responder, plan).report.z)
            means.append(float(np.mean(zs)))
        roots = np.sqrt(np.array(quotas, dtype=float))
        slope_fit = float((roots * np.array(means)).sum() / (roots * roots).sum())
        slope_theory = expected_z_slope(world)
        assert slope_fit == pytest.approx(slope_theory, rel=0.10)


class TestNullCalibration:
    def test_null_audit_fpr_band_over_1000_trials(self):
        # Corpus without canaries: empirical FPR at eta = inverse-CDF(0.99)
        # stays in the band. A large vocabulary keeps finite-world green-share
        # offsets negligible, and question variety spreads the audits across
        # many retrieved documents.
        from ragcanary.experiment import WorldConfig

        cfg = ExperimentConfig(
            axis="quota", values=(1,), trials_positive=1, trials_negative=1,
            bootstrap_replicates=0, seed=61,
            world=WorldConfig(vocab_words=20_000, n_docs=400),
        )
        world = SyntheticWorld(cfg, 20, 2.0, 14)
        eta = threshold_for_fpr(0.01)
        hits = 0
        trials = 1000
        for t in range(trials):
            responder = SimulatorResponder(
                world.negative_sim, world.embedder, seed=derive_seed(7, t)
            )
            plan = make_plan(world, 2, per_canary=14, seed=derive_seed(8, t))
            outcome = run_audit(responder, plan)
            hits += outcome.report.z > eta
        fpr = hits / trials
        assert 0.002 <= fpr <= 0.02, f"null FPR {fpr}"


class TestEvaluateRoc:
    def test_hand_case(self):
        curve = evaluate_roc([2.0, 3.0], [1.0, 2.5])
        assert curve.auc == pytest.approx(0.75)

    def test_perfect_separation(self):
        curve = evaluate_roc([5.0, 6.0, 7.0], [1.0, 2.0])
        assert curve.auc == 1.0
        assert curve.tpr_at[0.01] == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            evaluate_roc([], [1.0])
        with pytest.raises(ValidationError):
            evaluate_roc([1.0], [])

    def test_rank_auc_equals_trapezoid_and_enumeration(self):
        rng = np.random.default_rng(12)
        for trial in range(200):
            pos = rng.normal(0.6, 1.0, size=rng.integers(3, 40))
            neg = rng.normal(0.0, 1.0, size=rng.integers(3, 40))
            if trial % 3 == 0:
                pos = np.round(pos, 1)
                neg = np.round(neg, 1)  # force ties
            curve = evaluate_roc(pos, neg)
            assert curve.auc == pytest.approx(roc_auc_trapezoid(curve), abs=1e-9)
            assert curve.auc == pytest.approx(auc_pair_enumeration(pos, neg), abs=1e-12)

    def test_curve_monotone(self):
        rng = np.random.default_rng(3)
        curve = evaluate_roc(rng.normal(1, 1, 50), rng.normal(0, 1, 50))
        xs = [p[0] for p in curve.points]
        ys = [p[1] for p in curve.points]
        assert xs == sorted(xs)
        assert ys == sorted(ys)
        assert curve.points[0] == (0.0, 0.0)
        assert curve.points[-1] == (1.0, 1.0)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(4)
        pos = rng.normal(1, 1, 60)
        neg = rng.normal(0, 1, 60)
        a = evaluate_roc(pos, neg)
        b = evaluate_roc(np.exp(pos), np.exp(neg))
        assert a.auc == pytest.approx(b.auc, abs=1e-12)
        assert a.tpr_at == b.tpr_at

    def test_tpr_at_exact_levels_interpolated(self):
        # 100 negatives at 0..99: the 1% FPR threshold sits between the two
        # largest negatives; only positives above it count.
        neg = np.arange(100, dtype=float)
        pos = np.array([98.2, 98.2, 99.5, 120.0])
        curve = evaluate_roc(pos, neg, fpr_levels=(0.01,))
        threshold = np.quantile(neg, 0.99)
        expected = float((pos > threshold).mean())
        assert curve.tpr_at[0.01] == expected

    def test_bootstrap_interval_brackets_auc(self):
        rng = np.random.default_rng(5)
        pos = rng.normal(1.5, 1, 80)
        neg = rng.normal(0, 1, 80)
        curve = evaluate_roc(pos, neg)
        lo, hi = bootstrap_auc_interval(pos, neg, replicates=100, seed=1)
        assert lo <= curve.auc <= hi
        assert 0.0 <= lo <= hi <= 1.0


class TestRemoteResponder:
    def _registry(self):
        attrs = DocumentAttributes("t", ("s",), "w", (10, 20))
        canary = CanaryRecord(
            canary_id="c0", text="body", source_doc_id="d", attributes=attrs,
            subtopic="s", entities=EntitySet((), ("f",)),
            query_questions=("what about f?",), key_fingerprint="fp", created_at="t",
        )
        return Registry(
            key=WatermarkKey(seed=2), canaries=[canary], vocabulary_file="",
            vocabulary_sha256="", config={}, created_at="t",
        )

    def test_template_fill_and_answer_path(self, tmp_path):
        store = FixtureStore(tmp_path)
        template = {"inputs": {"question": "{query}"}, "k": 3}
        payload = {"inputs": {"question": "what about f?"}, "k": 3}
        store.put(
            post_fingerprint("https://rag.invalid/query", payload),
            {"response": {"choices": [{"message": {"content": "the answer text"}}]}},
        )
        gw = Gateway(fixtures=store)
        responder = RemoteResponder(
            gw, "https://rag.invalid/query", template, "choices.0.message.content"
        )
        assert responder("what about f?") == "the answer text"

    def test_bad_answer_path_rejected(self, tmp_path):
        store = FixtureStore(tmp_path)
        payload = {"q": "x"}
        store.put(post_fingerprint("https://r.invalid", payload), {"response": {"a": 1}})
        gw = Gateway(fixtures=store)
        responder = RemoteResponder(gw, "https://r.invalid", {"q": "x"}, "missing.field")
        with pytest.raises(ValidationError, match="answer path"):
            responder("x")


class TestConcatenationEquivalence:
    def test_summed_counts_equal_physical_concatenation(self, tiny_world):
        _, world = tiny_world
        from ragcanary.watermark import derive_green_list

        responder = SimulatorResponder(world.positive_sim, world.embedder, seed=7)
        outcome = run_audit(responder, make_plan(world, 6))
        green = derive_green_list(world.registry.key, world.vocabulary.size)
        concatenated = "".join(q.response for q in outcome.queries)
        ids = world.vocabulary.encode(concatenated)
        from ragcanary.watermark import z_statistic

        z, green_count = z_statistic(ids, green, world.registry.key.gamma)
        assert len(ids) == outcome.report.token_count
        assert green_count == outcome.report.green_count
        assert z == pytest.approx(outcome.report.z, abs=1e-12)
