"""Diversity, overlap and one-to-many metrics with hand-computed oracles."""

import math
from pathlib import Path

import numpy as np
import pytest

from spangen.metrics import (
    GenerationLog,
    GenerationRecord,
    Repetition,
    METRIC_KEYS,
    build_report,
    corpus_reference_overlap,
    distinct_n,
    entropy_n,
    intra_inter_dist,
    load_generation_log,
    one2many_ratios,
    reference_overlap,
    save_generation_log,
)
from spangen.spans import Span

GOLDEN_DIR = Path(__file__).parent / "data" / "golden_logs"


def make_log(cases: list[list[tuple[object, list[str]]]]) -> GenerationLog:
    records = []
    for i, reps in enumerate(cases):
        records.append(
            GenerationRecord(
                case_id=f"c{i}",
                repetitions=[Repetition(grounding=g, tokens=t) for g, t in reps],
            )
        )
    return GenerationLog(records=records)


class TestDistinct:
    def test_single_response(self):
        assert distinct_n([["a", "a", "b"]], 1) == pytest.approx(2 / 3)

    def test_pooled_identical_copies(self):
        assert distinct_n([["a", "b", "c"], ["a", "b", "c"]], 1) == 0.5

    def test_all_distinct(self):
        assert distinct_n([["a", "b"], ["c", "d"]], 1) == 1.0

    def test_no_ngrams(self):
        assert distinct_n([], 1) == 0.0
        assert distinct_n([["a"]], 2) == 0.0

    def test_invalid_n(self):
        with pytest.raises(ValueError):
            distinct_n([["a"]], 3)


class TestEntropy:
    def test_zero_for_constant(self):
        assert entropy_n([["a", "a", "a"]], 1) == 0.0

    def test_uniform_four_grams(self):
        assert entropy_n([["a", "b", "c", "d"]], 1) == pytest.approx(math.log(4), abs=1e-12)

    def test_hand_frequencies(self):
        # frequencies {2,1,1}/4 -> -(0.5 ln 0.5 + 2 * 0.25 ln 0.25)
        val = entropy_n([["a", "a", "b", "c"]], 1)
        assert val == pytest.approx(1.0397207708399179, abs=1e-12)

    def test_empty(self):
        assert entropy_n([], 2) == 0.0

    def test_non_negative_random(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            resp = [
                [f"t{int(i)}" for i in rng.integers(0, 6, int(rng.integers(0, 8)))]
                for _ in range(int(rng.integers(1, 5)))
            ]
            assert entropy_n(resp, 1) >= 0.0
            assert entropy_n(resp, 2) >= 0.0


class TestReferenceOverlap:
    def test_identical_hypothesis(self):
        out = reference_overlap(["a", "b", "c"], [["a", "b", "c"]])
        assert out["bleu_1"] == 1.0
        assert out["rouge_l"] == 1.0

    def test_disjoint(self):
        out = reference_overlap(["a", "b"], [["c", "d"], ["e"]])
        assert all(v == 0.0 for v in out.values())

    def test_rouge_l_hand_lcs(self):
        out = reference_overlap(["a", "b", "c"], [["a", "c"]])
        assert out["rouge_l"] == pytest.approx(0.8, abs=1e-12)

    def test_bleu_2_hand(self):
        out = reference_overlap(["a", "b", "c"], [["a", "b", "d"]])
        assert out["bleu_2"] == pytest.approx(math.sqrt((2 / 3) * (1 / 2)), abs=1e-12)

    def test_brevity_penalty(self):
        out = reference_overlap(["a"], [["a", "b"]])
        assert out["bleu_1"] == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_closest_reference_tie_prefers_shorter(self):
        out = reference_overlap(["a", "x"], [["a"], ["a", "b", "c"]])
        assert out["bleu_1"] == 0.5  # r=1 < c=2 so no penalty

    def test_empty_hypothesis(self):
        out = reference_overlap([], [["a"]])
        assert all(v == 0.0 for v in out.values())

    def test_duplicated_reference_idempotent(self):
        rng = np.random.default_rng(5)
        toks = [f"t{i}" for i in range(6)]
        for _ in range(50):
            hyp = [toks[int(i)] for i in rng.integers(0, 6, int(rng.integers(1, 8)))]
            ref = [toks[int(i)] for i in rng.integers(0, 6, int(rng.integers(1, 8)))]
            once = reference_overlap(hyp, [ref])
            thrice = reference_overlap(hyp, [ref, ref, ref])
            assert once == thrice

    def test_requires_references(self):
        with pytest.raises(ValueError):
            reference_overlap(["a"], [])

    def test_corpus_level_pools_counts(self):
        pairs = [(["a", "b"], [["a", "b"]]), (["c", "x"], [["c", "d"]])]
        out = corpus_reference_overlap(pairs)
        assert out["bleu_1"] == pytest.approx(3 / 4)  # (2 + 1) matches / 4 unigrams
        assert out["rouge_1"] == pytest.approx((1.0 + 0.5) / 2)


class TestIntraInter:
    def test_two_case_hand_fixture(self):
        log = make_log(
            [
                [(Span(0, 0), ["a", "b", "b"]), (Span(1, 1), ["a", "b", "b"])],
                [(Span(0, 0), ["c", "d"]), (Span(1, 1), ["d", "e"])],
            ]
        )
        d1 = intra_inter_dist(log, 1)
        assert d1.intra == pytest.approx((1 / 3 + 3 / 4) / 2, abs=1e-12)
        assert d1.inter == pytest.approx(0.5, abs=1e-12)
        d2 = intra_inter_dist(log, 2)
        assert d2.intra == pytest.approx((0.5 + 1.0) / 2, abs=1e-12)
        assert d2.inter == pytest.approx(2 / 3, abs=1e-12)

    def test_single_case_pooling_coincides(self):
        log = make_log([[(Span(0, 0), ["a", "b"]), (Span(1, 1), ["b", "c"])]])
        out = intra_inter_dist(log, 1)
        assert out.intra == out.inter

    def test_identical_single_token_everywhere(self):
        log = make_log([[(Span(0, 0), ["x"]), (Span(0, 0), ["x"])]] * 3)
        assert intra_inter_dist(log, 1).inter == pytest.approx(1 / 6)

    def test_single_repetition_absent(self):
        log = make_log([[(Span(0, 0), ["a"])]])
        out = intra_inter_dist(log, 1)
        assert out.intra is None and out.intra_absent_reason


class TestOne2Many:
    def test_footnote_two_unique_in_five(self):
        reps = [(Span(0, 0), ["x"]), (Span(0, 0), ["x"]), (Span(1, 2), ["y"]),
                (Span(0, 0), ["x"]), (Span(0, 0), ["x"])]
        ratios = one2many_ratios(make_log([reps]))
        assert ratios["unique_grounding_ratio"] == pytest.approx(0.4, abs=1e-12)

    def test_all_repetitions_identical(self):
        reps = [(Span(0, 1), ["a", "b"])] * 5
        ratios = one2many_ratios(make_log([reps]))
        assert ratios["unique_grounding_ratio"] == pytest.approx(0.2, abs=1e-12)
        assert ratios["unique_generation_ratio"] == pytest.approx(0.2, abs=1e-12)
        assert ratios["effect_of_grounding"] == pytest.approx(1.0, abs=1e-12)

    def test_sentence_groundings_count_by_index(self):
        reps = [(0, ["a"]), (1, ["b"]), (0, ["c"]), (1, ["a"])]
        ratios = one2many_ratios(make_log([reps]))
        assert ratios["unique_grounding_ratio"] == pytest.approx(0.5, abs=1e-12)
        assert ratios["unique_generation_ratio"] == pytest.approx(0.75, abs=1e-12)

    def test_requires_two_repetitions(self):
        with pytest.raises(ValueError):
            one2many_ratios(make_log([[(Span(0, 0), ["a"])]]))

    @pytest.mark.parametrize(
        "name,grounding,generation,effect",
        [("skt", 0.401, 0.336, 0.838), ("colv", 0.679, 0.332, 0.488), ("ours", 0.788, 0.628, 0.797)],
    )
    def test_stored_golden_logs_match_reported_rows(self, name, grounding, generation, effect):
        log = load_generation_log(GOLDEN_DIR / f"{name}.jsonl")
        ratios = one2many_ratios(log)
        assert ratios["unique_grounding_ratio"] == pytest.approx(grounding, abs=1e-9)
        assert ratios["unique_generation_ratio"] == pytest.approx(generation, abs=1e-9)
        assert ratios["effect_of_grounding"] == pytest.approx(effect, abs=1e-3)
        assert ratios["effect_of_grounding"] == pytest.approx(generation / grounding, abs=1e-12)

    def test_ratios_bounded_on_random_logs(self):
        rng = np.random.default_rng(8)
        for _ in range(40):
            n_cases, reps = int(rng.integers(1, 6)), int(rng.integers(2, 7))
            cases = []
            for _ in range(n_cases):
                cases.append(
                    [
                        (Span(int(rng.integers(0, 3)), 3), [f"t{int(rng.integers(0, 4))}"])
                        for _ in range(reps)
                    ]
                )
            ratios = one2many_ratios(make_log(cases))
            for v in ratios.values():
                assert 0.0 < v <= 1.0 or v == ratios["effect_of_grounding"]
            assert 0.0 < ratios["unique_grounding_ratio"] <= 1.0
            assert 0.0 < ratios["unique_generation_ratio"] <= 1.0


class TestOrderInvariance:
    def test_metrics_invariant_under_reordering(self):
        rng = np.random.default_rng(9)
        cases = []
        for i in range(6):
            cases.append(
                [
                    (Span(int(rng.integers(0, 3)), 4), [f"t{int(j)}" for j in rng.integers(0, 5, 3)])
                    for _ in range(4)
                ]
            )
        log = make_log(cases)
        shuffled_cases = [list(reversed(c)) for c in reversed(cases)]
        log2 = make_log(shuffled_cases)
        assert one2many_ratios(log) == one2many_ratios(log2)
        for n in (1, 2):
            a, b = intra_inter_dist(log, n), intra_inter_dist(log2, n)
            assert a.inter == pytest.approx(b.inter, abs=1e-12)
            assert a.intra == pytest.approx(b.intra, abs=1e-12)
            assert entropy_n([r.tokens for rec in log.records for r in rec.repetitions], n) == \
                pytest.approx(entropy_n([r.tokens for rec in log2.records for r in rec.repetitions], n), abs=1e-12)


class TestGenerationLogIO:
    def test_round_trip(self, tmp_path):
        log = make_log(
            [
                [(Span(0, 2), ["a", "b"]), (1, ["c"])],
                [(Span(1, 1), ["d"]), (0, ["e"])],
            ]
        )
        path = tmp_path / "log.jsonl"
        save_generation_log(log, path)
        loaded = load_generation_log(path)
        assert loaded.repetition_count == 2
        assert [r.case_id for r in loaded.records] == ["c0", "c1"]
        assert loaded.records[0].repetitions[0].grounding == Span(0, 2)
        assert loaded.records[0].repetitions[1].grounding == 1

    def test_uniform_repetition_count_enforced(self):
        with pytest.raises(ValueError, match="uniform"):
            GenerationLog(
                records=[
                    GenerationRecord("a", [Repetition(Span(0, 0), ["x"])]),
                    GenerationRecord("b", [Repetition(Span(0, 0), ["x"])] * 2),
                ]
            )

    def test_bad_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"case_id": "x"}\n')
        with pytest.raises(ValueError, match="line 1"):
            load_generation_log(path)


class TestBuildReport:
    def _case(self):
        from helpers import tiny_case

        return tiny_case(l_k=8, n_sentences=2, n_responses=2, seed=1, case_id="c0")

    def test_keys_exactly_metric_fields(self):
        case = self._case()
        log = make_log([[(Span(0, 1), ["t1", "t2"]), (Span(2, 3), ["t3"])]])
        report = build_report(log, {"c0": case})
        assert tuple(report.keys()) == METRIC_KEYS
        assert all(not isinstance(v, dict) for v in report.values())

    def test_absent_with_reason_for_single_repetition(self):
        case = self._case()
        log = make_log([[(Span(0, 1), ["t1", "t2"])]])
        report = build_report(log, {"c0": case})
        for key in ("intra_dist_1", "intra_dist_2", "unique_grounding_ratio",
                    "unique_generation_ratio", "effect_of_grounding"):
            assert report[key] == {"absent": "repetition_count < 2"}
        assert isinstance(report["bleu_1"], float)

    def test_validates_groundings(self):
        case = self._case()
        log = make_log([[(Span(0, 99), ["t1"]), (Span(0, 1), ["t2"])]])
        with pytest.raises(ValueError, match="exceeds knowledge"):
            build_report(log, {"c0": case})
        log = make_log([[(7, ["t1"]), (0, ["t2"])]])
        with pytest.raises(ValueError, match="out of range"):
            build_report(log, {"c0": case})

    def test_unknown_case(self):
        log = make_log([[(Span(0, 0), ["t1"]), (Span(0, 0), ["t2"])]])
        with pytest.raises(ValueError, match="unknown case"):
            build_report(log, {"other": self._case()})
