import json

import pytest

from planact.experiments import (
    EFFICIENCY_REFERENCE,
    HISTORY_REFERENCE,
    efficiency_experiment,
    history_sweep,
)
from planact.metrics import MetricsWriter, read_metrics


@pytest.fixture(scope="module")
def sweep(tiny_pipeline, tmp_path_factory):
    path = str(tmp_path_factory.mktemp("sweep") / "m.jsonl")
    with MetricsWriter(path) as w:
        rep = history_sweep(tiny_pipeline["pairs"], tiny_pipeline["codecs"],
                            tiny_pipeline["cfg"], l_values=(2, 3),
                            metrics_writer=w)
    return rep, path


@pytest.fixture(scope="module")
def efficiency(tiny_pipeline, tmp_path_factory):
    path = str(tmp_path_factory.mktemp("eff") / "m.jsonl")
    with MetricsWriter(path) as w:
        rep = efficiency_experiment(tiny_pipeline["pairs"],
                                    tiny_pipeline["codecs"],
                                    tiny_pipeline["cfg"], metrics_writer=w)
    return rep, path


class TestHistorySweep:
    def test_one_arm_per_length(self, sweep):
        rep, _ = sweep
        assert [a["history"] for a in rep.arms] == [2, 3]
        assert rep.complete

    def test_equal_seeds_across_arms(self, sweep):
        rep, _ = sweep
        seeds = {tuple(a["eval_seeds"]) for a in rep.arms}
        assert len(seeds) == 1
        assert list(seeds.pop()) == rep.eval_seeds

    def test_success_and_wilson_consistent(self, sweep):
        rep, _ = sweep
        for a in rep.arms:
            lo, hi = a["wilson"]
            assert 0.0 <= lo <= a["success"] <= hi <= 1.0
            assert a["trials"] == 2
            assert a["successes"] == round(a["success"] * a["trials"])

    def test_reference_values_attached(self, sweep):
        rep, _ = sweep
        for a in rep.arms:
            assert a["reference_success"] == HISTORY_REFERENCE[a["history"]]
        assert "not asserted" in rep.notes

    def test_metrics_rows_written(self, sweep):
        _, path = sweep
        rows = [r for r in read_metrics(path) if r["kind"] == "history_arm"]
        assert len(rows) == 2

    def test_report_serializes(self, sweep):
        rep, _ = sweep
        loaded = json.loads(rep.to_json())
        assert loaded["title"] == "history_sweep"
        assert len(loaded["arms"]) == 2

    def test_budget_exhaustion_flags_incomplete(self, tiny_pipeline):
        rep = history_sweep(tiny_pipeline["pairs"], tiny_pipeline["codecs"],
                            tiny_pipeline["cfg"], l_values=(2,),
                            max_seconds=0.0)
        assert not rep.complete
        assert rep.arms == []
        assert "exhausted" in rep.notes


class TestEfficiency:
    def test_two_arms(self, efficiency):
        rep, _ = efficiency
        assert [a["arm"] for a in rep.arms] == ["two_stage", "from_scratch"]
        assert rep.complete

    def test_identical_eval_seeds(self, efficiency):
        rep, _ = efficiency
        a, b = rep.arms
        assert a["eval_seeds"] == b["eval_seeds"] == rep.eval_seeds

    def test_equal_total_budget(self, efficiency):
        rep, _ = efficiency
        a, b = rep.arms
        assert a["total_steps"] == b["total_steps"] == 12
        # both arms end their eval trace at the full budget
        assert a["evals"][-1][0] == 12
        assert b["evals"][-1][0] == 12

    def test_step_axis_counts_planner_steps(self, efficiency):
        rep, _ = efficiency
        two_stage, from_scratch = rep.arms
        # warm arm's first snapshot lands after the stage-1 budget
        assert two_stage["evals"][0][0] == 12
        assert [s for s, _ in from_scratch["evals"]] == [6, 12]

    def test_threshold_field(self, efficiency):
        rep, _ = efficiency
        for a in rep.arms:
            v = a["steps_to_threshold"]
            assert v == ">budget" or isinstance(v, int)
        assert "threshold" in rep.notes.lower()

    def test_reference_steps(self, efficiency):
        rep, _ = efficiency
        assert rep.arms[0]["reference_steps"] == \
            EFFICIENCY_REFERENCE["two_stage"]
        assert rep.arms[1]["reference_steps"] == \
            EFFICIENCY_REFERENCE["single_stage"]

    def test_eval_rows_written(self, efficiency):
        _, path = efficiency
        rows = [r for r in read_metrics(path)
                if r["kind"] == "efficiency_eval"]
        assert {r["arm"] for r in rows} == {"two_stage", "from_scratch"}

    def test_budget_exhaustion(self, tiny_pipeline):
        rep = efficiency_experiment(tiny_pipeline["pairs"],
                                    tiny_pipeline["codecs"],
                                    tiny_pipeline["cfg"], max_seconds=0.0)
        assert not rep.complete
        assert rep.arms == []
