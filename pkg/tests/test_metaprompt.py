import json

import pytest

from capedit.adapters import LlmConfig, MockTextGenerator
from capedit.editor import EditConfig, Editor
from capedit.errors import ContractError
from capedit.evaluation import load_dataset
from capedit.metaprompt import (
    OptimizeSettings,
    OptimizerState,
    PromptCandidate,
    build_meta_prompt,
    candidate_is_valid,
    meta_instruction,
    optimize,
    parse_candidates,
    pipeline_scorer,
    propose,
    render_trace_curve,
    score_prompt,
)

from conftest import make_adapters

CFG = LlmConfig(model_id="mock-llm", temperature=0.0, seed=0)

VALID_A = "Describe the image after [TRANSFORMATION] is applied to [SOURCE_CAPTION]."
VALID_B = "Rewrite [SOURCE_CAPTION] as if [TRANSFORMATION] already happened."


def candidate(text, score=None, born=0):
    return PromptCandidate(template_text=text, score=score, born_step=born)


def pure_scorer(template_text: str, example) -> float:
    # deterministic pure function of the template text only
    return (sum(ord(ch) for ch in template_text) % 997) / 100.0


class TestBuildMetaPrompt:
    def test_empty_history_is_instruction_alone(self):
        state = OptimizerState()
        assert build_meta_prompt(state) == meta_instruction()

    def test_three_entries_rendered_ascending(self):
        scores = [6.44245171546936, 6.690672039985657, 6.857702553272247]
        state = OptimizerState(history=[
            candidate(VALID_A + " v1", scores[0]),
            candidate(VALID_A + " v2", scores[1]),
            candidate(VALID_A + " v3", scores[2]),
        ])
        prompt = build_meta_prompt(state)
        positions = [prompt.index(f"score: {s}") for s in scores]
        assert positions == sorted(positions)
        assert prompt.count("prompt: \"") == 3

    def test_single_entry_single_block(self):
        state = OptimizerState(history=[candidate(VALID_A, 1.0)])
        prompt = build_meta_prompt(state)
        assert prompt.count("prompt: \"") == 1
        assert prompt.startswith(meta_instruction())


class TestCandidateValidation:
    def test_both_placeholders_required(self):
        assert candidate_is_valid(VALID_A)
        assert not candidate_is_valid("only [TRANSFORMATION] here")
        assert not candidate_is_valid("only [SOURCE_CAPTION] here")
        with pytest.raises(ContractError):
            PromptCandidate(template_text="no placeholders")

    def test_history_invariants_checked(self):
        state = OptimizerState(history=[candidate(VALID_A, 2.0),
                                        candidate(VALID_B, 1.0)])
        with pytest.raises(ContractError):
            state.check()


class TestParseCandidates:
    def test_quoted_prompt_lines(self):
        completion = (f'prompt: "{VALID_A}"\nscore: 1.0\n\nprompt: "{VALID_B}"\n')
        assert parse_candidates(completion) == [VALID_A, VALID_B]

    def test_fallback_longest_valid_line(self):
        completion = f"some preamble\n{VALID_A}\nshort [SOURCE_CAPTION] [TRANSFORMATION]\n"
        assert parse_candidates(completion) == [VALID_A]

    def test_no_candidates(self):
        assert parse_candidates("nothing useful here") == []


class TestPropose:
    def test_invalid_candidate_consumes_retry(self, caplog):
        gen = MockTextGenerator(queue=[
            'prompt: "missing the other placeholder [TRANSFORMATION]"',
            f'prompt: "{VALID_A}"\nprompt: "{VALID_B}"',
        ])
        state = OptimizerState()
        out = propose(state, gen, CFG, n=2)
        assert [c.template_text for c in out] == [VALID_A, VALID_B]
        assert gen.calls.generate_text == 2  # one retry consumed

    def test_zero_valid_after_retries_warns(self, caplog):
        import logging

        gen = MockTextGenerator(queue=["junk", "junk", "junk", "junk"])
        with caplog.at_level(logging.WARNING):
            out = propose(OptimizerState(), gen, CFG, n=2)
        assert out == []
        assert gen.calls.generate_text == 3  # capped at 3 attempts
        assert any("history only" in r.message for r in caplog.records)

    def test_default_two_proposals_from_fallback(self):
        gen = MockTextGenerator()
        out = propose(OptimizerState(), gen, CFG)
        assert len(out) == 2
        assert all(candidate_is_valid(c.template_text) for c in out)
        assert all(c.born_step == 0 for c in out)

    def test_history_texts_not_reproposed(self):
        gen = MockTextGenerator(queue=[f'prompt: "{VALID_A}"\nprompt: "{VALID_B}"'] * 3)
        state = OptimizerState(history=[candidate(VALID_A, 1.0)])
        out = propose(state, gen, CFG, n=2)
        assert [c.template_text for c in out] == [VALID_B]


class TestScorePrompt:
    def test_sum_of_per_example_scores(self):
        scorer = lambda text, example: 0.5
        total = score_prompt(candidate(VALID_A), list(range(8)), scorer)
        assert total == pytest.approx(4.0)

    def test_failed_example_contributes_zero(self, caplog):
        def flaky(text, example):
            if example == 3:
                raise RuntimeError("pipeline exploded")
            return 1.0

        total = score_prompt(candidate(VALID_A), list(range(8)), flaky)
        assert total == pytest.approx(7.0)

    def test_deterministic_across_runs(self):
        a = score_prompt(candidate(VALID_A), list(range(8)), pure_scorer)
        b = score_prompt(candidate(VALID_A), list(range(8)), pure_scorer)
        assert a == b


class TestOptimize:
    def run(self, tmp_path, steps=20, out=None, resume=False, seed=0):
        gen = MockTextGenerator()
        settings = OptimizeSettings(steps=steps, rng_seed=seed,
                                    examples_per_step=2)
        pool = self.pool(tmp_path)
        return optimize(pool, gen, CFG, pure_scorer, settings=settings,
                        out_dir=out, resume=resume)

    def pool(self, tmp_path):
        from conftest import make_dataset

        root = tmp_path / "pool"
        if not (root / "manifest.json").exists():
            make_dataset(root, n=6, split="dev", with_captions=False)
        return load_dataset(root)

    def test_twenty_step_trace(self, tmp_path):
        state, trace = self.run(tmp_path, steps=20)
        assert len(trace) == 20
        assert state.step == 20

    def test_best_score_monotone_under_pure_scorer(self, tmp_path):
        _, trace = self.run(tmp_path, steps=20)
        best = [entry["best_score"] for entry in trace]
        assert all(b is not None for b in best)
        assert all(y >= x for x, y in zip(best, best[1:]))

    def test_history_invariants_every_step(self, tmp_path):
        _, trace = self.run(tmp_path, steps=10)
        for entry in trace:
            history = entry["history"]
            assert len(history) <= 3
            scores = [h["score"] for h in history]
            assert scores == sorted(scores)
            for h in history:
                assert candidate_is_valid(h["template_text"])

    def test_resume_reproduces_trace(self, tmp_path):
        full_dir = tmp_path / "full"
        _, full_trace = self.run(tmp_path, steps=12, out=full_dir)

        part_dir = tmp_path / "part"
        self.run(tmp_path, steps=6, out=part_dir)
        _, resumed_trace = self.run(tmp_path, steps=12, out=part_dir, resume=True)
        assert resumed_trace == full_trace

    def test_state_persisted_and_loadable(self, tmp_path):
        out = tmp_path / "opt"
        state, _ = self.run(tmp_path, steps=3, out=out)
        payload = json.loads((out / "state.json").read_text())
        assert payload["step"] == 3
        assert len(payload["history"]) <= 3

    def test_tie_break_prefers_older_candidate(self, tmp_path):
        gen = MockTextGenerator()
        pool = self.pool(tmp_path)
        settings = OptimizeSettings(steps=2, examples_per_step=2)
        constant = lambda text, example: 1.0
        state, trace = optimize(pool, gen, CFG, constant, settings=settings)
        born = sorted(c["born_step"] for c in trace[1]["history"])
        assert born == [0, 0, 1]

    def test_trace_records_best_ever(self, tmp_path):
        _, trace = self.run(tmp_path, steps=5)
        for entry in trace:
            assert entry["best_ever"] >= entry["best_score"] - 1e-12


class TestPipelineScorer:
    def test_scores_real_mock_pipeline(self, tmp_path, dataset_dir):
        editor = Editor(make_adapters(), runs_dir=tmp_path / "runs")
        scorer = pipeline_scorer(editor, EditConfig(steps_invert=8, steps_generate=8))
        example = load_dataset(dataset_dir)[0]
        value = scorer(VALID_A, example)
        assert -1.0 <= value <= 1.0
        assert scorer(VALID_A, example) == pytest.approx(value)  # deterministic

    def test_distinct_templates_distinct_scores(self, tmp_path, dataset_dir):
        editor = Editor(make_adapters(), runs_dir=tmp_path / "runs")
        scorer = pipeline_scorer(editor, EditConfig(steps_invert=8, steps_generate=8))
        example = load_dataset(dataset_dir)[0]
        assert scorer(VALID_A, example) != scorer(VALID_B, example)


class TestTraceCurve:
    def test_renders_png(self, tmp_path):
        trace_path = tmp_path / "trace.jsonl"
        entries = [{"step": i, "best_score": 5.0 + 0.1 * i} for i in range(5)]
        trace_path.write_text("".join(json.dumps(e) + "\n" for e in entries))
        out = render_trace_curve(trace_path, tmp_path / "curve.png")
        assert out.exists() and out.stat().st_size > 0
