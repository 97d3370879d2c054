"""
Reasoner tests: answer extraction, outcomes, memory bank, prompt, and the
iterative answer loop driven by scripted reasoner mocks.
"""

import asyncio
import json
import re

import pytest

from src.core_types import Question
from src.errors import PipelineError, ReasonerError, TransportFailure
from src.harness import oracle_ranker
from src.model_gateway import mock_backend
from src.reasoner import (
    FORCE_DIRECTIVE,
    NO_FINDINGS,
    Answer,
    AnswerTrace,
    ChainedQueryEncoder,
    HashQueryEncoder,
    LookupQueryEncoder,
    MemoryBank,
    Refine,
    RetrievalPipeline,
    Unparseable,
    answer_loop,
    extract_answer,
    parse_outcome,
    render_reasoner_prompt,
    update_memory,
)

ITERATION = re.compile(r"This is iteration (\d+)/(\d+)")


def run(coro):
    return asyncio.run(coro)


def scripted_reasoner(by_round, prompts=None):
    """Reasoner whose response depends only on the round number in the prompt"""

    def respond(request):
        if prompts is not None:
            prompts.append(request.prompt_text)
        k = int(ITERATION.search(request.prompt_text).group(1))
        return by_round(k)

    return mock_backend([(lambda request: True, respond)])


def refine(k):
    return f"<query_update>refined search {k}</query_update><notes>finding {k}</notes>"


@pytest.fixture
def retrieval(small_index, small_cfg, synthetic):
    encoder = ChainedQueryEncoder(LookupQueryEncoder(synthetic.queries), HashQueryEncoder(small_index.dim, 8))
    return RetrievalPipeline(small_index, oracle_ranker(), small_cfg, encoder)


@pytest.fixture
def question(synthetic) -> Question:
    return synthetic.questions[0]


# ==============================================================================
# ANSWER EXTRACTION
# ==============================================================================

@pytest.mark.parametrize(
    "text,expected",
    [
        ("<answer>B</answer> because the guideline says so", "B"),
        ("The answer is B", None),
        ("<answer> maybe, evidence weak", "maybe"),
        ("<answer>c</answer>", "C"),
        ("<answer>no</answer>", "no"),
        ("<answer>E</answer>", None),
        ("<answer>Absolutely</answer>", None),
        (None, None),
    ],
    ids=["letter", "untagged", "triage-space", "lowercase", "no", "out-of-range", "word-boundary", "none"],
)
def test_extract_answer(text, expected):
    assert extract_answer(text) == expected


def test_parse_outcome_refine():
    response = (
        "<query_update>retinal toxicity screening</query_update>"
        "<notes>dosing covered; toxicity missing</notes>"
    )
    assert parse_outcome(response) == Refine("retinal toxicity screening", "dosing covered; toxicity missing")


def test_answer_beats_refine():
    outcome = parse_outcome("<answer>A</answer><query_update>x</query_update>")
    assert isinstance(outcome, Answer)
    assert outcome.label == "A"


@pytest.mark.parametrize("response", ["", "thinking...", "<query_update>   </query_update>"])
def test_unparseable(response):
    assert isinstance(parse_outcome(response), Unparseable)


# ==============================================================================
# MEMORY BANK
# ==============================================================================

def test_update_memory_prefixes_each_line():
    bank = update_memory(MemoryBank(), 1, "first")
    bank = update_memory(bank, 2, "A\nB\n")
    assert bank.iteration == 3
    assert bank.key_findings == ("[Round 1] first", "[Round 2] A", "[Round 2] B")
    assert [(r.iteration, r.notes) for r in bank.reasoning_history] == [(1, "first"), (2, "A\nB\n")]


def test_update_memory_rejects_round_mismatch():
    with pytest.raises(ValueError, match="round mismatch"):
        update_memory(MemoryBank(), 2, "x")


def test_memory_json_field_names():
    bank = update_memory(MemoryBank(), 1, "dosing covered")
    data = json.loads(bank.to_json())
    assert list(data) == ["iteration", "key_findings", "reasoning_history"]
    assert data["key_findings"] == ["[Round 1] dosing covered"]
    assert MemoryBank.from_dict(data) == bank


def test_memory_rejects_future_round_findings():
    with pytest.raises(ValueError):
        MemoryBank(iteration=1, key_findings=("[Round 2] too early",))


# ==============================================================================
# PROMPT
# ==============================================================================

def test_force_directive_only_in_final_round(question):
    texts = [
        render_reasoner_prompt(question, None, MemoryBank(iteration=k), ["s"], [], k, 3).prompt_text
        for k in (1, 2, 3)
    ]
    assert [FORCE_DIRECTIVE in t for t in texts] == [False, False, True]
    assert "This is iteration 2/3." in texts[1]


def test_prompt_limits_images_and_summaries(question):
    request = render_reasoner_prompt(
        question, None, MemoryBank(), [f"summary {i}" for i in range(30)], [f"img{i}.png" for i in range(15)], 1, 3
    )
    assert len(request.image_refs) == 10
    assert "[20] summary 19" in request.prompt_text
    assert "[21]" not in request.prompt_text
    assert "page images are also provided" in request.prompt_text
    assert NO_FINDINGS in request.prompt_text
    assert request.temperature == 0.1
    assert request.max_new_tokens == 2048


def test_prompt_without_image_support(question):
    request = render_reasoner_prompt(question, None, MemoryBank(), ["s"], ["img.png"], 1, 3, accepts_images=False)
    assert request.image_refs == []
    assert "(The actual page images are also provided for your reference.)" in request.prompt_text


def test_prompt_keeps_the_instruction_text_verbatim(question):
    text = render_reasoner_prompt(question, None, MemoryBank(), ["s"], [], 3, 3).prompt_text
    assert text.startswith(
        "You are a medical QA expert. Answer the multiple-choice question based on the provided document "
        f"pages. Question: {question.stem}. Options: "
    )
    assert f". {NO_FINDINGS}. Retrieved page summaries: \n[1] s. (The actual page images" in text
    assert text.endswith(f"This is iteration 3/3. {FORCE_DIRECTIVE}.")


def test_prompt_shows_memory_json(question):
    bank = update_memory(MemoryBank(), 1, "dosing covered")
    text = render_reasoner_prompt(question, None, bank, ["s"], [], 2, 3).prompt_text
    assert 'Memory bank: {"iteration": 2, "key_findings": ["[Round 1] dosing covered"]' in text


def test_iteration_outside_cap(question):
    with pytest.raises(ValueError):
        render_reasoner_prompt(question, None, MemoryBank(), [], [], 4, 3)


# ==============================================================================
# QUERY ENCODERS
# ==============================================================================

def test_hash_encoder_is_deterministic():
    encoder = HashQueryEncoder(dim=16, tokens=4)
    a, b = encoder.encode("retinal toxicity"), encoder.encode("retinal toxicity")
    assert a.tokens.shape == (4, 16)
    assert (a.tokens == b.tokens).all()
    assert not (a.tokens == encoder.encode("other").tokens).all()


def test_lookup_encoder_miss(synthetic):
    encoder = LookupQueryEncoder(synthetic.queries)
    assert encoder.encode(synthetic.queries[0].text) is synthetic.queries[0]
    with pytest.raises(PipelineError):
        encoder.encode("unknown text")


# ==============================================================================
# ANSWER LOOP
# ==============================================================================

def test_answer_in_round_one(question, retrieval, small_cfg):
    trace = run(answer_loop(question, retrieval, scripted_reasoner(lambda k: "<answer>C</answer>"), small_cfg))
    assert trace.final_label == "C"
    assert trace.rounds_used == 1
    assert trace.retrieval_calls == 1
    assert trace.rounds[0].memory.is_empty


def test_refine_twice_then_answer(question, retrieval, small_cfg):
    prompts = []
    reasoner = scripted_reasoner(lambda k: refine(k) if k < 3 else "<answer>A</answer>", prompts)
    trace = run(answer_loop(question, retrieval, reasoner, small_cfg))
    assert trace.final_label == "A"
    assert trace.rounds_used == 3
    assert trace.retrieval_calls == 1 + trace.refinements == 3
    assert not trace.capped_refine
    assert [r.query_text for r in trace.rounds] == [question.stem, "refined search 1", "refined search 2"]
    assert "[Round 1] finding 1" in prompts[2] and "[Round 2] finding 2" in prompts[2]
    assert [FORCE_DIRECTIVE in p for p in prompts] == [False, False, True]


def test_never_answers_stops_at_cap(question, retrieval, small_cfg):
    trace = run(answer_loop(question, retrieval, scripted_reasoner(refine), small_cfg))
    assert trace.final_label is None
    assert trace.rounds_used == 3
    assert trace.retrieval_calls == 3
    assert trace.refine_requests == 3
    assert trace.retrieval_calls == 1 + trace.refinements == trace.refine_requests
    assert trace.capped_refine
    assert trace.to_dict()["capped_refine"] is True
    assert trace.rounds[-1].memory.iteration == 3


def test_unparseable_round_reuses_retrieval(question, retrieval, small_cfg):
    reasoner = scripted_reasoner(lambda k: "hmm" if k == 1 else "<answer>D</answer>")
    trace = run(answer_loop(question, retrieval, reasoner, small_cfg))
    assert trace.final_label == "D"
    assert trace.retrieval_calls == 1
    assert [r.fresh_retrieval for r in trace.rounds] == [True, False]
    assert trace.rounds[0].memory.iteration == 2
    assert trace.rounds[0].memory.key_findings == ()


@pytest.mark.parametrize("cap", [1, 2, 3])
def test_hard_cap_under_any_script(question, retrieval, small_cfg, cap):
    cfg = small_cfg.model_copy(update={"max_iterations": cap})
    trace = run(answer_loop(question, retrieval, scripted_reasoner(refine), cfg))
    assert trace.rounds_used == cap


def test_cap_two_is_a_prefix_of_cap_three(synthetic, retrieval, small_cfg):
    def by_round(k):
        return refine(k) if k == 1 else "<answer>B</answer>"

    cap2 = small_cfg.model_copy(update={"max_iterations": 2})
    for question in synthetic.questions[:3]:
        full = run(answer_loop(question, retrieval, scripted_reasoner(by_round), small_cfg))
        short = run(answer_loop(question, retrieval, scripted_reasoner(by_round), cap2))
        assert full.rounds_used == 2
        assert json.dumps(short.to_dict(), sort_keys=True) == json.dumps(full.to_dict(), sort_keys=True)


def test_memory_ablation_hides_findings(question, retrieval, small_cfg):
    prompts = []
    cfg = small_cfg.model_copy(update={"use_memory_bank": False})
    run(answer_loop(question, retrieval, scripted_reasoner(refine, prompts), cfg))
    assert all(NO_FINDINGS in p for p in prompts)
    assert not any("[Round 1]" in p for p in prompts)


def test_backend_failure_keeps_partial_trace(question, retrieval, small_cfg):
    def respond(k):
        if k == 2:
            raise TransportFailure("HTTP 502", status=502)
        return refine(k)

    with pytest.raises(ReasonerError) as exc:
        run(answer_loop(question, retrieval, scripted_reasoner(respond), small_cfg))
    partial = exc.value.partial
    assert isinstance(partial, AnswerTrace)
    assert partial.rounds_used == 1
    assert "HTTP 502" in partial.error


def test_trace_round_trips_through_json(question, retrieval, small_cfg):
    trace = run(answer_loop(question, retrieval, scripted_reasoner(lambda k: refine(k) if k == 1 else "<answer>B</answer>"), small_cfg))
    restored = AnswerTrace.from_dict(json.loads(json.dumps(trace.to_dict())))
    assert restored.to_dict() == trace.to_dict()
