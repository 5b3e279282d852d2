import json

import pytest

from stagewise.backends import (
    PromptTemplate,
    SamplingParams,
    builtin_template,
    generate,
    render_prompt,
    synth_generate,
)
from stagewise.core import Candidate, GeneratorBinding, Problem, StageContext, StageKind, SyntheticWorldParams
from stagewise.exceptions import BackendUnavailable, MalformedResponse, MissingPlaceholder

from conftest import serve

F, S = StageKind.FORMULATION, StageKind.SOLUTION
PROB = Problem("p1", "maximize x")


def test_render_direct_substitution():
    t = PromptTemplate(S, "Solve: {statement}")
    assert render_prompt(t, {"statement": "maximize x"}) == "Solve: maximize x"


def test_render_missing_placeholder():
    t = PromptTemplate(S, "Fix: {error_info}")
    ctx = StageContext(S, PROB, Candidate("p1/F0", F, "f"))
    with pytest.raises(MissingPlaceholder) as ei:
        render_prompt(t, ctx)
    assert ei.value.name == "error_info"


def test_render_no_placeholders_verbatim():
    t = PromptTemplate(S, "just text with {{ braces }} and code {1: 2}")
    assert render_prompt(t, {}) == t.template


def test_builtin_templates_render():
    ctx = StageContext(F, PROB)
    out = render_prompt(builtin_template("formulation"), ctx)
    assert "maximize x" in out and "{statement}" not in out
    sctx = StageContext(S, PROB, Candidate("p1/F0", F, "FORM"), error_info="boom")
    assert "boom" in render_prompt(builtin_template("debug"), sctx)
    assert "FORM" in render_prompt(builtin_template("solution"), sctx)


def test_formulation_template_needs_five_elements():
    with pytest.raises(ValueError):
        PromptTemplate(F, "Write a model for {statement}")


def test_unknown_placeholder_rejected():
    with pytest.raises(ValueError):
        PromptTemplate(F, "{formulation} sets parameters variables objective constraints")


def test_mock_script_order(tmp_path):
    script = tmp_path / "m.jsonl"
    script.write_text("\n".join(json.dumps(b) for b in ["a", "b", "c"]) + "\n")
    b = GeneratorBinding(kind="mock", script_path=str(script))
    out = generate(b, "prompt", SamplingParams(n=3), stage=F, problem_id="p1")
    assert [c.body for c in out] == ["a", "b", "c"]
    assert [c.id for c in out] == ["p1/F0", "p1/F1", "p1/F2"]
    out5 = generate(b, "prompt", SamplingParams(n=5), stage=F, problem_id="p1")
    assert [c.body for c in out5] == ["a", "b", "c", "a", "b"]


def test_mock_stage_and_match_filters(tmp_path):
    script = tmp_path / "m.jsonl"
    rows = [{"body": "F-any", "stage": "formulation"}, {"body": "S-x", "stage": "solution", "match": "xx"},
            {"body": "S-y", "stage": "solution", "match": "yy"}]
    script.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    b = GeneratorBinding(kind="mock", script_path=str(script))
    parent = Candidate("p1/F0", F, "f")
    assert generate(b, "..yy..", SamplingParams(n=2), stage=S, problem_id="p1", parent=parent)[1].body == "S-y"
    with pytest.raises(MalformedResponse):
        generate(b, "none", SamplingParams(n=1), stage=S, problem_id="p1", parent=parent)


def test_synthetic_reproducible():
    b = GeneratorBinding(kind="synthetic", world=SyntheticWorldParams())
    a1 = generate(b, "p", SamplingParams(n=2, seed=7), stage=F, problem_id="p1")
    a2 = generate(b, "p", SamplingParams(n=2, seed=7), stage=F, problem_id="p1")
    assert a1 == a2 and len(a1) == 2
    assert [json.dumps(c.to_dict()) for c in a1] == [json.dumps(c.to_dict()) for c in a2]
    a3 = generate(b, "p", SamplingParams(n=2, seed=8), stage=F, problem_id="p1")
    assert a3 != a1


def test_synthetic_quality_sequence_reproducible():
    w = SyntheticWorldParams()
    q1 = [c.latent_quality for c in synth_generate(w, F, None, 16, 3)]
    q2 = [c.latent_quality for c in synth_generate(w, F, None, 16, 3)]
    assert q1 == q2
    assert all(0 <= q <= 1 for q in q1)


def test_synthetic_fixed_quality():
    w = SyntheticWorldParams(fixed_quality=1.0)
    assert [c.latent_quality for c in synth_generate(w, F, None, 4, 0)] == [1.0] * 4


def test_synthetic_solution_quality_is_product():
    w = SyntheticWorldParams()
    hi = synth_generate(w, S, 0.8, 8, 5, parent_id="p/F0")
    lo = synth_generate(w, S, 0.4, 8, 5, parent_id="p/F1")
    for a, b in zip(hi, lo):
        assert a.latent_quality == pytest.approx(2 * b.latent_quality)


def test_synthetic_zero_noise_monotone_encoding():
    w = SyntheticWorldParams(feature_noise=0.0)
    for stage, parent_q, marker in ((F, None, "constraint c"), (S, 1.0, "add_constraint")):
        cands = synth_generate(w, stage, parent_q, 64, 11, parent_id="p/F0" if stage is S else None)
        pairs = sorted((c.latent_quality, c.body.count(marker)) for c in cands)
        counts = [k for _, k in pairs]
        assert counts == sorted(counts)
        assert all(k == round(q * w.signal_lines) for q, k in pairs)


def test_synthetic_parent_quality_contract():
    w = SyntheticWorldParams()
    with pytest.raises(ValueError):
        synth_generate(w, S, None, 1, 0)
    with pytest.raises(ValueError):
        synth_generate(w, F, 0.5, 1, 0)


def _chat_ok(path, payload):
    text = payload["messages"][0]["content"]
    return 200, {"choices": [{"message": {"role": "assistant", "content": f"echo {payload['seed']} {text}"}}]}


def test_http_success_and_exchanges():
    with serve(_chat_ok) as (url, calls):
        b = GeneratorBinding(kind="http", endpoint=url, model="m")
        ex = []
        out = generate(b, "hello", SamplingParams(n=3, seed=1), stage=F, problem_id="p", parallelism=3, exchanges=ex)
    assert len(out) == 3 and all(c.body.endswith("hello") for c in out)
    assert len(calls) == 3 and all(p == "/v1/chat/completions" for p, _ in calls)
    assert [e["request"]["seed"] for e in ex] == [int(c.body.split()[1]) for c in out]
    assert calls[0][1]["model"] == "m" and calls[0][1]["max_tokens"] == 1280


def test_http_503_thrice(fast_backoff):
    with serve(lambda p, d: (503, {"error": "busy"})) as (url, calls):
        b = GeneratorBinding(kind="http", endpoint=url, model="m")
        with pytest.raises(BackendUnavailable):
            generate(b, "x", SamplingParams(n=1), stage=F, problem_id="p")
    assert len(calls) == 3


def test_http_recovers_after_transient(fast_backoff):
    state = {"n": 0}

    def handler(path, payload):
        state["n"] += 1
        return (503, {}) if state["n"] < 3 else _chat_ok(path, payload)

    with serve(handler) as (url, _):
        b = GeneratorBinding(kind="http", endpoint=url, model="m")
        assert len(generate(b, "x", SamplingParams(n=1), stage=F, problem_id="p")) == 1


def test_http_missing_choices():
    with serve(lambda p, d: (200, {"id": "x"})) as (url, _):
        b = GeneratorBinding(kind="http", endpoint=url, model="m")
        with pytest.raises(MalformedResponse):
            generate(b, "x", SamplingParams(n=1), stage=F, problem_id="p")


def test_http_unreachable(fast_backoff):
    b = GeneratorBinding(kind="http", endpoint="http://127.0.0.1:9", model="m", timeout=0.5)
    with pytest.raises(BackendUnavailable):
        generate(b, "x", SamplingParams(n=1), stage=F, problem_id="p")


@pytest.mark.parametrize("n", [1, 2, 5])
def test_generate_length(n, tmp_path):
    script = tmp_path / "m.jsonl"
    script.write_text('"only"\n')
    for b in (GeneratorBinding(kind="mock", script_path=str(script)),
              GeneratorBinding(kind="synthetic", world=SyntheticWorldParams())):
        assert len(generate(b, "p", SamplingParams(n=n), stage=F, problem_id="p")) == n


def test_bigram_signal_lines_distinct():
    w = SyntheticWorldParams()
    bodies = {c.body for c in synth_generate(w, F, None, 32, 0)}
    assert len(bodies) == 32
