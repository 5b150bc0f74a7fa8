import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import TEMPLATES, ida_json, llma_json, make_agents
from iterthought.agents import (
    ParseFailure,
    ParseProblem,
    PromptTemplate,
    SchemaViolation,
    TemplateError,
    TemplateLibrary,
    UnboundPlaceholder,
    ida_generate,
    llma_respond,
    llma_schema,
    load_templates,
    parse_structured,
    render_template,
    serialize_output,
)
from iterthought.core import LlmaOutput, Prompt, PromptOrigin, Query


QUERY = Query(id="Q1", text="Why is the sky blue?")
PREV = LlmaOutput(answer="A", reasoning="scattering")


class TestRenderTemplate:
    def test_simple_substitution(self):
        template = PromptTemplate(system_text="s", user_text_pattern="Q: {query}")
        assert render_template(template, {"query": "hi"}) == "Q: hi"

    def test_unbound_placeholder(self):
        template = PromptTemplate(system_text="s", user_text_pattern="{query} {previous_response}")
        with pytest.raises(UnboundPlaceholder) as err:
            render_template(template, {"query": "hi"})
        assert err.value.name == "previous_response"

    def test_extra_bindings_ignored(self):
        template = PromptTemplate(system_text="s", user_text_pattern="Q: {query}")
        text = render_template(template, {"query": "hi", "unused": "x"})
        assert text == "Q: hi"

    def test_no_markers_remain(self):
        template = TEMPLATES["llma_iteration"]
        text = render_template(
            template, {"query": "q", "previous_response": "p", "mode_directive": "d"}
        )
        assert "{" not in text or "}" not in text


class TestTemplateLibrary:
    def test_packaged_defaults_load(self):
        library = load_templates()
        for name in ("ida_standard", "ida_final", "llma_initial", "llma_iteration", "cot_single", "io_single"):
            assert library[name].system_text

    def test_missing_template_rejected(self):
        templates = dict(TEMPLATES.templates)
        templates.pop("io_single")
        with pytest.raises(TemplateError):
            TemplateLibrary(templates=templates, final_directive="x")

    def test_missing_placeholder_rejected(self):
        templates = dict(TEMPLATES.templates)
        templates["ida_standard"] = PromptTemplate(system_text="s", user_text_pattern="{query}")
        with pytest.raises(TemplateError):
            TemplateLibrary(templates=templates, final_directive="x")

    def test_override_file_loads(self, tmp_path):
        path = tmp_path / "custom.yaml"
        data = {
            "final_directive": "answer now",
            "templates": {
                name: {"system": t.system_text, "user": t.user_text_pattern}
                for name, t in TEMPLATES.templates.items()
            },
        }
        import yaml

        path.write_text(yaml.safe_dump(data), encoding="utf-8")
        library = load_templates(path)
        assert library.final_directive == "answer now"


class TestParseStructured:
    def test_well_typed_raw(self):
        schema = llma_schema(include_stop=True)
        out = parse_structured('{"answer":"A","reasoning":"...","iteration_stop":true}', schema)
        assert out == LlmaOutput(answer="A", reasoning="...", iteration_stop=True)

    def test_missing_answer_names_field(self):
        schema = llma_schema(include_stop=False)
        problem = parse_structured('{"reasoning":"..."}', schema)
        assert isinstance(problem, ParseProblem)
        assert problem.field == "answer"

    def test_wrong_type_stop_names_field(self):
        schema = llma_schema(include_stop=True)
        problem = parse_structured('{"answer":"A","reasoning":"r","iteration_stop":"yes"}', schema)
        assert isinstance(problem, ParseProblem)
        assert problem.field == "iteration_stop"

    def test_empty_answer_rejected(self):
        problem = parse_structured('{"answer":"","reasoning":"r"}', llma_schema(False))
        assert isinstance(problem, ParseProblem)
        assert problem.field == "answer"

    def test_stop_ignored_when_schema_omits_it(self):
        out = parse_structured(llma_json("A", stop=True), llma_schema(include_stop=False))
        assert out == LlmaOutput(answer="A", reasoning="because", iteration_stop=None)

    def test_prose_wrapped_json(self):
        raw = 'Sure! Here you go:\n```json\n{"answer":"B","reasoning":"r"}\n```\nDone.'
        out = parse_structured(raw, llma_schema(False))
        assert out.answer == "B"

    def test_json_embedded_mid_sentence(self):
        raw = 'I think {"answer":"C","reasoning":"r"} covers it.'
        out = parse_structured(raw, llma_schema(False))
        assert out.answer == "C"


@given(
    st.text(min_size=1, max_size=30),
    st.text(max_size=30),
    st.sampled_from([None, True, False]),
)
def test_parse_serialize_round_trip(answer, reasoning, stop):
    output = LlmaOutput(answer=answer, reasoning=reasoning, iteration_stop=stop)
    schema = llma_schema(include_stop=stop is not None)
    assert parse_structured(serialize_output(output), schema) == output


class TestLlmaRespond:
    def prompt(self):
        return Prompt(text="Question: why?", origin=PromptOrigin.INITIAL)

    def test_direct_parse(self):
        agents = make_agents([llma_json("A", stop=True)])
        out = llma_respond(agents, QUERY, self.prompt(), llma_schema(True))
        assert out.answer == "A"
        assert out.iteration_stop is True

    def test_repair_pass_recovers(self):
        agents = make_agents(["not json at all", llma_json("A")], repair_attempts=1)
        out = llma_respond(agents, QUERY, self.prompt(), llma_schema(False))
        assert out.answer == "A"
        assert agents.llma_backend.call_count == 2
        repair_request = agents.llma_backend.requests[1]
        assert "failed validation" in repair_request.messages[-1].content

    def test_no_repairs_allowed(self):
        agents = make_agents(["garbage"], repair_attempts=0)
        with pytest.raises(SchemaViolation):
            llma_respond(agents, QUERY, self.prompt(), llma_schema(False))

    def test_call_budget_is_one_plus_repairs(self):
        agents = make_agents(["bad", "bad", "bad", "bad"], repair_attempts=2)
        with pytest.raises(SchemaViolation):
            llma_respond(agents, QUERY, self.prompt(), llma_schema(False))
        assert agents.llma_backend.call_count == 3

    def test_schema_instructions_reach_the_model(self):
        agents = make_agents([llma_json("A", stop=True)])
        llma_respond(agents, QUERY, self.prompt(), llma_schema(True))
        system = agents.llma_backend.requests[0].messages[0].content
        assert "iteration_stop" in system and "answer" in system


class TestIdaGenerate:
    def test_scripted_passthrough(self):
        agents = make_agents([], ida_script=[ida_json("verify the syntax")])
        out = ida_generate(agents, QUERY, PREV)
        assert out.next_prompt == "verify the syntax"

    def test_request_embeds_query_and_previous_answer(self):
        agents = make_agents([], ida_script=[ida_json("next")])
        ida_generate(agents, QUERY, PREV)
        user = agents.ida_backend.requests[0].messages[1].content
        assert QUERY.text in user
        assert "A" in user

    def test_final_turn_request_contains_directive(self):
        agents = make_agents([], ida_script=[ida_json("wrap it up")])
        ida_generate(agents, QUERY, PREV, final_turn=True)
        user = agents.ida_backend.requests[0].messages[1].content
        assert TEMPLATES.final_directive in user

    def test_final_turn_output_contains_directive(self):
        agents = make_agents([], ida_script=[ida_json("say the answer")])
        out = ida_generate(agents, QUERY, PREV, final_turn=True)
        assert TEMPLATES.final_directive in out.next_prompt

    def test_directive_not_duplicated_when_model_includes_it(self):
        scripted = ida_json(f"conclude: {TEMPLATES.final_directive}")
        agents = make_agents([], ida_script=[scripted])
        out = ida_generate(agents, QUERY, PREV, final_turn=True)
        assert out.next_prompt.count(TEMPLATES.final_directive) == 1

    def test_unparseable_after_repairs(self):
        agents = make_agents([], ida_script=["nope", "still nope", "no"], repair_attempts=2)
        with pytest.raises(ParseFailure):
            ida_generate(agents, QUERY, PREV)


def test_composite_is_pure_under_scripted_backends():
    def run_once():
        agents = make_agents(
            [llma_json("refined", stop=True)], ida_script=[ida_json("dig deeper")]
        )
        guidance = ida_generate(agents, QUERY, PREV)
        out = llma_respond(
            agents,
            QUERY,
            Prompt(text=f"{QUERY.text}\n{guidance.next_prompt}", origin=PromptOrigin.IDA_GENERATED),
            llma_schema(True),
        )
        return guidance, out

    assert run_once() == run_once()


def test_repair_attempts_bounded():
    with pytest.raises(ValueError):
        make_agents([], repair_attempts=4)
