"""The two agents: an inner dialogue guide and the answering model.

The guide (``ida_generate``) reads the query plus the previous answer and
produces the next instruction. The answering agent (``llma_respond``)
answers a prompt under a declared output schema. Both emit JSON; parsing is
non-throwing and names the first violated field so a bounded repair loop can
re-prompt the model with exactly what went wrong.
"""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

import yaml

from .backends import Backend, BackendRequest, ChatMessage, Role
from .core import LlmaOutput, Prompt, PromptOrigin, Query, UsageStats


class AgentError(Exception):
    pass


class ParseFailure(AgentError):
    """Guide-agent output stayed unparseable after all repair attempts."""


class SchemaViolation(AgentError):
    """Answering-agent output stayed schema-invalid after all repair attempts."""


class UnboundPlaceholder(AgentError):
    """A template placeholder had no binding."""

    def __init__(self, name: str) -> None:
        super().__init__(f"no binding for placeholder {name!r}")
        self.name = name


class TemplateError(AgentError):
    """Template file missing entries or required placeholders."""


_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


@dataclass(frozen=True)
class PromptTemplate:
    system_text: str
    user_text_pattern: str

    def __post_init__(self) -> None:
        if not self.system_text or not self.user_text_pattern:
            raise ValueError("template texts must be non-empty")

    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER.findall(self.user_text_pattern))


def render_template(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    """Substitute every placeholder in the user pattern; extras are ignored."""

    def _sub(match: re.Match[str]) -> str:
        name = match.group(1)
        if name not in bindings:
            raise UnboundPlaceholder(name)
        return bindings[name]

    return _PLACEHOLDER.sub(_sub, template.user_text_pattern)


# Placeholders each named template must mention, checked at load time.
TEMPLATE_NAMES: dict[str, frozenset[str]] = {
    "ida_standard": frozenset({"query", "previous_response"}),
    "ida_final": frozenset({"query", "previous_response"}),
    "llma_initial": frozenset({"query"}),
    "llma_iteration": frozenset({"query", "mode_directive"}),
    "cot_single": frozenset({"query"}),
    "io_single": frozenset({"query"}),
}


@dataclass(frozen=True)
class TemplateLibrary:
    templates: dict[str, PromptTemplate]
    final_directive: str

    def __post_init__(self) -> None:
        missing = set(TEMPLATE_NAMES) - set(self.templates)
        if missing:
            raise TemplateError(f"missing templates: {sorted(missing)}")
        if not self.final_directive:
            raise TemplateError("final_directive must be non-empty")
        for name, required in TEMPLATE_NAMES.items():
            absent = required - self.templates[name].placeholders()
            if absent:
                raise TemplateError(f"template {name!r} must use placeholders {sorted(absent)}")

    def __getitem__(self, name: str) -> PromptTemplate:
        return self.templates[name]


def load_templates(path: str | Path | None = None) -> TemplateLibrary:
    """Load prompt templates from a YAML file; ``None`` loads the packaged defaults."""
    if path is None:
        text = resources.files("iterthought").joinpath("templates/default.yaml").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise TemplateError(f"template file is not valid YAML: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("templates"), dict):
        raise TemplateError("template file must map 'templates' to named entries")
    templates: dict[str, PromptTemplate] = {}
    for name, entry in data["templates"].items():
        if not isinstance(entry, dict) or "system" not in entry or "user" not in entry:
            raise TemplateError(f"template {name!r} must define 'system' and 'user'")
        templates[name] = PromptTemplate(system_text=entry["system"], user_text_pattern=entry["user"])
    return TemplateLibrary(templates=templates, final_directive=data.get("final_directive", ""))


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str  # "string" | "boolean"
    description: str


@dataclass(frozen=True)
class OutputSchema:
    """Declares the JSON fields an agent must emit."""

    fields: tuple[FieldSpec, ...]

    def __post_init__(self) -> None:
        names = [f.name for f in self.fields]
        if len(names) != len(set(names)):
            raise ValueError("schema field names must be unique")

    def field_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)

    def instructions(self) -> str:
        lines = ["Your entire reply must be one JSON object with exactly these fields:"]
        for f in self.fields:
            example = "true or false" if f.kind == "boolean" else "string"
            lines.append(f'  "{f.name}" ({example}): {f.description}')
        return "\n".join(lines)

    def hint(self) -> str:
        return json.dumps({f.name: f.kind for f in self.fields}, sort_keys=True)


def llma_schema(include_stop: bool) -> OutputSchema:
    fields = [
        FieldSpec("answer", "string", "your answer, stated directly"),
        FieldSpec("reasoning", "string", "the reasoning behind the answer"),
    ]
    if include_stop:
        fields.append(
            FieldSpec(
                "iteration_stop",
                "boolean",
                "true only if this answer is final and complete and no further refinement would help",
            )
        )
    return OutputSchema(tuple(fields))


IDA_SCHEMA = OutputSchema(
    (
        FieldSpec("next_prompt", "string", "the instruction to give the assistant next"),
        FieldSpec("guidance_rationale", "string", "why this instruction should help"),
    )
)


@dataclass(frozen=True)
class IdaOutput:
    next_prompt: str
    guidance_rationale: str = ""

    def __post_init__(self) -> None:
        if not self.next_prompt:
            raise ValueError("next_prompt must be non-empty")


@dataclass(frozen=True)
class ParseProblem:
    """Names the first violated field of an agent reply; the caller decides repair."""

    field: str
    message: str


def _extract_json(raw: str) -> Any:
    """Pull the first JSON object out of raw model text, tolerating fences and prose."""
    candidate = raw.strip()
    if candidate.startswith("```"):
        candidate = re.sub(r"^```[a-zA-Z]*\n?", "", candidate)
        candidate = re.sub(r"\n?```\s*$", "", candidate)
    try:
        return json.loads(candidate)
    except json.JSONDecodeError:
        pass
    start = candidate.find("{")
    while start != -1:
        depth = 0
        for pos in range(start, len(candidate)):
            ch = candidate[pos]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    try:
                        return json.loads(candidate[start : pos + 1])
                    except json.JSONDecodeError:
                        break
        start = candidate.find("{", start + 1)
    return None


def parse_fields(raw: str, schema: OutputSchema) -> dict[str, Any] | ParseProblem:
    """Check raw text against the schema; extra fields are ignored."""
    data = _extract_json(raw)
    if not isinstance(data, dict):
        first = schema.fields[0].name
        return ParseProblem(field=first, message="reply does not contain a JSON object")
    for f in schema.fields:
        if f.name not in data:
            return ParseProblem(field=f.name, message=f"missing field {f.name!r}")
        value = data[f.name]
        if f.kind == "string" and not isinstance(value, str):
            return ParseProblem(field=f.name, message=f"field {f.name!r} must be a string")
        if f.kind == "boolean" and not isinstance(value, bool):
            return ParseProblem(field=f.name, message=f"field {f.name!r} must be a boolean")
    return {f.name: data[f.name] for f in schema.fields}


def parse_structured(raw: str, schema: OutputSchema) -> LlmaOutput | ParseProblem:
    """Parse an answering-agent reply; on failure names the first violated field."""
    parsed = parse_fields(raw, schema)
    if isinstance(parsed, ParseProblem):
        return parsed
    if not parsed["answer"]:
        return ParseProblem(field="answer", message="field 'answer' must be non-empty")
    return LlmaOutput(
        answer=parsed["answer"],
        reasoning=parsed.get("reasoning", ""),
        iteration_stop=parsed.get("iteration_stop"),
    )


def serialize_output(output: LlmaOutput) -> str:
    """Inverse of ``parse_structured`` for valid outputs."""
    data: dict[str, Any] = {"answer": output.answer, "reasoning": output.reasoning}
    if output.iteration_stop is not None:
        data["iteration_stop"] = output.iteration_stop
    return json.dumps(data, ensure_ascii=False, sort_keys=True)


def _parse_ida(raw: str) -> IdaOutput | ParseProblem:
    parsed = parse_fields(raw, IDA_SCHEMA)
    if isinstance(parsed, ParseProblem):
        return parsed
    if not parsed["next_prompt"]:
        return ParseProblem(field="next_prompt", message="field 'next_prompt' must be non-empty")
    return IdaOutput(next_prompt=parsed["next_prompt"], guidance_rationale=parsed["guidance_rationale"])


@dataclass
class UsageMeter:
    """Mutable accumulator for the tokens a loop iteration spends."""

    prompt_tokens: int = 0
    completion_tokens: int = 0

    def add(self, usage: UsageStats) -> None:
        self.prompt_tokens += usage.prompt_tokens
        self.completion_tokens += usage.completion_tokens

    def snapshot(self) -> UsageStats:
        return UsageStats(self.prompt_tokens, self.completion_tokens)


@dataclass(frozen=True)
class AgentConfig:
    """Live backends plus templates for one guide/answerer pairing.

    Backends are shared instances (scripted state, replay cassettes, and
    rate limiters live on them); the harness materializes them from backend
    configs before runs start.
    """

    ida_backend: Backend
    llma_backend: Backend
    templates: TemplateLibrary
    repair_attempts: int = 2
    temperature: float = 0.0
    max_output_tokens: int = 1024

    def __post_init__(self) -> None:
        if not 0 <= self.repair_attempts <= 3:
            raise ValueError("repair_attempts must be between 0 and 3")


def format_previous_response(response: LlmaOutput) -> str:
    if response.reasoning:
        return f"Answer: {response.answer}\nReasoning: {response.reasoning}"
    return f"Answer: {response.answer}"


def _request(
    config: AgentConfig,
    backend: Backend,
    messages: tuple[ChatMessage, ...],
    schema: OutputSchema,
) -> BackendRequest:
    return BackendRequest(
        model_id=backend.model_id,
        messages=messages,
        temperature=config.temperature,
        schema_hint=schema.hint(),
        max_output_tokens=config.max_output_tokens,
    )


def _call_with_repair(
    config: AgentConfig,
    backend: Backend,
    system_text: str,
    user_text: str,
    schema: OutputSchema,
    parse: Callable[[str], Any],
    failure: type[AgentError],
    meter: UsageMeter | None,
):
    """Call the backend, re-prompting on validation failure up to repair_attempts times."""
    base = (
        ChatMessage(Role.SYSTEM, f"{system_text}\n\n{schema.instructions()}"),
        ChatMessage(Role.USER, user_text),
    )
    messages = base
    problem: ParseProblem | None = None
    for _ in range(1 + config.repair_attempts):
        response = backend.complete(_request(config, backend, messages, schema))
        if meter is not None:
            meter.add(response.usage)
        parsed = parse(response.text)
        if not isinstance(parsed, ParseProblem):
            return parsed
        problem = parsed
        repair_note = (
            f"Your previous output failed validation: {problem.field}. {problem.message}. "
            "Reply again with only the corrected JSON object."
        )
        messages = base + (
            ChatMessage(Role.ASSISTANT, response.text or "(empty reply)"),
            ChatMessage(Role.USER, repair_note),
        )
    assert problem is not None
    raise failure(f"output invalid after {config.repair_attempts} repair attempt(s): {problem.message}")


def ida_generate(
    config: AgentConfig,
    query: Query,
    prev_response: LlmaOutput,
    final_turn: bool = False,
    meter: UsageMeter | None = None,
) -> IdaOutput:
    """Ask the guide agent for the next instruction.

    On the final turn the instruction is guaranteed to contain the
    configured final-answer directive, appended if the model left it out,
    so the answering agent is always explicitly told to conclude.
    """
    template = config.templates["ida_final" if final_turn else "ida_standard"]
    directive = config.templates.final_directive
    bindings = {
        "query": query.text,
        "previous_response": format_previous_response(prev_response),
        "mode_directive": directive if final_turn else "",
    }
    user_text = render_template(template, bindings)
    out: IdaOutput = _call_with_repair(
        config, config.ida_backend, template.system_text, user_text,
        IDA_SCHEMA, _parse_ida, ParseFailure, meter,
    )
    if final_turn and directive not in out.next_prompt:
        out = dataclasses.replace(out, next_prompt=f"{out.next_prompt}\n\n{directive}")
    return out


_ORIGIN_TEMPLATE = {
    PromptOrigin.INITIAL: "llma_initial",
    PromptOrigin.IDA_GENERATED: "llma_iteration",
    PromptOrigin.IDA_FINAL: "llma_iteration",
}


def llma_respond(
    config: AgentConfig,
    query: Query,
    prompt: Prompt,
    schema: OutputSchema,
    template: PromptTemplate | None = None,
    meter: UsageMeter | None = None,
) -> LlmaOutput:
    """Send a finished prompt to the answering agent and parse under the schema.

    The prompt text is the complete user message; ``template`` only selects
    the system text (defaulting by prompt origin, so single-shot strategies
    pass the template they rendered from).
    """
    if template is None:
        template = config.templates[_ORIGIN_TEMPLATE[prompt.origin]]
    return _call_with_repair(
        config, config.llma_backend, template.system_text, prompt.text,
        schema, lambda raw: parse_structured(raw, schema), SchemaViolation, meter,
    )
