"""Shared builders for scripted agents and JSON agent replies."""
from __future__ import annotations

import json
import threading

from iterthought.agents import AgentConfig, load_templates
from iterthought.backends import BackendRequest, ScriptedBackend

TEMPLATES = load_templates()


def llma_json(answer: str, reasoning: str = "because", stop: bool | None = None) -> str:
    data: dict = {"answer": answer, "reasoning": reasoning}
    if stop is not None:
        data["iteration_stop"] = stop
    return json.dumps(data)


def ida_json(next_prompt: str, rationale: str = "push further") -> str:
    return json.dumps({"next_prompt": next_prompt, "guidance_rationale": rationale})


def make_agents(
    llma_script,
    ida_script=(),
    repair_attempts: int = 2,
) -> AgentConfig:
    return AgentConfig(
        ida_backend=ScriptedBackend(ida_script, model_id="ida-scripted"),
        llma_backend=ScriptedBackend(llma_script, model_id="llma-scripted"),
        templates=TEMPLATES,
        repair_attempts=repair_attempts,
    )


def constant_llma(answer: str = "blue", stop: bool = True):
    """Order-independent script: same reply for every request."""
    reply = llma_json(answer, stop=stop)
    return lambda request: reply


def constant_ida(prompt: str = "take another look"):
    reply = ida_json(prompt)
    return lambda request: reply


class InterruptingScript:
    """Scripted reply function that raises KeyboardInterrupt on one scheduled call."""

    def __init__(self, fail_at_call: int, reply: str) -> None:
        self.fail_at_call = fail_at_call
        self.reply = reply
        self.calls = 0
        self.armed = True
        self._lock = threading.Lock()

    def __call__(self, request: BackendRequest) -> str:
        with self._lock:
            self.calls += 1
            if self.armed and self.calls == self.fail_at_call:
                self.armed = False
                raise KeyboardInterrupt("simulated kill")
        return self.reply
