"""Inner-dialogue iterative prompting: a guide agent steers an answering
agent through refinement loops, with single-shot baselines, benchmark task
packs, answer metrics, and a record/replay harness."""

from .agents import (
    AgentConfig,
    IdaOutput,
    OutputSchema,
    ParseFailure,
    PromptTemplate,
    SchemaViolation,
    ida_generate,
    llma_respond,
    llma_schema,
    load_templates,
    parse_structured,
    render_template,
)
from .backends import (
    Backend,
    BackendConfig,
    BackendKind,
    BackendRequest,
    BackendResponse,
    ChatMessage,
    HttpChatBackend,
    RateLimiter,
    RecordBackend,
    ReplayBackend,
    Role,
    ScriptedBackend,
    make_backend,
    request_key,
)
from .core import (
    IterationRecord,
    LlmaOutput,
    Prompt,
    PromptOrigin,
    Query,
    RunTrace,
    StrategyKind,
    TaskKind,
    TerminatedBy,
    UsageStats,
    trace_append,
    trace_deserialize,
    trace_final_answer,
    trace_serialize,
)
from .loops import (
    RunError,
    StopDecision,
    StrategyConfig,
    evaluate_stop,
    run_aiot,
    run_cot,
    run_giot,
    run_io,
    run_strategy,
)
from .metrics import aggregate, exact_match, normalize_answer, rouge_l, token_f1
from .tasks import (
    CrosswordGrid,
    GameOf24,
    MiniCrossword,
    MultiHopQA,
    MultipleChoice,
    brute_force_24,
    extract_choice,
    parse_crossword,
    parse_expression,
    score_crossword,
    score_multiple_choice,
    verify_24,
)

__version__ = "0.1.0"
