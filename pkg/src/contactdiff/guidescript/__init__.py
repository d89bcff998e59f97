"""A small language for guidance energies, its evaluator and the generation loop."""
from .syntax import (
    DslTypeError, GuideScriptError, LexError, ParseError, Program, SemanticError, Statement,
    check, parse, to_source, tokenize,
)
from .evaluator import (
    EvalContext, EvalError, calibrate, eval_grad, eval_statement, evaluate, program_terms,
    term_values,
)
from .prompt import DEFAULT_HINTS, PART_NAMES, PromptBundle, render_prompt
from .client import (
    ExhaustionError, FixtureClient, GenerationResult, HttpClient, TransportError,
    extract_program_text, generate_guidance, split_fixture, validate,
)
from .library import builtin_program

__all__ = [
    "DslTypeError", "GuideScriptError", "LexError", "ParseError", "Program", "SemanticError",
    "Statement", "check", "parse", "to_source", "tokenize", "EvalContext", "EvalError",
    "calibrate", "eval_grad", "eval_statement", "evaluate", "program_terms", "term_values",
    "DEFAULT_HINTS", "PART_NAMES", "PromptBundle", "render_prompt", "ExhaustionError",
    "FixtureClient", "GenerationResult", "HttpClient", "TransportError", "extract_program_text",
    "generate_guidance", "split_fixture", "validate", "builtin_program",
]
