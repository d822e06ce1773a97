from .dsl import Call, DslSyntaxError, ModSlot, Num, Program, Stmt, Str, Var, format_program, parse
from .library import ExecutionError, Executor, TypeMismatch, UndefinedVariable, UnknownFunction, execute
from .loop import (
    FeedbackBlock,
    ModelPolicy,
    OraclePolicy,
    Transcript,
    VolumeInput,
    agent_loop,
    embed_feedback,
    parse_transcript,
    save_transcript,
    step_token_ids,
)
from .values import Encodings, Env, FeedbackItem, Mask, Number, StepOutcome, Text, Volume, VolumeList, format_number

__all__ = [
    "Call",
    "DslSyntaxError",
    "Encodings",
    "Env",
    "ExecutionError",
    "Executor",
    "FeedbackBlock",
    "FeedbackItem",
    "Mask",
    "ModSlot",
    "ModelPolicy",
    "Num",
    "Number",
    "OraclePolicy",
    "Program",
    "StepOutcome",
    "Stmt",
    "Str",
    "Text",
    "Transcript",
    "TypeMismatch",
    "UndefinedVariable",
    "UnknownFunction",
    "Var",
    "Volume",
    "VolumeInput",
    "VolumeList",
    "agent_loop",
    "embed_feedback",
    "execute",
    "format_number",
    "format_program",
    "parse",
    "parse_transcript",
    "save_transcript",
    "step_token_ids",
]
