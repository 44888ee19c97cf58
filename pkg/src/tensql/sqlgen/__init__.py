"""SQL generation: dialects, per-category templates and script assembly."""

from __future__ import annotations

from .dialect import ARRAY, DIALECTS, SCALAR, Dialect, float_lit, get_dialect
from .script import MARKER, Program, ParsedScript, Statement, assemble_script, compile_plain, parse_script
from .templates import (
    OUTPUT_TABLE,
    PARAMS_TABLE,
    TOKEN_TABLE,
    Codegen,
    SqlUnit,
    gen_node,
    node_relation,
)

__all__ = [
    "ARRAY",
    "DIALECTS",
    "SCALAR",
    "Dialect",
    "float_lit",
    "get_dialect",
    "MARKER",
    "Program",
    "ParsedScript",
    "Statement",
    "assemble_script",
    "compile_plain",
    "parse_script",
    "OUTPUT_TABLE",
    "PARAMS_TABLE",
    "TOKEN_TABLE",
    "Codegen",
    "SqlUnit",
    "gen_node",
    "node_relation",
]
