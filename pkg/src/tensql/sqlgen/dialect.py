"""SQL dialects: list-valued chunks (array) or one value per row (scalar).

Templates never spell vector operations directly; they call the helpers here
so the same template yields array-dialect SQL (``vec`` lists combined with
list functions) or scalar-dialect SQL (chunk size 1, plain arithmetic).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

ElementFn = Callable[[str], str]


def float_lit(x: float) -> str:
    """Exact DOUBLE literal (string parsing is correctly rounded)."""
    return f"CAST('{float(x)!r}' AS DOUBLE)"


@dataclass(frozen=True)
class Dialect:
    id: str
    dot_fn: str | None
    has_positional_join: bool
    has_pivot_syntax: bool

    @property
    def is_array(self) -> bool:
        return self.id == "array"

    @property
    def chunk_col(self) -> str:
        return "chunk_id" if self.is_array else "col_id"

    @property
    def vec_col(self) -> str:
        return "vec" if self.is_array else "value"

    @property
    def stored_type(self) -> str:
        return "FLOAT[]" if self.is_array else "FLOAT"

    @property
    def value_type(self) -> str:
        return "DOUBLE[]" if self.is_array else "DOUBLE"

    # --- vector expressions ---------------------------------------------
    def double(self, v: str) -> str:
        return f"CAST({v} AS {self.value_type})"

    def dot(self, a: str, b: str) -> str:
        if self.is_array:
            return f"{self.dot_fn}({a}, {b})"
        return f"({a} * {b})"

    def vmap(self, v: str, fn: ElementFn) -> str:
        if self.is_array:
            return f"list_transform({v}, lambda x: {fn('x')})"
        return fn(v)

    def vzip(self, a: str, b: str, op: str) -> str:
        if self.is_array:
            return f"list_transform({a}, lambda x, i: x {op} {b}[i])"
        return f"({a} {op} {b})"

    def vscalar(self, v: str, s: str, op: str) -> str:
        if self.is_array:
            return f"list_transform({v}, lambda x: x {op} {s})"
        return f"({v} {op} {s})"

    def vsum(self, v: str) -> str:
        return f"list_sum({v})" if self.is_array else v

    def vmax(self, v: str) -> str:
        return f"list_max({v})" if self.is_array else v

    def first(self, v: str) -> str:
        return f"{v}[1]" if self.is_array else v

    def pack(self, x: str) -> str:
        return f"[{x}]" if self.is_array else x

    def zeros(self, cs: int) -> str:
        if self.is_array:
            return f"list_resize(CAST([] AS DOUBLE[]), {cs}, CAST(0 AS DOUBLE))"
        return "CAST(0 AS DOUBLE)"


ARRAY = Dialect("array", "list_dot_product", has_positional_join=True, has_pivot_syntax=True)
SCALAR = Dialect("scalar", None, has_positional_join=True, has_pivot_syntax=True)

DIALECTS = {"array": ARRAY, "scalar": SCALAR}


def get_dialect(name: str | Dialect) -> Dialect:
    if isinstance(name, Dialect):
        return name
    try:
        return DIALECTS[name]
    except KeyError:
        raise ValueError(f"unknown dialect {name!r} (expected array or scalar)") from None


# element functions: name -> SQL over one element expression
ELEMENT_SQL: dict[str, Callable[..., str]] = {
    "sigmoid": lambda x: f"1.0 / (1.0 + exp(-{x}))",
    "silu": lambda x: f"{x} / (1.0 + exp(-{x}))",
    "exp": lambda x: f"exp({x})",
    "relu": lambda x: f"greatest({x}, 0.0)",
    "square": lambda x: f"{x} * {x}",
    "neg": lambda x: f"-{x}",
}
