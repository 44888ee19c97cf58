"""Exception hierarchy shared by every stage of the compiler."""

from __future__ import annotations


class TensqlError(Exception):
    """Base class for all errors raised by tensql."""


class GraphParseError(TensqlError):
    """A graph document violates the IR schema or a graph invariant."""

    def __init__(self, message: str, node: str | None = None):
        self.node = node
        if node is not None:
            message = f"node {node!r}: {message}"
        super().__init__(message)


class GraphCycleError(GraphParseError):
    def __init__(self, cycle: list[str]):
        self.cycle = list(cycle)
        super().__init__("dependency cycle: " + " -> ".join(self.cycle))


class UnsupportedOperatorError(GraphParseError):
    def __init__(self, op: str, node: str | None = None):
        self.op = op
        super().__init__(f"unsupported operator {op!r}", node=node)


class ChunkingError(TensqlError):
    """A tensor width is not divisible by its chunk size."""

    def __init__(self, tensor: str, width: int, chunk_size: int):
        self.tensor = tensor
        self.width = width
        self.chunk_size = chunk_size
        super().__init__(
            f"tensor {tensor!r}: width {width} is not divisible by chunk size {chunk_size}"
        )


class ShapeError(TensqlError):
    """Operands of a reference operator have incompatible shapes."""


class CodegenError(TensqlError):
    """A node cannot be translated into SQL."""


class AssemblyError(TensqlError):
    """Generated units do not cover the graph."""


class RewriteError(TensqlError):
    """An optimizer rewrite was requested with an invalid configuration."""


class IntegrityError(TensqlError):
    """Loaded database content does not match the weight manifest."""


class EngineError(TensqlError):
    """The SQL engine failed to execute a generated statement."""

    def __init__(self, message: str, statement_id: str | None = None):
        self.statement_id = statement_id
        if statement_id is not None:
            message = f"statement {statement_id!r} failed: {message}"
        super().__init__(message)
