from __future__ import annotations

from typing import Any

import numpy as np
import pytest

from tensql.graph_ir import parse_graph
from tensql.models import fixture
from tensql.preprocess import prepare
from tensql.runtime import run_graph
from tensql.sqlgen import compile_plain


def tensor(name: str, shape, kind: str = "input", cs: int = 1, dims=None) -> dict[str, Any]:
    t: dict[str, Any] = {"name": name, "shape": list(shape), "kind": kind, "chunk_size": cs}
    if dims is not None:
        t["dims"] = list(dims)
    return t


def node(nid: str, op: str, inputs, attr=None) -> dict[str, Any]:
    n: dict[str, Any] = {"id": nid, "op": op, "inputs": list(inputs), "output": nid}
    if attr:
        n["attr"] = attr
    return n


def graph_doc(tensors, nodes, outputs, name: str = "t") -> dict[str, Any]:
    return {"name": name, "tensors": list(tensors), "nodes": list(nodes), "outputs": list(outputs)}


def run_sql(doc, weights=None, inputs=None, dialect: str = "array", tokens=None) -> dict[str, np.ndarray]:
    """Compile ``doc`` without optimizations, run it, return dense outputs (absent rows are 0)."""
    g = parse_graph(doc)
    prog = compile_plain(g, dialect)
    got = run_graph(g, prog, weights or {}, inputs or {}, tokens=tokens)
    return {k: np.where(m, v, 0.0) for k, (v, m) in got.items()}


@pytest.fixture(scope="session")
def dense():
    m, g, w = fixture("tiny_dense")
    return m, g, w, prepare(g, w)


@pytest.fixture(scope="session")
def moe():
    m, g, w = fixture("tiny_moe")
    return m, g, w, prepare(g, w)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records and prints one PASS/FAIL line."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
