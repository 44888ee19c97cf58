"""Command-line entry point: ``tensql <command> ...``.

Commands
--------
``fixture``  write a built-in model (manifest, graph, weights) to a directory
``import``   fold, fuse, chunk and export a model's weights into a model directory
``compile``  generate (and optimize) the SQL decoding script of a model directory
``run``      greedy decoding of a prompt with a compiled script
``verify``   operator suite plus end-to-end checks against the reference oracle
``bench``    prefill/decode timings over prompt lengths and optimization subsets

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 engine error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Sequence, TextIO

import numpy as np

from .errors import EngineError, IntegrityError, TensqlError
from .graph_ir import Graph, load_graph
from .models import FIXTURES, ModelManifest, build_graph_for, decode, encode, fixture, init_weights, prompt_tokens
from .optimizer import Row2ColConfig, compile_program
from .preprocess import PreparedModel, export_weights, prepare, relation_for, scalar_graph
from .sqlgen import DIALECTS, parse_script

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_ENGINE = 0, 1, 2, 3
OPTIMIZATIONS = ("cte", "fusion", "row2col")

MANIFEST_FILE = "manifest.json"
GRAPH_FILE = "graph.json"
WEIGHTS_FILE = "weights.npz"
PREPARED_GRAPH = "prepared_graph.json"
PREPARED_FUSED = "prepared_fused.json"
PREPARED_WEIGHTS = "prepared_weights.npz"


class UsageError(TensqlError):
    """Inconsistent or invalid command-line configuration."""


def parse_opts(text: str | None) -> frozenset[str]:
    """``"cte,fusion"`` -> {"cte", "fusion"}; ``None`` means all; ``""`` means none."""
    if text is None:
        return frozenset(OPTIMIZATIONS)
    opts = frozenset(p.strip() for p in text.split(",") if p.strip() and p.strip() != "none")
    unknown = sorted(opts - set(OPTIMIZATIONS))
    if unknown:
        raise UsageError(f"unknown optimization(s) {unknown}; choose from {list(OPTIMIZATIONS)}")
    return opts


def all_subsets() -> list[frozenset[str]]:
    return [frozenset(c) for r in range(len(OPTIMIZATIONS) + 1) for c in combinations(OPTIMIZATIONS, r)]


@dataclass(frozen=True)
class RunConfig:
    """Settings shared by the compile, run, verify and bench commands."""

    model_dir: str | None = None
    database: str = ":memory:"
    dialect: str = "array"
    opts: frozenset[str] = frozenset(OPTIMIZATIONS)
    row2col: Row2ColConfig = field(default_factory=Row2ColConfig)
    memory_limit: str | None = None
    max_tokens: int = 20
    prompt: str | None = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.dialect not in DIALECTS:
            raise UsageError(f"unknown dialect {self.dialect!r}")
        if "row2col" in self.opts and self.dialect != "array":
            raise UsageError("row2col requires the array dialect")
        if self.max_tokens < 1:
            raise UsageError("max tokens must be at least 1")
        if self.threads < 1:
            raise UsageError("threads must be at least 1")


# ---------------------------------------------------------------------------
# model directories


def _save_weights(path: str, weights: dict[str, np.ndarray]) -> None:
    np.savez(path, **{k: np.asarray(v, dtype=np.float32) for k, v in sorted(weights.items())})


def _load_weights(path: str) -> dict[str, np.ndarray]:
    if not os.path.isfile(path):
        raise UsageError(f"weights file {path!r} not found")
    with np.load(path) as data:
        return {k: data[k] for k in data.files}


def _read_manifest(path: str) -> ModelManifest:
    try:
        with open(path, encoding="utf-8") as fh:
            return ModelManifest.from_json(json.load(fh))
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot read manifest {path!r}: {exc}") from exc


def write_fixture(name: str, out: str, seed: int | None = None) -> str:
    if name not in FIXTURES:
        raise UsageError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}")
    m, g, w = fixture(name, seed)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        fh.write(m.dumps())
    with open(os.path.join(out, GRAPH_FILE), "w", encoding="utf-8") as fh:
        fh.write(g.dumps())
    _save_weights(os.path.join(out, WEIGHTS_FILE), w)
    return out


def import_model(manifest: str, weights: str, out: str, dialects: Sequence[str] = ("array", "scalar")) -> PreparedModel:
    """Preprocess a model and export its weight relations for each dialect.

    ``manifest`` is a model manifest JSON file; ``weights`` a directory with
    ``weights.npz`` (or the ``.npz`` file itself).  A missing weights file
    means "initialize from the manifest seed".
    """
    m = _read_manifest(manifest)
    g = build_graph_for(m)
    wpath = os.path.join(weights, WEIGHTS_FILE) if os.path.isdir(weights) else weights
    w = _load_weights(wpath) if os.path.exists(wpath) else init_weights(m)
    missing = sorted(t for t, d in g.tensors.items() if d.kind == "weight" and t not in w)
    if missing:
        raise UsageError(f"weights missing for {missing[:5]}")
    pm = prepare(g, w)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        fh.write(m.dumps())
    _save_weights(os.path.join(out, WEIGHTS_FILE), w)
    _save_weights(os.path.join(out, PREPARED_WEIGHTS), pm.weights)
    for fname, graph in ((GRAPH_FILE, g), (PREPARED_GRAPH, pm.graph), (PREPARED_FUSED, pm.fused)):
        with open(os.path.join(out, fname), "w", encoding="utf-8") as fh:
            fh.write(graph.dumps())
    for d in dialects:
        export_weights(model_relations(pm, d), d, os.path.join(out, d))
    return pm


def model_relations(pm: PreparedModel, dialect: str) -> list:
    """Every static relation either prepared graph needs, in ``dialect`` layout."""
    rels: dict[str, Any] = {}
    for g in (pm.graph, pm.fused):
        if dialect == "scalar":
            g = scalar_graph(g)
        for name in sorted(g.tensors):
            if g.tensors[name].is_static and name not in rels:
                rels[name] = relation_for(g, name, pm.weights[name])
    return [rels[k] for k in sorted(rels)]


@dataclass
class ModelDir:
    path: str
    manifest: ModelManifest
    graph: Graph
    fused: Graph
    weights: dict[str, np.ndarray]

    @classmethod
    def open(cls, path: str) -> ModelDir:
        for f in (MANIFEST_FILE, PREPARED_GRAPH, PREPARED_FUSED, WEIGHTS_FILE):
            if not os.path.isfile(os.path.join(path, f)):
                raise UsageError(f"{path!r} is not an imported model directory (missing {f}); run `tensql import`")
        return cls(
            path,
            _read_manifest(os.path.join(path, MANIFEST_FILE)),
            load_graph(os.path.join(path, PREPARED_GRAPH)),
            load_graph(os.path.join(path, PREPARED_FUSED)),
            _load_weights(os.path.join(path, WEIGHTS_FILE)),
        )

    def graph_for(self, fusion: bool, dialect: str) -> Graph:
        g = self.fused if fusion else self.graph
        return scalar_graph(g) if dialect == "scalar" else g

    def data_dir(self, dialect: str) -> str:
        d = os.path.join(self.path, dialect)
        if not os.path.isfile(os.path.join(d, "weights.json")):
            raise UsageError(f"no {dialect} export in {self.path!r}; re-run `tensql import --dialect {dialect}`")
        return d

    def oracle_graph(self) -> Graph:
        return build_graph_for(self.manifest)


def compile_model(md: ModelDir, cfg: RunConfig, literal_cte: bool = False):
    from .runtime import engine_dialect

    g = md.graph_for("fusion" in cfg.opts, cfg.dialect)
    return compile_program(
        g, engine_dialect(cfg.dialect), cte="cte" in cfg.opts, row2col="row2col" in cfg.opts,
        row2col_config=cfg.row2col, literal_cte=literal_cte,
        extra_flags={"fusion": "fusion" in cfg.opts},
    )


def _session_for_script(md: ModelDir, script: str, cfg: RunConfig):
    from .runtime import DecodeSession

    header = parse_script(script).header
    flags = dict(kv.split("=", 1) for kv in header.get("flags", "").split(",") if "=" in kv)
    dialect = header.get("dialect", "array")
    g = md.graph_for(flags.get("fusion") == "True", dialect)
    digest = header.get("graph", "").split()[-1:]
    if digest and digest[0] != g.digest:
        raise UsageError("script was compiled for a different graph than this model directory holds")
    s = DecodeSession(g, script, database=cfg.database, threads=cfg.threads, memory_limit=cfg.memory_limit)
    tables = {r[0] for r in s.con.execute("SELECT table_name FROM information_schema.tables").fetchall()}
    wanted = [t for t in g.tensors if g.tensors[t].is_static]
    if not all(f"w_{t}" in tables for t in wanted):
        s.init_db(md.data_dir(dialect))
    return s


# ---------------------------------------------------------------------------
# commands


def _emit(text: str, out: str | None, stream: TextIO) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        stream.write(text)


def _config(args: argparse.Namespace, **extra: Any) -> RunConfig:
    r2c = Row2ColConfig.parse(args.row2col) if getattr(args, "row2col", None) else Row2ColConfig()
    width = getattr(args, "row2col_max_width", None)
    if width is not None:
        r2c = Row2ColConfig(r2c.projections_per_subquery, r2c.subquery_count, max_chunks=width)
    return RunConfig(
        model_dir=getattr(args, "model_dir", None),
        database=getattr(args, "db", ":memory:") or ":memory:",
        dialect=getattr(args, "dialect", "array"),
        opts=parse_opts(getattr(args, "opt", None)),
        row2col=r2c,
        memory_limit=getattr(args, "memory_limit", None),
        threads=getattr(args, "threads", 1),
        seed=getattr(args, "seed", 0) or 0,
        **extra,
    )


def cmd_fixture(args: argparse.Namespace, stdout: TextIO) -> int:
    out = write_fixture(args.name, args.out, args.seed)
    stdout.write(f"wrote {args.name} to {out}\n")
    return EXIT_OK


def cmd_import(args: argparse.Namespace, stdout: TextIO) -> int:
    dialects = ("array", "scalar") if args.dialect == "all" else (args.dialect,)
    pm = import_model(args.manifest, args.weights or os.path.dirname(os.path.abspath(args.manifest)), args.out, dialects)
    stdout.write(
        f"imported {pm.graph.name}: {len(pm.graph.nodes)} nodes, "
        f"{len(pm.fusion)} fused weight group(s), dialects {','.join(dialects)} -> {args.out}\n"
    )
    return EXIT_OK


def cmd_compile(args: argparse.Namespace, stdout: TextIO) -> int:
    cfg = _config(args)
    md = ModelDir.open(args.model_dir)
    prog, report = compile_model(md, cfg, literal_cte=args.literal_cte)
    _emit(prog.render(), args.output, stdout)
    if args.report:
        rows = []
        if report.critical is not None:
            rows += [
                {"node_id": c.node_id, "pass": "cte", "applied": True, "reason": c.reason}
                for c in report.critical.critical
            ]
        rows += [
            {"node_id": d.node_id, "pass": d.pass_name, "applied": d.applied, "reason": d.reason}
            for d in report.decisions
        ]
        for g in md.fused.tensors.values() if "fusion" in cfg.opts else ():
            if g.parts:
                rows.append({"node_id": g.name, "pass": "fusion", "applied": True,
                             "reason": "fused " + ",".join(p[0] for p in g.parts)})
        with open(args.report, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    return EXIT_OK


def _prompt(args: argparse.Namespace) -> list[int]:
    if args.prompt_file:
        with open(args.prompt_file, "rb") as fh:
            return encode(fh.read())
    if args.prompt is not None:
        return encode(args.prompt)
    if args.prompt_len:
        return prompt_tokens(args.prompt_len)
    raise UsageError("give --prompt, --prompt-file or --prompt-len")


def cmd_run(args: argparse.Namespace, stdout: TextIO) -> int:
    cfg = _config(args, max_tokens=args.steps)
    md = ModelDir.open(args.model_dir)
    with open(args.script, encoding="utf-8") as fh:
        script = fh.read()
    prompt = _prompt(args)
    with _session_for_script(md, script, cfg) as s:
        s.ingest_prompt(prompt)
        t0 = time.perf_counter()
        tokens = [s.run_prefill()]
        t1 = time.perf_counter()
        decode_ms = []
        for _ in range(cfg.max_tokens - 1):
            t = time.perf_counter()
            tokens.append(s.run_decode_step())
            decode_ms.append((time.perf_counter() - t) * 1e3)
    result = {
        "prompt_len": len(prompt),
        "tokens": tokens,
        "text": decode(tokens).decode("latin-1"),
        "prefill_ms": round((t1 - t0) * 1e3, 3),
        "decode_ms": [round(x, 3) for x in decode_ms],
        "decode_ms_mean": round(float(np.mean(decode_ms)), 3) if decode_ms else 0.0,
    }
    _emit(json.dumps(result) + "\n", args.out, stdout)
    return EXIT_OK


def _verify_model(name: str, g_ref: Graph, weights: dict, pm_graphs: dict, dialect: str,
                  prompt_lens: Sequence[int], steps: int, stdout: TextIO) -> bool:
    from .oracle import ref_greedy_decode
    from .runtime import DecodeSession

    ok = True
    opts = ("cte", "fusion", "row2col") if dialect == "array" else ("cte", "fusion")
    g = pm_graphs["fusion"]
    g = scalar_graph(g) if dialect == "scalar" else g
    prog, _ = compile_program(g, dialect, cte=True, row2col="row2col" in opts)
    with DecodeSession(g, prog) as s:
        s.load_weights(g, pm_graphs["weights"])
        for n in prompt_lens:
            prompt = prompt_tokens(n)
            ref = ref_greedy_decode(g_ref, weights, prompt, steps - 1)
            got = s.generate(prompt, steps - 1)
            same = got == ref
            ok &= same
            stdout.write(f"{'PASS' if same else 'FAIL'} decode {name} {dialect} prompt={n} tokens={len(got)}\n")
    return ok


def cmd_verify(args: argparse.Namespace, stdout: TextIO) -> int:
    from .verify import run_operator_suite

    dialects = ("array", "scalar") if args.dialect == "all" else (args.dialect,)
    ok = True
    for d in dialects:
        for r in run_operator_suite(args.count, args.seed, d, args.tol):
            ok &= r.passed
            status = "PASS" if r.passed else "FAIL"
            stdout.write(f"{status} operators {r.category} {d} n={r.instances} max_abs_err={r.max_error:.3e}\n")
            for f in r.failures[:5]:
                stdout.write(f"    {f}\n")
    if args.model_dir:
        md = ModelDir.open(args.model_dir)
        models = [(md.manifest.name, md.oracle_graph(), md.weights,
                   {"fusion": md.fused, "weights": _load_weights(os.path.join(md.path, PREPARED_WEIGHTS))})]
    else:
        models = []
        for name in sorted(FIXTURES):
            _, g, w = fixture(name)
            pm = prepare(g, w)
            models.append((name, g, w, {"fusion": pm.fused, "weights": pm.weights}))
    lens = [int(x) for x in args.prompt_lens.split(",") if x.strip()]
    for name, g, w, graphs in models:
        for d in dialects:
            ok &= _verify_model(name, g, w, graphs, d, lens, args.steps, stdout)
    stdout.write("verify: " + ("all checks passed\n" if ok else "FAILED\n"))
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_bench(args: argparse.Namespace, stdout: TextIO) -> int:
    from .bench import BENCH_COLUMNS, bench_decode, row2col_workload

    delim = args.delimiter
    lines = [delim.join(BENCH_COLUMNS)]
    r2c = Row2ColConfig.parse(args.row2col) if args.row2col else Row2ColConfig()
    if args.row2col_workload:
        res = row2col_workload(args.rows, args.dim, args.chunk_size, r2c, args.repeat,
                               threads=args.threads, memory_limit=args.memory_limit)
        lines += [delim.join(r.cells()) for r in res.bench_rows()]
        lines.append(f"# speedup {res.speedup:.3f} (config {res.config}, max_abs_diff {res.max_abs_diff:.3e})")
    else:
        if not args.model_dir:
            raise UsageError("bench needs a model directory (or --row2col-workload)")
        md = ModelDir.open(args.model_dir)
        pm = PreparedModel(md.graph, md.fused, {}, [])
        data = md.data_dir("array")
        if args.opt_sets:
            opt_sets = [parse_opts(s) for s in args.opt_sets.split(";")]
        else:
            opt_sets = all_subsets()
        lens = [int(x) for x in args.prompt_lens.split(",") if x.strip()]
        rows = bench_decode(
            pm, lambda s, g: s.init_db(data), opt_sets, lens, args.steps, r2c,
            threads=args.threads, memory_limit=args.memory_limit,
        )
        lines += [delim.join(r.cells()) for r in rows]
    _emit("\n".join(lines) + "\n", args.out, stdout)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_engine(p: argparse.ArgumentParser) -> None:
    p.add_argument("--db", default=":memory:", help="database file (default: in-memory)")
    p.add_argument("--memory-limit", default=None, help="engine memory budget, e.g. 4GB")
    p.add_argument("--threads", type=int, default=1, help="engine worker threads (default 1)")


def _add_opt(p: argparse.ArgumentParser) -> None:
    p.add_argument("--opt", default=None, help="comma-separated subset of cte,fusion,row2col (default all; '' for none)")
    p.add_argument("--row2col", default=None, metavar="PxS", help="ROW2COL split, e.g. 16x4 (default)")
    p.add_argument("--row2col-max-width", type=int, default=None, metavar="N",
                   help="skip ROW2COL for reductions over more than N chunks (default 256)")
    p.add_argument("--dialect", choices=sorted(DIALECTS), default="array")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tensql", description="Compile neural-network inference to SQL and run it.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", help="write a built-in model to a directory")
    p.add_argument("name", choices=sorted(FIXTURES))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the weight seed")
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("import", help="preprocess and export a model")
    p.add_argument("manifest", help="model manifest JSON")
    p.add_argument("--weights", default=None, help="weights .npz or directory holding weights.npz")
    p.add_argument("--out", required=True, help="model directory to create")
    p.add_argument("--dialect", choices=["all", *sorted(DIALECTS)], default="all")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("compile", help="generate the SQL decoding script")
    p.add_argument("model_dir")
    _add_opt(p)
    p.add_argument("--literal-cte", action="store_true", help="also materialize direct inputs of critical nodes")
    p.add_argument("--report", default=None, help="write pass decisions (JSON lines) to this file")
    p.add_argument("-o", "--output", default=None, help="script file (default: stdout)")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("run", help="greedy decoding with a compiled script")
    p.add_argument("model_dir")
    p.add_argument("script")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--prompt", default=None)
    g.add_argument("--prompt-file", default=None)
    g.add_argument("--prompt-len", type=int, default=None, help="use the built-in prompt of this length")
    p.add_argument("--steps", type=int, default=20, help="tokens to generate (default 20)")
    p.add_argument("--out", default=None)
    _add_engine(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="operator suite and end-to-end oracle checks")
    p.add_argument("--model-dir", default=None, help="check this model instead of the built-in fixtures")
    p.add_argument("--count", type=int, default=100, help="instances per operator category")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--dialect", choices=["all", *sorted(DIALECTS)], default="array")
    p.add_argument("--prompt-lens", default="4,8,16,32")
    p.add_argument("--steps", type=int, default=20, help="tokens generated per prompt")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="timing sweeps")
    p.add_argument("model_dir", nargs="?", default=None)
    p.add_argument("--prompt-lens", default="25,50,100,200")
    p.add_argument("--steps", type=int, default=4, help="decode steps per prompt")
    p.add_argument("--opt-sets", default=None,
                   help="';'-separated optimization subsets, e.g. 'none;cte;cte,fusion' (default: all 8)")
    p.add_argument("--row2col", default=None, metavar="PxS")
    p.add_argument("--row2col-workload", action="store_true", help="time one large matmul with and without ROW2COL")
    p.add_argument("--rows", type=int, default=25)
    p.add_argument("--dim", type=int, default=4096)
    p.add_argument("--chunk-size", type=int, default=64)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--out", default=None)
    p.add_argument("--memory-limit", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv: Sequence[str] | None = None, stdout: TextIO | None = None, stderr: TextIO | None = None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args, stdout)
    except (EngineError, IntegrityError) as exc:
        stderr.write(f"tensql: engine error: {exc}\n")
        return EXIT_ENGINE
    except TensqlError as exc:
        stderr.write(f"tensql: {exc}\n")
        return EXIT_USAGE
    except OSError as exc:
        stderr.write(f"tensql: {exc}\n")
        return EXIT_USAGE


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_entry()
