"""CSV ingestion, JSON model files, traces and flat reports."""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
import warnings
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import (CycleError, Dataset, ModuleAssignment, ModuleNetwork, Standardization,
                    build_module_graph, find_cycle, validate)
from .tree import Leaf, LeafParams, RegressionTree, Split, TreeError

SCHEMA_VERSION = 1
FORMAT_NAME = "modnet-model"


class CsvFormatError(ValueError):
    """Malformed data file; ``line`` and ``column`` are 1-based when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class ModelFormatError(ValueError):
    """A model file does not match the expected schema."""


class ConstantColumnWarning(UserWarning):
    pass


def load_csv(path, standardize: bool = True) -> Dataset:
    """Read a header row of names followed by one numeric row per instance.

    With ``standardize`` each column is shifted and scaled to mean 0 and
    variance 1; constant columns are only shifted.  The transform is kept
    on the returned dataset.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(i, r) for i, r in enumerate(csv.reader(fh), start=1) if r]
    if not rows:
        raise CsvFormatError(f"{path} is empty")
    header_line, header = rows[0]
    names = [h.strip() for h in header]
    for c, name in enumerate(names, start=1):
        if not name:
            raise CsvFormatError("empty variable name in header", header_line, c)
    seen: dict[str, int] = {}
    for c, name in enumerate(names, start=1):
        if name in seen:
            raise CsvFormatError(f"duplicate variable name {name!r} (first in column {seen[name]})",
                                 header_line, c)
        seen[name] = c
    if len(rows) == 1:
        raise CsvFormatError(f"{path} has a header but no data rows")
    n = len(names)
    values = np.empty((len(rows) - 1, n))
    for r, (line, cells) in enumerate(rows[1:]):
        if len(cells) != n:
            raise CsvFormatError(f"expected {n} cells, found {len(cells)}", line)
        for c, cell in enumerate(cells):
            try:
                v = float(cell)
            except ValueError:
                raise CsvFormatError(f"not a number: {cell!r}", line, c + 1) from None
            if not math.isfinite(v):
                raise CsvFormatError(f"non-finite value {cell!r}", line, c + 1)
            values[r, c] = v
    if not standardize:
        return Dataset(values, tuple(names))
    mean = values.mean(axis=0)
    scale = values.std(axis=0)
    constant = ~(scale > 0)
    for c in np.flatnonzero(constant):
        warnings.warn(f"column {names[c]!r} is constant; centred but not scaled",
                      ConstantColumnWarning, stacklevel=2)
    scale[constant] = 1.0
    st = Standardization(tuple(mean), tuple(scale))
    return Dataset(st.transform(values), tuple(names), st)


def write_csv(path, data: Dataset, raw: bool = True) -> None:
    """Write a dataset; with ``raw`` any recorded standardization is undone."""
    values = data.values
    if raw and data.standardization is not None:
        values = data.standardization.inverse(values)
    lines = [",".join(data.var_names)]
    lines.extend(",".join(repr(float(v)) for v in row) for row in values)
    atomic_write(path, "\n".join(lines) + "\n")


def atomic_write(path, text: str) -> None:
    """Write ``text`` to a temporary file beside ``path`` and rename it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _tree_to_obj(tree: RegressionTree, i: int | None = None):
    i = tree.root if i is None else i
    node = tree.nodes[i]
    if isinstance(node, Leaf):
        p = node.params
        return {"leaf": None if p is None else {"mean": p.mean, "variance": p.variance}}
    return {"var": node.var, "threshold": node.threshold,
            "true": _tree_to_obj(tree, node.true_child),
            "false": _tree_to_obj(tree, node.false_child)}


def _tree_from_obj(obj, where: str) -> RegressionTree:
    nodes: list = []

    def build(o, path):
        if not isinstance(o, dict):
            raise ModelFormatError(f"{path}: tree node must be an object")
        idx = len(nodes)
        nodes.append(None)
        if "leaf" in o:
            p = o["leaf"]
            if p is None:
                nodes[idx] = Leaf()
            else:
                try:
                    nodes[idx] = Leaf(LeafParams(float(p["mean"]), float(p["variance"])))
                except (KeyError, TypeError, TreeError) as exc:
                    raise ModelFormatError(f"{path}: bad leaf parameters ({exc})") from None
            return idx
        try:
            var, thr = o["var"], o["threshold"]
        except KeyError as exc:
            raise ModelFormatError(f"{path}: split node lacks {exc}") from None
        if not isinstance(var, int) or isinstance(var, bool):
            raise ModelFormatError(f"{path}: split variable must be an integer")
        t = build(o.get("true"), path + ".true")
        f = build(o.get("false"), path + ".false")
        nodes[idx] = Split(var, float(thr), t, f)
        return idx

    build(obj, where)
    try:
        return RegressionTree(tuple(nodes), 0)
    except TreeError as exc:
        raise ModelFormatError(f"{where}: {exc}") from None


def model_to_json(net: ModuleNetwork) -> str:
    problems = validate(net)
    if problems:
        raise ModelFormatError("refusing to save an invalid network: " + "; ".join(problems))
    st = net.standardization
    doc = {
        "format": FORMAT_NAME,
        "schema_version": SCHEMA_VERSION,
        "K": net.K,
        "var_names": None if net.var_names is None else list(net.var_names),
        "assignment": list(net.assignment.assign),
        "modules": [{"parents": sorted(net.parents(j)), "tree": _tree_to_obj(t)}
                    for j, t in enumerate(net.trees)],
        "standardization": None if st is None else {"mean": list(st.mean),
                                                    "scale": list(st.scale)},
    }
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


def model_from_json(text: str) -> ModuleNetwork:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"not a {FORMAT_NAME} file")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ModelFormatError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
    for key in ("K", "assignment", "modules"):
        if key not in doc:
            raise ModelFormatError(f"missing field {key!r}")
    K, assign, modules = doc["K"], doc["assignment"], doc["modules"]
    if not isinstance(K, int) or K < 1:
        raise ModelFormatError(f"K must be a positive integer, got {K!r}")
    if not isinstance(assign, list) or not all(isinstance(a, int) for a in assign):
        raise ModelFormatError("assignment must be a list of integers")
    if not isinstance(modules, list) or len(modules) != K:
        raise ModelFormatError(f"expected {K} modules")
    trees, declared = [], []
    for j, m in enumerate(modules):
        if not isinstance(m, dict) or "tree" not in m or "parents" not in m:
            raise ModelFormatError(f"module {j} needs 'parents' and 'tree'")
        trees.append(_tree_from_obj(m["tree"], f"modules[{j}].tree"))
        declared.append(m["parents"])
    st = doc.get("standardization")
    if st is not None:
        try:
            st = Standardization(tuple(st["mean"]), tuple(st["scale"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"bad standardization block ({exc})") from None
    names = doc.get("var_names")
    net = ModuleNetwork(ModuleAssignment(tuple(assign), K), tuple(trees),
                        None if names is None else tuple(names), st)
    problems = [p for p in validate(net, declared_parents=declared)
                if not p.startswith("module graph is cyclic")]
    if problems:
        raise ModelFormatError("; ".join(problems))
    cycle = find_cycle(build_module_graph(net))
    if cycle is not None:
        raise CycleError(cycle)
    return net


def save_model(net: ModuleNetwork, path) -> None:
    atomic_write(path, model_to_json(net))


def load_model(path) -> ModuleNetwork:
    with open(path, encoding="utf-8") as fh:
        return model_from_json(fh.read())


def trace_to_csv(trace: Iterable) -> str:
    """One line per record; elapsed time is left out so reruns are byte-identical."""
    lines = ["iteration,kind,module,score"]
    for r in trace:
        lines.append(f"{r.iteration},{r.kind},{'' if r.module is None else r.module},{r.score!r}")
    return "\n".join(lines) + "\n"


def format_report(fields: Mapping[str, object],
                  tables: Mapping[str, tuple[Sequence[str], Sequence[Sequence]]] = ()) -> str:
    """``key=value`` lines, then one ``[name]`` CSV block per table."""
    def fmt(v):
        if v is None:
            return "NA"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = [f"{k}={fmt(v)}" for k, v in fields.items()]
    for name, (header, rows) in dict(tables).items():
        lines.append("")
        lines.append(f"[{name}]")
        lines.append(",".join(header))
        lines.extend(",".join(fmt(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"
