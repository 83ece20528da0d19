"""Text file formats for graphs, scores and run outputs.

Graph directory layout::

    attributes.csv   community_id,a_1,...,a_p   (header row)
    affiliation.txt  community_id entity_id     (one membership per line)
    social.txt       entity_i entity_j link_type  (undirected, types 1..q)
    labels.csv       community_id,label          (optional)

All ids are 0-based and contiguous. Lines starting with ``#`` are comments,
except ``# entities=M`` in the affiliation file and ``# link_types=Q`` in the
social file, which fix ``m`` and ``q`` when trailing entities or link types
have no lines. Floats are written in shortest round-trip form, scores with
12 significant digits.
"""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ParseError, ValidationError
from .graph import EconomicGraph

__all__ = [
    "read_attributes",
    "read_affiliation",
    "read_social",
    "read_labels",
    "load_graph",
    "save_graph",
    "save_scores",
    "read_scores",
    "write_key_values",
    "read_key_values",
    "write_ground_truth",
    "write_csv_rows",
    "GRAPH_FILES",
]

GRAPH_FILES = {
    "attributes": "attributes.csv",
    "affiliation": "affiliation.txt",
    "social": "social.txt",
    "labels": "labels.csv",
}

_HEADER = re.compile(r"#\s*(entities|link_types)\s*=\s*(\d+)\s*$")


def _lines(path):
    try:
        with open(path, encoding="utf-8") as fh:
            for k, raw in enumerate(fh, start=1):
                line = raw.strip()
                if line:
                    yield k, line
    except FileNotFoundError:
        raise
    except UnicodeDecodeError as exc:
        raise ParseError("not valid UTF-8 text", path=str(path), line=None) from exc


def _int(tok, path, line, what):
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"{what} {tok!r} is not an integer", path=str(path), line=line) from None


def _float(tok, path, line):
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"{tok!r} is not a number", path=str(path), line=line) from None
    if not np.isfinite(v):
        raise ParseError(f"non-finite value {tok!r}", path=str(path), line=line)
    return v


def _check_ids(ids, n, path, what):
    seen = np.zeros(n, dtype=bool)
    for line, i in ids:
        if not 0 <= i < n:
            raise ParseError(f"{what} id {i} out of range [0, {n})", path=str(path), line=line)
        if seen[i]:
            raise ParseError(f"duplicate {what} id {i}", path=str(path), line=line)
        seen[i] = True
    if not seen.all():
        missing = int(np.flatnonzero(~seen)[0])
        raise ParseError(f"{what} id {missing} missing (ids must be contiguous)", path=str(path), line=None)


def read_attributes(path):
    """Attribute matrix from ``community_id,a_1,...,a_p``; row order follows the ids."""
    rows = list(_lines(path))
    rows = [(k, ln) for k, ln in rows if not ln.startswith("#")]
    if not rows:
        raise ParseError("missing header row", path=str(path), line=1)
    header_line, header = rows[0]
    cols = [c.strip() for c in header.split(",")]
    if len(cols) < 2 or cols[0] != "community_id":
        raise ParseError("header must be community_id,a_1,...,a_p",
                         path=str(path), line=header_line)
    p = len(cols) - 1
    ids, values = [], []
    for k, ln in rows[1:]:
        parts = [t.strip() for t in ln.split(",")]
        if len(parts) != p + 1:
            raise ParseError(f"expected {p + 1} fields, got {len(parts)}", path=str(path), line=k)
        ids.append((k, _int(parts[0], path, k, "community")))
        values.append([_float(t, path, k) for t in parts[1:]])
    n = len(ids)
    _check_ids(ids, n, path, "community")
    A = np.empty((n, p))
    for (_, i), row in zip(ids, values):
        A[i] = row
    return A


def read_affiliation(path, n):
    """Membership edge list; returns ``(H, m)``."""
    rows, cols = [], []
    m_decl = None
    for k, ln in _lines(path):
        if ln.startswith("#"):
            hit = _HEADER.match(ln)
            if hit and hit.group(1) == "entities":
                m_decl = int(hit.group(2))
            continue
        parts = ln.split()
        if len(parts) != 2:
            raise ParseError("expected 'community_id entity_id'", path=str(path), line=k)
        i = _int(parts[0], path, k, "community")
        j = _int(parts[1], path, k, "entity")
        if not 0 <= i < n:
            raise ParseError(f"community id {i} out of range [0, {n})", path=str(path), line=k)
        if j < 0 or (m_decl is not None and j >= m_decl):
            raise ParseError(f"entity id {j} out of range", path=str(path), line=k)
        rows.append(i)
        cols.append(j)
    m = m_decl if m_decl is not None else (max(cols) + 1 if cols else 0)
    H = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, m))
    H.sum_duplicates()
    H.data[:] = 1.0
    return H, m


def read_social(path, m):
    """Undirected typed entity ties; returns the list of ``q`` slices."""
    edges = []
    q_decl = None
    for k, ln in _lines(path):
        if ln.startswith("#"):
            hit = _HEADER.match(ln)
            if hit and hit.group(1) == "link_types":
                q_decl = int(hit.group(2))
            continue
        parts = ln.split()
        if len(parts) != 3:
            raise ParseError("expected 'entity_i entity_j link_type'", path=str(path), line=k)
        a = _int(parts[0], path, k, "entity")
        b = _int(parts[1], path, k, "entity")
        t = _int(parts[2], path, k, "link type")
        for e in (a, b):
            if not 0 <= e < m:
                raise ParseError(f"entity id {e} out of range [0, {m})", path=str(path), line=k)
        if t < 1 or (q_decl is not None and t > q_decl):
            raise ParseError(f"link type {t} out of range", path=str(path), line=k)
        if a == b:
            raise ParseError(f"self-tie on entity {a}", path=str(path), line=k)
        edges.append((a, b, t))
    q = q_decl if q_decl is not None else max((t for _, _, t in edges), default=0)
    slices = []
    arr = np.array(edges, dtype=np.int64).reshape(-1, 3)
    for t in range(1, q + 1):
        sel = arr[arr[:, 2] == t]
        r = np.concatenate([sel[:, 0], sel[:, 1]])
        c = np.concatenate([sel[:, 1], sel[:, 0]])
        F = sp.csr_matrix((np.ones(r.size), (r, c)), shape=(m, m))
        F.sum_duplicates()
        F.data[:] = 1.0
        slices.append(F)
    return slices


def read_labels(path, n):
    ids, vals = [], []
    for k, ln in _lines(path):
        if ln.startswith("#"):
            continue
        parts = [t.strip() for t in ln.split(",")]
        if k == 1 and parts[0] == "community_id":
            continue
        if len(parts) != 2:
            raise ParseError("expected 'community_id,label'", path=str(path), line=k)
        ids.append((k, _int(parts[0], path, k, "community")))
        v = _int(parts[1], path, k, "label")
        if v not in (0, 1):
            raise ParseError(f"label must be 0 or 1, got {v}", path=str(path), line=k)
        vals.append(v)
    _check_ids(ids, n, path, "community")
    x = np.empty(n)
    for (_, i), v in zip(ids, vals):
        x[i] = v
    return x


def load_graph(directory=None, *, attributes=None, affiliation=None, social=None, labels=None):
    """Read and validate an economic graph.

    Either pass a directory holding the standard file names (labels are
    optional) or the individual paths.
    """
    if directory is not None:
        d = Path(directory)
        attributes = attributes or d / GRAPH_FILES["attributes"]
        affiliation = affiliation or d / GRAPH_FILES["affiliation"]
        social = social or d / GRAPH_FILES["social"]
        if labels is None and (d / GRAPH_FILES["labels"]).exists():
            labels = d / GRAPH_FILES["labels"]
    if attributes is None or affiliation is None or social is None:
        raise ValidationError("attributes, affiliation and social files are required",
                              invariant="input files")
    A = read_attributes(attributes)
    n = A.shape[0]
    H, m = read_affiliation(affiliation, n)
    F = read_social(social, m)
    x = read_labels(labels, n) if labels is not None else None
    return EconomicGraph(H, F, A, x)


def _atomic_write(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(v):
    return repr(float(v))


def save_graph(graph, directory):
    """Write ``graph`` in the standard layout (exact round trip)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    A = graph.attributes
    lines = ["community_id," + ",".join(f"a_{k + 1}" for k in range(graph.p))]
    lines += [f"{i}," + ",".join(_fmt(v) for v in A[i]) for i in range(graph.n)]
    _atomic_write(d / GRAPH_FILES["attributes"], "\n".join(lines) + "\n")

    H = graph.affiliation.tocoo()
    order = np.lexsort((H.col, H.row))
    lines = [f"# entities={graph.m}"]
    lines += [f"{r} {c}" for r, c in zip(H.row[order], H.col[order])]
    _atomic_write(d / GRAPH_FILES["affiliation"], "\n".join(lines) + "\n")

    lines = [f"# link_types={graph.q}"]
    for t, F in enumerate(graph.social, start=1):
        up = sp.triu(F, k=1).tocoo()
        order = np.lexsort((up.col, up.row))
        lines += [f"{r} {c} {t}" for r, c in zip(up.row[order], up.col[order])]
    _atomic_write(d / GRAPH_FILES["social"], "\n".join(lines) + "\n")

    if graph.labels is not None:
        lines = ["community_id,label"] + [f"{i},{int(v)}" for i, v in enumerate(graph.labels)]
        _atomic_write(d / GRAPH_FILES["labels"], "\n".join(lines) + "\n")


def _sig12(v):
    return f"{float(v):.12g}"


def save_scores(path, z_star, z_robust=None):
    """``community_id,z_star,z_robust`` with 12 significant digits.

    ``z_robust`` is written as ``nan`` when no debiased score exists.
    """
    z_star = np.asarray(z_star, dtype=np.float64)
    zr = np.full_like(z_star, np.nan) if z_robust is None else np.asarray(z_robust, dtype=np.float64)
    if zr.shape != z_star.shape:
        raise ValidationError("z_star and z_robust differ in length", invariant="dimension n")
    lines = ["community_id,z_star,z_robust"]
    lines += [f"{i},{_sig12(a)},{_sig12(b)}" for i, (a, b) in enumerate(zip(z_star, zr))]
    _atomic_write(path, "\n".join(lines) + "\n")


def read_scores(path):
    """Inverse of :func:`save_scores`; returns ``(z_star, z_robust)``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1].copy(), data[:, 2].copy()


def write_key_values(path, mapping):
    lines = []
    for k, v in mapping.items():
        if isinstance(v, (float, np.floating)):
            v = _fmt(v)
        lines.append(f"{k}={v}")
    _atomic_write(path, "\n".join(lines) + "\n")


def read_key_values(path):
    out = {}
    for k, ln in _lines(path):
        if ln.startswith("#"):
            continue
        if "=" not in ln:
            raise ParseError("expected key=value", path=str(path), line=k)
        key, val = ln.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def write_ground_truth(path, z_true, epsilon_true):
    lines = ["community_id,z_true,epsilon_true"]
    lines += [f"{i},{_fmt(a)},{_fmt(b)}" for i, (a, b) in enumerate(zip(z_true, epsilon_true))]
    _atomic_write(path, "\n".join(lines) + "\n")


def write_csv_rows(path, header, rows):
    def cell(v):
        if isinstance(v, (float, np.floating)):
            return _sig12(v)
        return str(v)

    lines = [",".join(header)] + [",".join(cell(v) for v in row) for row in rows]
    _atomic_write(path, "\n".join(lines) + "\n")
