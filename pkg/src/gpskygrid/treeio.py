"""
Reading and writing dated genealogies, covariate tables and run configuration.

Trees are stored in backward time: a node's height is its age measured from
the most recent tip, so heights grow into the past and the youngest tip sits
at height 0. Tips take ids ``0..n-1`` in Newick order; internal nodes take ids
``n..2n-2`` in post-order, so the root is always the last node.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class NewickError(ValueError):
    """Base class for Newick parse failures; ``position`` is a character offset."""

    def __init__(self, message, position):
        super().__init__(f"{message} (at character {position})")
        self.position = position


class MalformedNewickError(NewickError):
    pass


class MissingBranchLengthError(NewickError):
    pass


class NonBinaryNodeError(NewickError):
    pass


class DuplicateLabelError(NewickError):
    pass


class TipDateError(ValueError):
    pass


class CovariateError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TimeTree:
    parent: np.ndarray  # -1 for the root
    children: np.ndarray  # shape (2n-1, 2), -1 for tips
    heights: np.ndarray
    labels: tuple  # tip labels, indexed by tip id

    @property
    def n_tips(self) -> int:
        return len(self.labels)

    @property
    def n_nodes(self) -> int:
        return len(self.heights)

    @property
    def root(self) -> int:
        return self.n_nodes - 1

    @property
    def root_height(self) -> float:
        return float(self.heights[self.root])

    def tip_heights(self) -> np.ndarray:
        return self.heights[: self.n_tips]

    def internal_heights(self) -> np.ndarray:
        return self.heights[self.n_tips :]

    def branch_lengths(self) -> np.ndarray:
        """Length of the edge above each node (0 for the root)."""
        out = np.zeros(self.n_nodes)
        nonroot = self.parent >= 0
        out[nonroot] = self.heights[self.parent[nonroot]] - self.heights[nonroot]
        return out

    def tip_id(self, label: str) -> int:
        return self.labels.index(label)

    def validate(self):
        n = self.n_tips
        if n < 2:
            raise ValueError("a tree needs at least two tips")
        if self.n_nodes != 2 * n - 1:
            raise ValueError("tree must have n tips and n-1 internal nodes")
        if not np.all(np.isfinite(self.heights)):
            raise ValueError("non-finite node height")
        if np.any(self.tip_heights() < 0):
            raise ValueError("negative tip height")
        if np.sum(self.parent < 0) != 1 or self.parent[self.root] >= 0:
            raise ValueError("tree must have exactly one root, stored last")
        for node in range(n, self.n_nodes):
            for child in self.children[node]:
                if child < 0 or self.parent[child] != node:
                    raise ValueError(f"internal node {node} is not binary")
                # zero-length branches are allowed
                if self.heights[node] < self.heights[child]:
                    raise ValueError(
                        f"node {node} is younger than its child {child}"
                    )
        return self


def _build_tree(parent, children, heights, labels):
    tree = TimeTree(
        parent=np.asarray(parent, dtype=np.int64),
        children=np.asarray(children, dtype=np.int64).reshape(-1, 2),
        heights=np.asarray(heights, dtype=float),
        labels=tuple(labels),
    )
    return tree


# --------------------------------------------------------------------------
# Newick
# --------------------------------------------------------------------------

_DELIMS = set("(),:;[")


class _Scanner:
    def __init__(self, text):
        self.text = text
        self.pos = 0

    def skip(self):
        text = self.text
        while self.pos < len(text):
            c = text[self.pos]
            if c.isspace():
                self.pos += 1
            elif c == "[":
                end = text.find("]", self.pos)
                if end < 0:
                    raise MalformedNewickError("unterminated comment", self.pos)
                self.pos = end + 1
            else:
                break

    def peek(self):
        self.skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def take(self):
        c = self.peek()
        self.pos += 1
        return c

    def label(self):
        self.skip()
        text = self.text
        if self.pos < len(text) and text[self.pos] == "'":
            start = self.pos
            chunks = []
            self.pos += 1
            while True:
                end = text.find("'", self.pos)
                if end < 0:
                    raise MalformedNewickError("unterminated quoted label", start)
                chunks.append(text[self.pos : end])
                self.pos = end + 1
                if self.pos < len(text) and text[self.pos] == "'":
                    chunks.append("'")
                    self.pos += 1
                else:
                    return "".join(chunks)
        start = self.pos
        while self.pos < len(text) and text[self.pos] not in _DELIMS:
            self.pos += 1
        return text[start : self.pos].strip()

    def length(self):
        """Optional ``:number`` suffix; returns None when absent."""
        if self.peek() != ":":
            return None
        self.pos += 1
        self.skip()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in _DELIMS:
            self.pos += 1
        token = self.text[start : self.pos].strip()
        try:
            value = float(token)
        except ValueError:
            raise MalformedNewickError(f"bad branch length {token!r}", start) from None
        if not math.isfinite(value):
            raise MalformedNewickError(f"non-finite branch length {token!r}", start)
        return value


def parse_newick(text: str) -> TimeTree:
    """
    Parse a single rooted, binary Newick tree with branch lengths on every
    non-root edge. Internal labels and the root edge length are ignored, and
    ``[...]`` comments are skipped.

    Heights are computed from branch lengths alone: the tip furthest from the
    root gets height 0. Use :func:`parse_tip_dates` to attach sampling dates.
    """
    sc = _Scanner(text)
    # Each node: [children, label, length, position]
    nodes = []
    stack = []  # (position of '(', list of child indices)
    root = None
    expect_item = True

    while True:
        c = sc.peek()
        pos = sc.pos
        if c == "":
            raise MalformedNewickError("missing ';' terminator", pos)
        if c == "(":
            if not expect_item:
                raise MalformedNewickError("unexpected '('", pos)
            sc.take()
            stack.append((pos, []))
            continue
        if c == ";":
            if stack:
                raise MalformedNewickError("unbalanced '('", stack[-1][0])
            if root is None:
                raise MalformedNewickError("empty tree", pos)
            sc.take()
            break
        if c == ",":
            if expect_item or not stack:
                raise MalformedNewickError("unexpected ','", pos)
            sc.take()
            expect_item = True
            continue
        if c == ")":
            if expect_item or not stack:
                raise MalformedNewickError("unexpected ')'", pos)
            sc.take()
            open_pos, kids = stack.pop()
            if len(kids) != 2:
                raise NonBinaryNodeError(
                    f"internal node has {len(kids)} children", open_pos
                )
            sc.label()
            length_pos = sc.pos
            length = sc.length()
            nodes.append([kids, None, length, length_pos])
        else:
            if not expect_item:
                raise MalformedNewickError(f"unexpected character {c!r}", pos)
            label = sc.label()
            if not label:
                raise MalformedNewickError("empty tip label", pos)
            length_pos = sc.pos
            length = sc.length()
            nodes.append([None, label, length, length_pos])
        expect_item = False
        idx = len(nodes) - 1
        if stack:
            stack[-1][1].append(idx)
        elif root is None:
            root = idx
        else:
            raise MalformedNewickError("more than one tree before ';'", nodes[idx][3])

    if sc.peek() != "":
        raise MalformedNewickError("trailing text after ';'", sc.pos)
    if nodes[root][0] is None:
        raise NonBinaryNodeError("tree has a single tip", 0)

    for i, (kids, label, length, lpos) in enumerate(nodes):
        if i != root and length is None:
            raise MissingBranchLengthError("missing branch length", lpos)

    # Renumber: tips first in order of appearance, internal nodes in post-order.
    tip_order = [i for i, nd in enumerate(nodes) if nd[0] is None]
    internal_order = [i for i, nd in enumerate(nodes) if nd[0] is not None]
    new_id = {}
    for k, i in enumerate(tip_order + internal_order):
        new_id[i] = k
    labels = [nodes[i][1] for i in tip_order]
    seen = {}
    for i in tip_order:
        lab = nodes[i][1]
        if lab in seen:
            raise DuplicateLabelError(f"duplicate tip label {lab!r}", nodes[i][3])
        seen[lab] = i

    total = len(nodes)
    parent = np.full(total, -1, dtype=np.int64)
    children = np.full((total, 2), -1, dtype=np.int64)
    blen = np.zeros(total)
    for i, (kids, _, length, _) in enumerate(nodes):
        j = new_id[i]
        blen[j] = 0.0 if length is None else length
        if kids is not None:
            for slot, kid in enumerate(kids):
                children[j, slot] = new_id[kid]
                parent[new_id[kid]] = j

    depth = np.zeros(total)
    for j in range(total - 2, -1, -1):  # parents precede children in reverse post-order
        depth[j] = depth[parent[j]] + blen[j]
    n = len(tip_order)
    heights = depth[:n].max() - depth
    heights[:n] = np.maximum(heights[:n], 0.0)
    tree = _build_tree(parent, children, heights, labels)
    try:
        tree.validate()
    except ValueError as err:
        raise MalformedNewickError(str(err), 0) from None
    return tree


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_newick(tree: TimeTree) -> str:
    """Write ``tree`` as Newick with full-precision branch lengths."""
    bl = tree.branch_lengths()
    n = tree.n_tips
    out = {}
    for node in range(tree.n_nodes):
        if node < n:
            label = tree.labels[node]
            if any(ch in label for ch in "(),:;[]' \t\n"):
                label = "'" + label.replace("'", "''") + "'"
            out[node] = label
        else:
            a, b = tree.children[node]
            out[node] = f"({out.pop(a)},{out.pop(b)})"
        if node != tree.root:
            out[node] += ":" + _fmt(bl[node])
    return out[tree.root] + ";"


def read_newick(path) -> TimeTree:
    path = Path(path)
    return parse_newick(path.read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# Tip dates
# --------------------------------------------------------------------------


def parse_tip_dates(table: str, tree: TimeTree, direction: str, tol: float = 1e-6):
    """
    Set tip heights from a ``label,date`` CSV and rebuild internal heights.

    ``direction`` is ``"forward"`` for calendar dates (larger is more recent)
    or ``"backward"`` for ages before present. Heights are shifted so the
    youngest tip is at 0. Internal heights are recomputed by adding branch
    lengths to the dated tips; the two children of a node must agree to within
    ``tol`` times the root height.
    """
    if direction not in ("forward", "backward"):
        raise TipDateError(f"unknown date direction {direction!r}")
    reader = csv.reader(io.StringIO(table))
    rows = [(reader.line_num, r) for r in reader if r and any(cell.strip() for cell in r)]
    if rows and rows[0][1][0].strip().lower() == "label":
        rows = rows[1:]
    dates = {}
    for lineno, row in rows:
        if len(row) < 2:
            raise TipDateError(f"line {lineno}: expected label,date")
        label, value = row[0].strip(), row[1].strip()
        if label in dates:
            raise TipDateError(f"line {lineno}: duplicate row for tip {label!r}")
        if label not in tree.labels:
            raise TipDateError(f"line {lineno}: unknown tip label {label!r}")
        try:
            date = float(value)
        except ValueError:
            raise TipDateError(f"line {lineno}: bad date {value!r}") from None
        if not math.isfinite(date):
            raise TipDateError(f"line {lineno}: non-finite date")
        dates[label] = date
    missing = [lab for lab in tree.labels if lab not in dates]
    if missing:
        raise TipDateError(f"no date for tips: {', '.join(missing[:5])}")

    raw = np.array([dates[lab] for lab in tree.labels])
    if direction == "forward":
        tip_h = raw.max() - raw
    else:
        tip_h = raw - raw.min()

    bl = tree.branch_lengths()
    n = tree.n_tips
    heights = np.empty(tree.n_nodes)
    heights[:n] = tip_h
    scale = max(tree.root_height, 1.0)
    for node in range(n, tree.n_nodes):
        a, b = tree.children[node]
        ha = heights[a] + bl[a]
        hb = heights[b] + bl[b]
        if abs(ha - hb) > tol * scale:
            raise TipDateError(
                f"tip dates disagree with branch lengths below internal node {node} "
                f"({ha:g} vs {hb:g})"
            )
        heights[node] = 0.5 * (ha + hb)
    dated = dataclasses.replace(tree, heights=heights)
    try:
        dated.validate()
    except ValueError as err:
        raise TipDateError(str(err)) from None
    return dated


# --------------------------------------------------------------------------
# Covariates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CovariateTable:
    names: tuple
    values: np.ndarray  # (P, M); NaN where missing
    missing: np.ndarray  # (P, M) bool
    centers: np.ndarray = field(default=None)
    scales: np.ndarray = field(default=None)

    @property
    def n_covariates(self) -> int:
        return len(self.names)

    @property
    def n_intervals(self) -> int:
        return self.values.shape[1]

    def validate(self):
        if self.values.shape != self.missing.shape:
            raise CovariateError("values and mask have different shapes")
        for p, name in enumerate(self.names):
            obs = ~self.missing[p]
            if not obs.any():
                raise CovariateError(f"covariate {name!r} has no observed values")
            if not np.all(np.isfinite(self.values[p, obs])):
                raise CovariateError(f"covariate {name!r} has non-finite values")
        return self


def standardize_rows(values, missing):
    """Center and scale each row over its observed entries (sample sd)."""
    values = np.array(values, dtype=float)
    centers = np.zeros(values.shape[0])
    scales = np.ones(values.shape[0])
    for p in range(values.shape[0]):
        obs = values[p, ~missing[p]]
        if obs.size < 2:
            raise CovariateError(f"covariate row {p} needs two observed values to standardize")
        mu = obs.mean()
        sd = obs.std(ddof=1)
        if not sd > 0:
            raise CovariateError(f"covariate row {p} has zero variance")
        centers[p], scales[p] = mu, sd
        values[p, ~missing[p]] = (obs - mu) / sd
    return values, centers, scales


def _cell(text, lineno):
    text = text.strip()
    if text == "" or text.upper() in ("NA", "NAN"):
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise CovariateError(f"line {lineno}: bad number {text!r}") from None
    if not math.isfinite(value):
        raise CovariateError(f"line {lineno}: non-finite value {text!r}")
    return value


def load_covariates(table: str, grid, standardize: bool = True) -> CovariateTable:
    """
    Read a covariate CSV aligned to the intervals of ``grid``.

    Two layouts are accepted. Without a ``time`` column there is one data row
    per grid interval, most recent first. With a leading ``time`` column the
    rows are binned into intervals ``(g_{k-1}, g_k]`` (time 0 goes to the
    first interval) and averaged; intervals with no rows are missing.
    Empty cells are missing values.
    """
    rows = [r for r in csv.reader(io.StringIO(table)) if r and any(c.strip() for c in r)]
    if not rows:
        raise CovariateError("empty covariate table")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    n_int = grid.n_intervals
    timed = header[0].lower() == "time"
    names = header[1:] if timed else header
    if not names:
        raise CovariateError("covariate table has no covariate columns")
    width = len(header)
    parsed = []
    for lineno, row in enumerate(body, start=2):
        row = list(row) + [""] * (width - len(row))
        if len(row) > width:
            raise CovariateError(f"line {lineno}: too many columns")
        parsed.append([_cell(c, lineno) for c in row])
    data = np.array(parsed, dtype=float).reshape(len(parsed), width)

    if timed:
        times = data[:, 0]
        if np.any(np.isnan(times)) or np.any(times < 0):
            raise CovariateError("time column must be present and non-negative")
        idx = np.searchsorted(np.asarray(grid.points), times, side="left")
        values = np.full((len(names), n_int), np.nan)
        for k in range(n_int):
            sel = data[idx == k, 1:]
            for p in range(len(names)):
                col = sel[:, p]
                col = col[~np.isnan(col)]
                if col.size:
                    values[p, k] = col.mean()
    else:
        if data.shape[0] != n_int:
            raise CovariateError(
                f"covariate table has {data.shape[0]} rows but the grid has {n_int} intervals"
            )
        values = data.T.copy()

    missing = np.isnan(values)
    for p, name in enumerate(names):
        if missing[p].all():
            raise CovariateError(f"covariate {name!r} is entirely missing")
    centers = np.zeros(len(names))
    scales = np.ones(len(names))
    if standardize:
        try:
            values, centers, scales = standardize_rows(values, missing)
        except CovariateError as err:
            raise CovariateError(str(err).replace("row", "")) from None
    values[missing] = np.nan
    return CovariateTable(tuple(names), values, missing, centers, scales).validate()


def format_covariates(values, names) -> str:
    """Row-per-interval CSV, the inverse of the untimed layout of load_covariates."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    values = np.atleast_2d(values)
    for k in range(values.shape[1]):
        w.writerow(["NA" if np.isnan(v) else repr(float(v)) for v in values[:, k]])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Run configuration
# --------------------------------------------------------------------------


def _bool(s):
    s = s.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _list(s):
    return [x.strip() for x in s.split(",") if x.strip()]


def _floats(s):
    return [float(x) for x in _list(s)]


def _opt_float(s):
    return None if s.strip().lower() in ("", "none") else float(s)


@dataclass
class RunConfig:
    trees: list = field(default_factory=list)
    tip_dates: list = field(default_factory=list)
    date_direction: str = "backward"
    covariates: Optional[str] = None
    standardize: bool = True
    cutoff: Optional[float] = None
    intervals: Optional[int] = None
    grid_points: Optional[list] = None
    tau_shape: float = 1.0
    tau_scale: float = 10.0
    sigma2_rate: float = 1.0
    lengthscale_rate: float = 1.0
    lengthscale_min: float = 0.0
    jitter: float = 1e-8
    whiten: bool = True
    gmrf_level_sd: Optional[float] = None
    leapfrog_steps: int = 32
    step_size: float = 0.05
    target_accept: float = 0.8
    preconditioning: str = "tridiagonal"
    mass_refresh: int = 100
    refresh_after_warmup: bool = False
    warmup: int = 500
    iterations: int = 2000
    thin: int = 1
    seed: int = 1
    chains: int = 1
    burn_in: float = 0.1
    checkpoint_every: int = 100
    out_dir: str = "out"
    base_dir: Optional[str] = None

    _PARSERS = {
        "trees": _list,
        "tip_dates": _list,
        "date_direction": str.strip,
        "covariates": str.strip,
        "standardize": _bool,
        "cutoff": float,
        "intervals": int,
        "grid_points": _floats,
        "tau_shape": float,
        "tau_scale": float,
        "sigma2_rate": float,
        "lengthscale_rate": float,
        "lengthscale_min": float,
        "jitter": float,
        "whiten": _bool,
        "gmrf_level_sd": _opt_float,
        "leapfrog_steps": int,
        "step_size": float,
        "target_accept": float,
        "preconditioning": str.strip,
        "mass_refresh": int,
        "refresh_after_warmup": _bool,
        "warmup": int,
        "iterations": int,
        "thin": int,
        "seed": int,
        "chains": int,
        "burn_in": float,
        "checkpoint_every": int,
        "out_dir": str.strip,
    }

    def validate(self):
        if not self.trees:
            raise ConfigError("no tree files given (key 'trees')")
        if self.tip_dates and len(self.tip_dates) != len(self.trees):
            raise ConfigError("give one tip_dates file per tree file")
        if self.date_direction not in ("forward", "backward"):
            raise ConfigError("date_direction must be 'forward' or 'backward'")
        if self.grid_points is not None:
            pts = np.asarray(self.grid_points, dtype=float)
            if pts.size < 1 or np.any(pts <= 0) or np.any(np.diff(pts) <= 0):
                raise ConfigError("grid_points must be positive and strictly increasing")
        else:
            if self.cutoff is None or self.intervals is None:
                raise ConfigError("give either grid_points or both cutoff and intervals")
            if not self.cutoff > 0:
                raise ConfigError("cutoff must be positive")
            if self.intervals < 2:
                raise ConfigError("intervals must be at least 2")
        if not self.step_size > 0:
            raise ConfigError("step_size must be positive")
        if self.iterations <= 0 or self.warmup < 0 or self.thin <= 0:
            raise ConfigError("iterations and thin must be positive, warmup non-negative")
        if self.leapfrog_steps < 1:
            raise ConfigError("leapfrog_steps must be at least 1")
        if self.preconditioning not in ("identity", "diagonal", "tridiagonal"):
            raise ConfigError("preconditioning must be identity, diagonal or tridiagonal")
        if not 0 < self.target_accept < 1:
            raise ConfigError("target_accept must lie in (0, 1)")
        if self.lengthscale_min < 0:
            raise ConfigError("lengthscale_min must be non-negative")
        if not 0 <= self.burn_in < 1:
            raise ConfigError("burn_in must lie in [0, 1)")
        if self.chains < 1 or self.mass_refresh < 1 or self.checkpoint_every < 1:
            raise ConfigError("chains, mass_refresh and checkpoint_every must be positive")
        if not self.covariates:
            raise ConfigError("a covariate table is required (key 'covariates')")
        return self

    def resolve(self, name):
        """Resolve a path from the config relative to the config file's directory."""
        p = Path(name)
        if not p.is_absolute() and self.base_dir is not None:
            p = Path(self.base_dir) / p
        return p

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name.startswith("_") or f.name == "base_dir":
                continue
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, list):
                v = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def parse_config(text: str, source: str = "<config>", base_dir=None) -> RunConfig:
    cfg = RunConfig(base_dir=None if base_dir is None else str(base_dir))
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        parser = RunConfig._PARSERS.get(key)
        if parser is None:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            setattr(cfg, key, parser(value))
        except ValueError as err:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {err}") from None
    try:
        return cfg.validate()
    except ConfigError as err:
        raise ConfigError(f"{source}: {err}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path), path.parent)
