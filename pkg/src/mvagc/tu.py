"""Reader/writer for the TU-Dortmund graph benchmark text format.

A dataset ``DS`` is a directory holding ``DS_A.txt`` (1-indexed global edge
list), ``DS_graph_indicator.txt`` (graph id per vertex),
``DS_graph_labels.txt`` (label per graph) and optionally
``DS_node_labels.txt`` / ``DS_node_attributes.txt``.
"""
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import EncodingError, ParseError, SplitError
from .graph import Graph
from .numeric import make_rng

ENCODINGS = ("label-onehot", "degree-onehot", "continuous")

# degree cap defaults per dataset, inside the 30..50 range used for social graphs
DEGREE_CAPS = {"IMDB-BINARY": 50, "IMDB-B": 50, "IMDB-MULTI": 50, "IMDB-M": 50, "COLLAB": 30}


@dataclass(eq=False)
class RawDataset:
    name: str
    adjacencies: list
    labels: np.ndarray
    label_values: list
    node_labels: list = None
    node_attributes: list = None
    self_loops_dropped: int = 0

    def __len__(self):
        return len(self.adjacencies)

    @property
    def num_classes(self):
        return len(self.label_values)


@dataclass(eq=False)
class Dataset:
    name: str
    graphs: list
    num_classes: int
    feature_dim: int
    encoding: str

    def __len__(self):
        return len(self.graphs)

    @property
    def labels(self):
        return np.array([g.label for g in self.graphs], dtype=np.int64)


@dataclass(eq=False)
class FoldPlan:
    k: int
    assignments: np.ndarray
    seed: int

    def test_indices(self, fold):
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold):
        return np.flatnonzero(self.assignments != fold)

    def sizes(self):
        return np.bincount(self.assignments, minlength=self.k)


def _rows(path, cast, required=True):
    """Yield ``(line_number, fields)`` for the non-blank lines of ``path``."""
    path = Path(path)
    if not path.exists():
        if required:
            raise FileNotFoundError(f"missing TU file: {path}")
        return None
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append((lineno, [cast(tok.strip()) for tok in line.split(",") if tok.strip()]))
            except ValueError as exc:
                raise ParseError(f"cannot parse {line!r}: {exc}", path, lineno) from None
    return out


def _scalar_column(path, cast, required=True):
    rows = _rows(path, cast, required)
    if rows is None:
        return None, None
    for lineno, vals in rows:
        if len(vals) != 1:
            raise ParseError(f"expected one value, got {len(vals)}", path, lineno)
    return np.array([v[0] for _, v in rows]), [ln for ln, _ in rows]


def _dataset_dir(root_dir, name):
    root = Path(root_dir)
    if (root / name / f"{name}_A.txt").exists() or (root / name).is_dir():
        return root / name
    return root


def load_tu_dataset(root_dir, name):
    """Parse dataset ``name`` found in ``root_dir/name/`` (or ``root_dir`` itself)."""
    base = _dataset_dir(root_dir, name)
    p = lambda suffix: base / f"{name}_{suffix}.txt"

    indicator, _ = _scalar_column(p("graph_indicator"), int)
    graph_labels, _ = _scalar_column(p("graph_labels"), int)
    edge_rows = _rows(p("A"), int)

    n_total = len(indicator)
    n_graphs = len(graph_labels)
    if indicator.min() < 1 or indicator.max() > n_graphs:
        raise ParseError(
            f"graph ids must lie in 1..{n_graphs}, found {indicator.min()}..{indicator.max()}",
            p("graph_indicator"),
        )

    gid = indicator - 1
    counts = np.bincount(gid, minlength=n_graphs)
    # local index of every global vertex inside its graph
    local = np.empty(n_total, dtype=np.int64)
    seen = np.zeros(n_graphs, dtype=np.int64)
    for v in range(n_total):
        local[v] = seen[gid[v]]
        seen[gid[v]] += 1

    adjs = [np.zeros((c, c)) for c in counts]
    self_loops = 0
    for lineno, vals in edge_rows:
        if len(vals) != 2:
            raise ParseError(f"expected 'i, j', got {len(vals)} fields", p("A"), lineno)
        i, j = vals[0] - 1, vals[1] - 1
        if not (0 <= i < n_total and 0 <= j < n_total):
            raise ParseError(f"vertex index out of range 1..{n_total}", p("A"), lineno)
        if gid[i] != gid[j]:
            raise ParseError(
                f"edge ({i + 1}, {j + 1}) crosses graphs {gid[i] + 1} and {gid[j] + 1}",
                p("A"),
                lineno,
            )
        if i == j:
            self_loops += 1
            continue
        a = adjs[gid[i]]
        a[local[i], local[j]] = 1.0
        a[local[j], local[i]] = 1.0

    label_values = sorted(set(graph_labels.tolist()))
    remap = {v: k for k, v in enumerate(label_values)}
    labels = np.array([remap[v] for v in graph_labels.tolist()], dtype=np.int64)

    def split_per_graph(values):
        if len(values) != n_total:
            raise ParseError(f"expected {n_total} vertex rows, got {len(values)}")
        order = np.argsort(gid, kind="stable")
        bounds = np.cumsum(counts)[:-1]
        return np.split(values[order], bounds)

    node_labels = None
    nl, _ = _scalar_column(p("node_labels"), int, required=False)
    if nl is not None:
        node_labels = split_per_graph(nl.astype(np.int64))

    node_attrs = None
    rows = _rows(p("node_attributes"), float, required=False)
    if rows is not None:
        widths = {len(v) for _, v in rows}
        if len(widths) != 1:
            raise ParseError(f"ragged attribute rows (widths {sorted(widths)})", p("node_attributes"))
        node_attrs = split_per_graph(np.array([v for _, v in rows], dtype=np.float64))

    return RawDataset(
        name=name,
        adjacencies=adjs,
        labels=labels,
        label_values=label_values,
        node_labels=node_labels,
        node_attributes=node_attrs,
        self_loops_dropped=self_loops,
    )


def write_tu_dataset(raw, out_dir):
    """Write ``raw`` in TU format under ``out_dir/raw.name/``; returns that directory."""
    out = Path(out_dir) / raw.name
    out.mkdir(parents=True, exist_ok=True)
    p = lambda suffix: out / f"{raw.name}_{suffix}.txt"
    offset = 0
    edges, indicator = [], []
    for g, a in enumerate(raw.adjacencies):
        n = a.shape[0]
        for i, j in zip(*np.nonzero(a)):
            edges.append(f"{i + offset + 1}, {j + offset + 1}")
        indicator.extend([str(g + 1)] * n)
        offset += n
    p("A").write_text("\n".join(edges) + "\n")
    p("graph_indicator").write_text("\n".join(indicator) + "\n")
    p("graph_labels").write_text(
        "\n".join(str(raw.label_values[k]) for k in raw.labels) + "\n"
    )
    if raw.node_labels is not None:
        vals = np.concatenate(raw.node_labels)
        p("node_labels").write_text("\n".join(str(int(v)) for v in vals) + "\n")
    if raw.node_attributes is not None:
        vals = np.concatenate(raw.node_attributes)
        p("node_attributes").write_text(
            "\n".join(", ".join(repr(float(x)) for x in row) for row in vals) + "\n"
        )
    return out


def dataset_statistics(raw):
    """Table-style summary: counts, mean vertices and mean undirected edges."""
    n = np.array([a.shape[0] for a in raw.adjacencies])
    e = np.array([np.count_nonzero(np.triu(a)) for a in raw.adjacencies])
    attr_dim = 0
    if raw.node_attributes is not None:
        attr_dim = raw.node_attributes[0].shape[1]
    return {
        "name": raw.name,
        "graphs": len(raw),
        "classes": raw.num_classes,
        "mean_vertices": float(n.mean()),
        "mean_edges": float(e.mean()),
        "vertex_labels": raw.node_labels is not None,
        "attribute_dim": attr_dim,
    }


def _build(raw, features, encoding):
    graphs = [Graph(a, x, int(y)) for a, x, y in zip(raw.adjacencies, features, raw.labels)]
    return Dataset(raw.name, graphs, raw.num_classes, features[0].shape[1], encoding)


def encode_label_onehot(raw):
    if raw.node_labels is None:
        raise EncodingError(f"{raw.name} has no vertex labels")
    values = np.unique(np.concatenate(raw.node_labels))
    eye = np.eye(len(values))
    feats = [eye[np.searchsorted(values, nl)] for nl in raw.node_labels]
    return _build(raw, feats, "label-onehot")


def encode_degree_onehot(raw, cap):
    if not 1 <= cap <= 200:
        raise EncodingError(f"degree cap must lie in [1, 200], got {cap}")
    eye = np.eye(cap + 1)
    feats = []
    for a in raw.adjacencies:
        deg = a.sum(axis=1).astype(np.int64)
        feats.append(eye[np.minimum(deg, cap)])
    return _build(raw, feats, "degree-onehot")


def normalize_continuous(raw, fit_indices=None):
    """Standardize vertex attributes per dimension.

    Statistics are taken over every vertex of the graphs in ``fit_indices``
    (all graphs by default). Dimensions with std below 1e-12 become zero.
    """
    if raw.node_attributes is None:
        raise EncodingError(f"{raw.name} has no vertex attributes")
    if fit_indices is None:
        fit_indices = range(len(raw))
    stacked = np.concatenate([raw.node_attributes[i] for i in fit_indices])
    mu = stacked.mean(axis=0)
    sd = stacked.std(axis=0)
    flat = sd < 1e-12
    scale = np.where(flat, 1.0, sd)
    feats = []
    for x in raw.node_attributes:
        z = (x - mu) / scale
        z[:, flat] = 0.0
        feats.append(z)
    return _build(raw, feats, "continuous")


def default_encoding(raw):
    """Vertex labels if present, else continuous attributes, else degrees."""
    if raw.node_labels is not None:
        return "label-onehot"
    if raw.node_attributes is not None:
        return "continuous"
    return "degree-onehot"


def encode(raw, encoding, degree_cap=None):
    if encoding == "auto":
        encoding = default_encoding(raw)
    if encoding == "label-onehot":
        return encode_label_onehot(raw)
    if encoding == "degree-onehot":
        cap = degree_cap if degree_cap is not None else DEGREE_CAPS.get(raw.name, 50)
        return encode_degree_onehot(raw, cap)
    if encoding == "continuous":
        return normalize_continuous(raw)
    raise EncodingError(f"unknown encoding {encoding!r}; choose from {ENCODINGS}")


def stratified_kfold(dataset, k, seed):
    """Assign every graph to one of ``k`` folds, balancing classes.

    Members of each class are shuffled and dealt round-robin, continuing the
    deal across classes, so both fold sizes and per-class counts per fold
    differ by at most one.
    """
    labels = dataset.labels if hasattr(dataset, "labels") else np.asarray(dataset)
    labels = np.asarray(labels, dtype=np.int64)
    if k < 1:
        raise SplitError(f"k must be >= 1, got {k}")
    rng = make_rng(seed)
    assignments = np.empty(len(labels), dtype=np.int64)
    pos = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < k:
            raise SplitError(f"class {cls} has {len(members)} members, fewer than k={k}")
        members = members[rng.permutation(len(members))]
        assignments[members] = (pos + np.arange(len(members))) % k
        pos += len(members)
    return FoldPlan(k=k, assignments=assignments, seed=int(seed))


def stratified_subsample(dataset, max_graphs, seed):
    """At most ``max_graphs`` graphs with class proportions kept (one fold of a
    ``ceil(n / max_graphs)``-fold deal), in original order."""
    if max_graphs is None or len(dataset) <= max_graphs:
        return dataset
    if max_graphs < 1:
        raise SplitError(f"max_graphs must be >= 1, got {max_graphs}")
    k = -(-len(dataset) // max_graphs)
    keep = stratified_kfold(dataset, k, seed).test_indices(0)
    return replace(dataset, graphs=[dataset.graphs[i] for i in keep])
