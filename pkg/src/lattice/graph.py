"""Item-item graph construction from content features.

The pipeline per modality: clamped cosine similarities, per-row top-k
sparsification, symmetric degree normalization.  A learned variant runs the
same pipeline on linearly transformed features, gets blended with the frozen
initial graph, and the per-modality results are mixed with softmax weights.

Similarity matrices are never materialized densely; rows are produced in
chunks and reduced to top-k immediately, so memory stays O(num_nodes * k).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DataFormatError

# Row norms below this are treated as zero (cosine guard, degree guard).
NORM_EPS = 1e-12

# Rows of the similarity matrix computed per chunk during graph builds.
DEFAULT_CHUNK_ROWS = 256


@dataclass(frozen=True)
class SparseGraph:
    """Directed weighted graph in CSR form with non-negative float64 weights.

    Column indices are sorted within each row and hold no duplicates.
    """

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)
        if indptr.shape != (self.num_nodes + 1,):
            raise ValueError("indptr length must be num_nodes + 1")
        if indptr[0] != 0 or indptr[-1] != indices.size:
            raise ValueError("indptr endpoints do not match indices")
        if np.any(np.diff(indptr) < 0):
            raise ValueError("indptr must be non-decreasing")
        if indices.shape != values.shape:
            raise ValueError("indices and values must align")
        if indices.size:
            if indices.min() < 0 or indices.max() >= self.num_nodes:
                raise ValueError("column index out of range")
            # Sorted, duplicate-free columns within each row: the diff is
            # positive everywhere except at row boundaries.
            interior = np.ones(indices.size, dtype=bool)
            boundaries = indptr[1:-1]
            interior[boundaries[boundaries < indices.size]] = False
            bad = (np.diff(indices) <= 0) & interior[1:]
            if np.any(bad):
                raise ValueError("row columns must be strictly increasing")
            if not np.all(np.isfinite(values)):
                raise ValueError("graph weights must be finite")
            if values.min() < 0.0:
                raise ValueError("graph weights must be non-negative")

    @classmethod
    def empty(cls, num_nodes: int) -> "SparseGraph":
        return cls(
            num_nodes=num_nodes,
            indptr=np.zeros(num_nodes + 1, dtype=np.int64),
            indices=np.empty(0, dtype=np.int64),
            values=np.empty(0, dtype=np.float64),
        )

    @classmethod
    def from_scipy(cls, matrix: sp.spmatrix, num_nodes: int | None = None) -> "SparseGraph":
        csr = sp.csr_matrix(matrix, copy=False)
        if num_nodes is None:
            if csr.shape[0] != csr.shape[1]:
                raise ValueError("graph matrix must be square")
            num_nodes = csr.shape[0]
        csr.sort_indices()
        return cls(
            num_nodes=num_nodes,
            indptr=csr.indptr.astype(np.int64),
            indices=csr.indices.astype(np.int64),
            values=csr.data.astype(np.float64),
        )

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.indices, self.indptr),
            shape=(self.num_nodes, self.num_nodes),
        )

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def row_counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def row_sums(self) -> np.ndarray:
        sums = np.zeros(self.num_nodes, dtype=np.float64)
        np.add.at(sums, self.edge_rows(), self.values)
        return sums

    def edge_rows(self) -> np.ndarray:
        """Row index of every stored entry, aligned with indices/values."""
        return np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.row_counts())

    def with_values(self, values: np.ndarray) -> "SparseGraph":
        """Same sparsity pattern, new weights."""
        return SparseGraph(self.num_nodes, self.indptr, self.indices, values)

    def matmul(self, dense: np.ndarray) -> np.ndarray:
        """Multiply this graph (as a matrix) against dense rows."""
        if dense.shape[0] != self.num_nodes:
            raise ValueError(
                f"matrix has {dense.shape[0]} rows, graph has {self.num_nodes} nodes"
            )
        return self.to_scipy() @ dense

    def rmatmul(self, dense: np.ndarray) -> np.ndarray:
        """Multiply the transpose of this graph against dense rows."""
        if dense.shape[0] != self.num_nodes:
            raise ValueError(
                f"matrix has {dense.shape[0]} rows, graph has {self.num_nodes} nodes"
            )
        return self.to_scipy().T @ dense

    def lookup(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Stored weight at each (row, col) pair, 0.0 where absent."""
        if rows.size == 0:
            return np.zeros(0, dtype=np.float64)
        got = self.to_scipy()[rows, cols]
        return np.asarray(got).ravel().astype(np.float64)


def unit_rows(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalize rows; rows with norm below NORM_EPS map to zero vectors.

    Returns (normalized rows, original row norms).
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    norms = np.linalg.norm(feats, axis=1)
    safe = np.where(norms >= NORM_EPS, norms, 1.0)
    unit = feats / safe[:, None]
    unit[norms < NORM_EPS] = 0.0
    return unit, norms


def cosine_similarity_row(features: np.ndarray, i: int) -> np.ndarray:
    """Clamped cosine similarity of item i against every item.

    Negative similarities clamp to 0; zero-norm rows yield 0 everywhere.
    """
    unit, _ = unit_rows(features)
    if not 0 <= i < unit.shape[0]:
        raise IndexError(f"row {i} out of range for {unit.shape[0]} items")
    row = unit @ unit[i]
    return np.maximum(row, 0.0)


def iter_cosine_rows(
    features: np.ndarray, chunk_rows: int = DEFAULT_CHUNK_ROWS
) -> Iterator[np.ndarray]:
    """Yield blocks of the clamped cosine matrix, chunk_rows rows at a time.

    Only one (chunk_rows x num_items) block is alive at a time.
    """
    unit, _ = unit_rows(features)
    n = unit.shape[0]
    for start in range(0, n, chunk_rows):
        block = unit[start : start + chunk_rows] @ unit.T
        np.maximum(block, 0.0, out=block)
        yield block


def topk_sparsify(
    sim_blocks: Iterable[np.ndarray], k: int, num_nodes: int
) -> SparseGraph:
    """Keep the k largest entries of each similarity row.

    Ties on the boundary value resolve toward smaller column indices.  Kept
    entries that are exactly zero are dropped, so rows may hold fewer than k
    edges.  k = 0 yields an empty graph.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    cols_per_row: list[np.ndarray] = []
    vals_per_row: list[np.ndarray] = []
    counts = np.zeros(num_nodes, dtype=np.int64)
    row_index = 0
    for block in sim_blocks:
        for row in block:
            if row_index >= num_nodes:
                raise ValueError("more similarity rows than nodes")
            cols = _topk_row(row, k)
            vals = row[cols]
            keep = vals > 0.0
            cols, vals = cols[keep], vals[keep]
            counts[row_index] = cols.size
            cols_per_row.append(cols)
            vals_per_row.append(vals)
            row_index += 1
    if row_index != num_nodes:
        raise ValueError(f"expected {num_nodes} similarity rows, got {row_index}")
    indptr = np.concatenate([[0], np.cumsum(counts)])
    indices = (
        np.concatenate(cols_per_row) if cols_per_row else np.empty(0, dtype=np.int64)
    )
    values = (
        np.concatenate(vals_per_row) if vals_per_row else np.empty(0, dtype=np.float64)
    )
    return SparseGraph(num_nodes, indptr, indices, values)


def _topk_row(row: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k largest entries, ties to smaller columns, sorted."""
    n = row.size
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if k >= n:
        return np.arange(n, dtype=np.int64)
    boundary = np.partition(row, n - k)[n - k]
    above = np.flatnonzero(row > boundary)
    slots = k - above.size
    at_boundary = np.flatnonzero(row == boundary)[:slots]
    cols = np.sort(np.concatenate([above, at_boundary]))
    return cols.astype(np.int64)


def normalize_sym(graph: SparseGraph) -> SparseGraph:
    """Symmetric degree normalization: w_ij / sqrt(d_i * d_j).

    Degrees are out-degree weight sums of the directed graph.  An entry whose
    target column has zero degree becomes 0 and is dropped; rows with zero
    degree stay empty.
    """
    degrees = graph.row_sums()
    inv_sqrt = np.where(degrees >= NORM_EPS, 1.0 / np.sqrt(np.maximum(degrees, NORM_EPS)), 0.0)
    rows = graph.edge_rows()
    values = graph.values * inv_sqrt[rows] * inv_sqrt[graph.indices]
    normalized = graph.with_values(values)
    return prune_zeros(normalized)


def prune_zeros(graph: SparseGraph) -> SparseGraph:
    """Drop stored entries whose weight is exactly zero."""
    if graph.nnz == 0 or graph.values.min() > 0.0:
        return graph
    keep = graph.values > 0.0
    counts = np.zeros(graph.num_nodes, dtype=np.int64)
    np.add.at(counts, graph.edge_rows()[keep], 1)
    return SparseGraph(
        num_nodes=graph.num_nodes,
        indptr=np.concatenate([[0], np.cumsum(counts)]),
        indices=graph.indices[keep],
        values=graph.values[keep],
    )


def knn_cosine_graph(
    features: np.ndarray, k: int, chunk_rows: int = DEFAULT_CHUNK_ROWS
) -> SparseGraph:
    """Top-k clamped-cosine graph of the feature rows, unnormalized."""
    n = np.asarray(features).shape[0]
    return topk_sparsify(iter_cosine_rows(features, chunk_rows), k, n)


def build_initial_graph(
    features: np.ndarray, k: int, chunk_rows: int = DEFAULT_CHUNK_ROWS
) -> SparseGraph:
    """Normalized top-k cosine graph over raw feature rows."""
    return normalize_sym(knn_cosine_graph(features, k, chunk_rows))


def transform_features(
    features: np.ndarray, weight: np.ndarray, bias: np.ndarray
) -> np.ndarray:
    """Affine map of feature rows: features @ weight.T + bias."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or weight.ndim != 2:
        raise ValueError("features and weight must be 2-D")
    if feats.shape[1] != weight.shape[1]:
        raise ValueError(
            f"feature dim {feats.shape[1]} does not match weight columns {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ValueError("bias length must match weight rows")
    return feats @ weight.T + bias


def build_learned_graph(
    transformed: np.ndarray, k: int, chunk_rows: int = DEFAULT_CHUNK_ROWS
) -> SparseGraph:
    """Normalized top-k cosine graph over transformed feature rows."""
    return build_initial_graph(transformed, k, chunk_rows)


def fuse_skip(initial: SparseGraph, learned: SparseGraph, lam: float) -> SparseGraph:
    """Blend frozen and learned graphs: lam * initial + (1 - lam) * learned."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    if initial.num_nodes != learned.num_nodes:
        raise ValueError("graphs must share the node count")
    fused = lam * initial.to_scipy() + (1.0 - lam) * learned.to_scipy()
    return SparseGraph.from_scipy(fused, initial.num_nodes)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a 1-D array."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def aggregate_modalities(
    graphs: Sequence[SparseGraph], logits: np.ndarray
) -> tuple[SparseGraph, np.ndarray]:
    """Softmax-weighted sum of per-modality graphs.

    Returns the combined graph and the weights (which sum to 1).
    """
    if len(graphs) == 0:
        raise ValueError("at least one modality graph is required")
    if len(graphs) != np.asarray(logits).size:
        raise ValueError("one logit per modality graph is required")
    nodes = graphs[0].num_nodes
    if any(g.num_nodes != nodes for g in graphs):
        raise ValueError("graphs must share the node count")
    weights = softmax(logits)
    combined = weights[0] * graphs[0].to_scipy()
    for w, g in zip(weights[1:], graphs[1:]):
        combined = combined + w * g.to_scipy()
    return SparseGraph.from_scipy(combined, nodes), weights


def write_graph_dump(
    graph: SparseGraph, base_path, meta: Mapping[str, object]
) -> tuple[str, str]:
    """Write edges as src/dst/weight TSV plus a JSON sidecar of parameters.

    base_path gets .tsv and .json suffixes appended; paths are returned.
    """
    tsv_path = f"{base_path}.tsv"
    json_path = f"{base_path}.json"
    rows = graph.edge_rows()
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write("src\tdst\tweight\n")
        for r, c, v in zip(rows, graph.indices, graph.values):
            fh.write(f"{r}\t{c}\t{float(v)!r}\n")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(dict(meta), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return tsv_path, json_path


def read_graph_dump(tsv_path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read a graph dump TSV back as (src, dst, weight) arrays."""
    src, dst, wgt = [], [], []
    with open(tsv_path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "src\tdst\tweight":
            raise DataFormatError(f"{tsv_path}: unexpected header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"{tsv_path}: line {lineno}: expected 3 fields")
            src.append(int(parts[0]))
            dst.append(int(parts[1]))
            wgt.append(float(parts[2]))
    return (
        np.asarray(src, dtype=np.int64),
        np.asarray(dst, dtype=np.int64),
        np.asarray(wgt, dtype=np.float64),
    )
