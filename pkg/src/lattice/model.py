"""Model assembly: CF backends, content graphs, and item enhancement.

The forward pass has three stages:
  1. backend embeddings (plain tables, or light graph convolution over the
     normalized user-item graph averaged across layers),
  2. an item-item graph mixed from per-modality cosine kNN graphs, over which
     item vectors are propagated by plain sparse multiplication,
  3. enhancement: each backend item vector plus the L2-normalized propagated
     vector.

forward_pass records every intermediate needed by the hand-written backward
pass in training, so analytic gradients and evaluation always share one code
path.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .data import InteractionDataset, ModalityFeatures, build_bipartite_graph
from .errors import CheckpointError
from .graph import (
    NORM_EPS,
    SparseGraph,
    aggregate_modalities,
    build_initial_graph,
    fuse_skip,
    knn_cosine_graph,
    normalize_sym,
    transform_features,
    unit_rows,
)

BACKENDS = ("mf", "lightgcn")
VARIANTS = ("full", "conv_on_feats", "feats_side_info", "base")

CHECKPOINT_MAGIC = b"LATC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; training hyperparameters live in TrainConfig."""

    backend: str = "mf"
    variant: str = "full"
    embed_dim: int = 64
    hidden_dim: int = 64
    k: int = 10
    fuse_lambda: float = 0.5
    item_layers: int = 1
    cf_layers: int = 3

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ValueError("embedding dims must be positive")
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if not 0.0 <= self.fuse_lambda <= 1.0:
            raise ValueError("fuse_lambda must lie in [0, 1]")
        if not 0 <= self.item_layers <= 4:
            raise ValueError("item_layers must lie in [0, 4]")
        if self.cf_layers < 0:
            raise ValueError("cf_layers must be non-negative")

    @property
    def uses_modal_features(self) -> bool:
        return self.variant != "base"

    @property
    def uses_item_graph(self) -> bool:
        return self.variant in ("full", "conv_on_feats")

    @property
    def uses_projection(self) -> bool:
        return self.variant in ("conv_on_feats", "feats_side_info")

    @property
    def uses_mixer(self) -> bool:
        return self.uses_item_graph


@dataclass
class ParameterSet:
    """All trainable arrays, float64, addressable by canonical name.

    Canonical order (used for checkpoints and gradient checks): user and item
    tables, then per modality (sorted by id) transform weight and bias, then
    mixer logits, then the feature projection.  Absent parts are None.
    """

    user_emb: np.ndarray
    item_emb: np.ndarray
    modalities: tuple
    transform_w: dict
    transform_b: dict
    logits: np.ndarray | None = None
    projection: np.ndarray | None = None

    def named(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "user_emb", self.user_emb
        yield "item_emb", self.item_emb
        for m in self.modalities:
            yield f"transform_w.{m}", self.transform_w[m]
            yield f"transform_b.{m}", self.transform_b[m]
        if self.logits is not None:
            yield "modality_logits", self.logits
        if self.projection is not None:
            yield "projection", self.projection

    def names(self) -> list[str]:
        return [name for name, _ in self.named()]

    def get(self, name: str) -> np.ndarray:
        for n, arr in self.named():
            if n == name:
                return arr
        raise KeyError(name)

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            user_emb=self.user_emb.copy(),
            item_emb=self.item_emb.copy(),
            modalities=self.modalities,
            transform_w={m: w.copy() for m, w in self.transform_w.items()},
            transform_b={m: b.copy() for m, b in self.transform_b.items()},
            logits=None if self.logits is None else self.logits.copy(),
            projection=None if self.projection is None else self.projection.copy(),
        )


@dataclass(frozen=True)
class ModelInputs:
    """Constant per-run tensors: features, frozen kNN graphs, user-item graph."""

    num_users: int
    num_items: int
    features: dict
    initial_graphs: dict
    bipartite: SparseGraph | None

    @property
    def modalities(self) -> tuple:
        return tuple(sorted(self.features))


def build_inputs(
    cfg: ModelConfig,
    train: InteractionDataset,
    features: Mapping[str, ModalityFeatures],
) -> ModelInputs:
    """Precompute everything the forward pass treats as constant."""
    feats = {m: np.asarray(f.matrix, dtype=np.float64) for m, f in features.items()}
    for m, mat in feats.items():
        if mat.shape[0] != train.num_items:
            raise ValueError(
                f"modality {m!r} has {mat.shape[0]} rows for {train.num_items} items"
            )
    initial = {}
    if cfg.uses_item_graph and cfg.k > 0:
        for m in sorted(feats):
            initial[m] = build_initial_graph(feats[m], cfg.k)
    bipartite = build_bipartite_graph(train) if cfg.backend == "lightgcn" else None
    return ModelInputs(
        num_users=train.num_users,
        num_items=train.num_items,
        features=feats,
        initial_graphs=initial,
        bipartite=bipartite,
    )


@dataclass
class GraphBundle:
    """A mixed item graph reusable across batches when refresh is per-epoch."""

    graph: SparseGraph
    alpha: np.ndarray | None


@dataclass
class ForwardCache:
    """Intermediates of one forward pass, consumed by the backward pass."""

    cfg: ModelConfig
    inputs: ModelInputs
    frozen_graph: bool = False
    # per-modality graph build
    h_modal: dict = field(default_factory=dict)
    unit_modal: dict = field(default_factory=dict)
    norms_modal: dict = field(default_factory=dict)
    retained: dict = field(default_factory=dict)
    learned: dict = field(default_factory=dict)
    fused: dict = field(default_factory=dict)
    alpha: np.ndarray | None = None
    graph: SparseGraph | None = None
    # propagation and enhancement
    feat_concat: np.ndarray | None = None
    h_layers: list | None = None
    enhance_src: np.ndarray | None = None
    enhance_norms: np.ndarray | None = None
    enhance_add: np.ndarray | None = None
    # backend
    z_layers: list | None = None


@dataclass
class ForwardOutput:
    """Backend user vectors, backend item vectors, and enhanced item vectors."""

    user_vecs: np.ndarray
    item_vecs: np.ndarray
    enhanced_items: np.ndarray


def _transformed_features(
    params: ParameterSet, inputs: ModelInputs, cache: ForwardCache | None
) -> dict:
    out = {}
    for m in sorted(inputs.features):
        h = transform_features(
            inputs.features[m], params.transform_w[m], params.transform_b[m]
        )
        out[m] = h
        if cache is not None:
            cache.h_modal[m] = h
    return out


def build_item_graph(
    cfg: ModelConfig,
    params: ParameterSet,
    inputs: ModelInputs,
    cache: ForwardCache | None = None,
    h_modal: dict | None = None,
) -> tuple[SparseGraph, np.ndarray]:
    """Mix the per-modality fused graphs into one propagation matrix.

    With k = 0 every per-modality graph is empty and so is the mix.
    Records build intermediates on cache when one is supplied.
    """
    if h_modal is None:
        h_modal = _transformed_features(params, inputs, cache)
    fused_list = []
    modalities = sorted(inputs.features)
    for m in modalities:
        if cfg.k == 0:
            retained = SparseGraph.empty(inputs.num_items)
            unit = np.zeros_like(h_modal[m])
            norms = np.zeros(inputs.num_items)
        else:
            unit, norms = unit_rows(h_modal[m])
            retained = knn_cosine_graph(h_modal[m], cfg.k)
        learned = normalize_sym(retained)
        initial = inputs.initial_graphs.get(m, SparseGraph.empty(inputs.num_items))
        fused = fuse_skip(initial, learned, cfg.fuse_lambda)
        fused_list.append(fused)
        if cache is not None:
            cache.unit_modal[m] = unit
            cache.norms_modal[m] = norms
            cache.retained[m] = retained
            cache.learned[m] = learned
            cache.fused[m] = fused
    graph, alpha = aggregate_modalities(fused_list, params.logits)
    if cache is not None:
        cache.graph = graph
        cache.alpha = alpha
    return graph, alpha


def propagate_item_graph(
    graph: SparseGraph, h0: np.ndarray, layers: int
) -> list[np.ndarray]:
    """Repeated sparse multiplication, no transforms or nonlinearities.

    Returns all layer outputs [h0, ..., hL]; the last entry is the result.
    """
    if h0.shape[0] != graph.num_nodes:
        raise ValueError(
            f"h0 has {h0.shape[0]} rows, graph has {graph.num_nodes} nodes"
        )
    hs = [h0]
    for _ in range(layers):
        hs.append(graph.matmul(hs[-1]))
    return hs


def normalize_rows_guarded(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize; rows with norm below NORM_EPS map to zero rows.

    Returns (normalized rows, row norms).
    """
    norms = np.linalg.norm(v, axis=1)
    safe = np.where(norms >= NORM_EPS, norms, 1.0)
    out = v / safe[:, None]
    out[norms < NORM_EPS] = 0.0
    return out, norms


def enhance_items(item_vecs: np.ndarray, propagated: np.ndarray) -> np.ndarray:
    """Add the L2-normalized propagated vectors to the backend item vectors."""
    add, _ = normalize_rows_guarded(propagated)
    return item_vecs + add


def cf_forward(
    cfg: ModelConfig,
    params: ParameterSet,
    inputs: ModelInputs,
    cache: ForwardCache | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Backend user and item vectors.

    mf returns the tables.  lightgcn stacks user and item tables, convolves
    cf_layers times over the normalized user-item graph, and averages all
    layer outputs; cf_layers = 0 reduces to mf exactly.
    """
    if cfg.backend == "mf":
        return params.user_emb, params.item_emb
    if inputs.bipartite is None:
        raise ValueError("lightgcn backend requires the user-item graph")
    z0 = np.concatenate([params.user_emb, params.item_emb], axis=0)
    zs = [z0]
    for _ in range(cfg.cf_layers):
        zs.append(inputs.bipartite.matmul(zs[-1]))
    if cache is not None:
        cache.z_layers = zs
    mean = zs[0].copy()
    for z in zs[1:]:
        mean += z
    mean /= len(zs)
    return mean[: inputs.num_users], mean[inputs.num_users :]


def forward_pass(
    cfg: ModelConfig,
    params: ParameterSet,
    inputs: ModelInputs,
    graphs: GraphBundle | None = None,
    keep_cache: bool = True,
) -> tuple[ForwardOutput, ForwardCache]:
    """Full forward computation for any backend/variant combination.

    When graphs is supplied the item graph is taken as a constant instead of
    being rebuilt from the current parameters (per-epoch refresh mode).
    """
    cache = ForwardCache(cfg=cfg, inputs=inputs)
    user_vecs, item_vecs = cf_forward(cfg, params, inputs, cache if keep_cache else None)

    if cfg.variant == "base":
        out = ForwardOutput(user_vecs, item_vecs, item_vecs)
        return out, cache

    h_modal = None
    if cfg.uses_projection:
        h_modal = _transformed_features(params, inputs, cache if keep_cache else None)
        feat_concat = np.concatenate(
            [h_modal[m] for m in sorted(inputs.features)], axis=1
        )
        cache.feat_concat = feat_concat

    if cfg.uses_item_graph:
        if graphs is None:
            graph, _ = build_item_graph(
                cfg, params, inputs, cache if keep_cache else None, h_modal
            )
        else:
            graph = graphs.graph
            cache.graph = graph
            cache.alpha = graphs.alpha
            cache.frozen_graph = True
        if cfg.variant == "full":
            h0 = params.item_emb
        else:
            h0 = cache.feat_concat @ params.projection.T
        h_layers = propagate_item_graph(graph, h0, cfg.item_layers)
        cache.h_layers = h_layers
        src = h_layers[-1]
    else:  # feats_side_info: project concatenated features, skip the graph
        src = cache.feat_concat @ params.projection.T

    add, norms = normalize_rows_guarded(src)
    cache.enhance_src = src
    cache.enhance_norms = norms
    cache.enhance_add = add
    enhanced = item_vecs + add
    out = ForwardOutput(user_vecs, item_vecs, enhanced)
    return out, cache


def forward(
    cfg: ModelConfig,
    params: ParameterSet,
    inputs: ModelInputs,
    graphs: GraphBundle | None = None,
) -> ForwardOutput:
    out, _ = forward_pass(cfg, params, inputs, graphs, keep_cache=False)
    return out


def score(user_vec: np.ndarray, item_vec: np.ndarray) -> float:
    """Inner-product preference score for one user-item pair."""
    if user_vec.shape != item_vec.shape:
        raise ValueError("user and item vectors must share a dimension")
    return float(np.dot(user_vec, item_vec))


def score_matrix(user_vecs: np.ndarray, enhanced_items: np.ndarray) -> np.ndarray:
    """Scores of every given user against every item."""
    return user_vecs @ enhanced_items.T


# ---------------------------------------------------------------------------
# checkpoints: JSON header + raw little-endian float32 parameter blocks


def save_checkpoint(
    path,
    cfg: ModelConfig,
    params: ParameterSet,
    meta: Mapping[str, object] | None = None,
) -> None:
    """Write config, shapes, and parameters; block order follows params.named()."""
    entries = [
        {"name": name, "shape": list(arr.shape)} for name, arr in params.named()
    ]
    header = {
        "config": {
            "backend": cfg.backend,
            "variant": cfg.variant,
            "embed_dim": cfg.embed_dim,
            "hidden_dim": cfg.hidden_dim,
            "k": cfg.k,
            "fuse_lambda": cfg.fuse_lambda,
            "item_layers": cfg.item_layers,
            "cf_layers": cfg.cf_layers,
        },
        "num_users": int(params.user_emb.shape[0]),
        "num_items": int(params.item_emb.shape[0]),
        "modalities": list(params.modalities),
        "parameters": entries,
        "meta": dict(meta or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in params.named():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C"))


def load_checkpoint(path) -> tuple[ModelConfig, ParameterSet, dict]:
    """Read a checkpoint; parameters come back as float64."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
        cfg = ModelConfig(**header["config"])
        entries = header["parameters"]
        modalities = tuple(header["modalities"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad checkpoint header: {exc}") from exc
    offset = 12 + header_len
    arrays = {}
    for entry in entries:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 4
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated parameter block {entry['name']}")
        arr = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after parameter blocks")
    try:
        params = ParameterSet(
            user_emb=arrays.pop("user_emb"),
            item_emb=arrays.pop("item_emb"),
            modalities=modalities,
            transform_w={m: arrays.pop(f"transform_w.{m}") for m in modalities},
            transform_b={m: arrays.pop(f"transform_b.{m}") for m in modalities},
            logits=arrays.pop("modality_logits", None),
            projection=arrays.pop("projection", None),
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing parameter block {exc}") from exc
    if arrays:
        raise CheckpointError(
            f"{path}: unexpected parameter blocks {sorted(arrays)}"
        )
    return cfg, params, header.get("meta", {})
