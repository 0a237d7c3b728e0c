"""AUC, test-set evaluation, attention relevance analysis and ablations."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import networkx as nx
import numpy as np
from scipy.stats import rankdata

from .config import TrainConfig
from .data import Dataset, WindowBatch, dataset_windows
from .model import ModelParams, attention_mask, forward, loss

log = logging.getLogger(__name__)

EVAL_CHUNK = 256


class UndefinedMetricError(ValueError):
    """AUC requested on labels of a single class."""


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via the rank-sum (Mann-Whitney) statistic.

    Ties between a positive and a negative count one half.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _as_windows(data: Dataset | WindowBatch, n: int) -> WindowBatch:
    return dataset_windows(data, n) if isinstance(data, Dataset) else data


def predict_all(
    params: ModelParams, data: Dataset | WindowBatch, config: TrainConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode predictions and targets over every valid position, in window order."""
    windows = _as_windows(data, config.n)
    ps, rs = [], []
    for start in range(0, len(windows), EVAL_CHUNK):
        chunk = windows.take(slice(start, start + EVAL_CHUNK))
        trace = forward(params, chunk, config)
        ps.append(trace.p[chunk.valid])
        rs.append(chunk.targets[chunk.valid])
    return np.concatenate(ps), np.concatenate(rs)


def evaluate(
    params: ModelParams, data: Dataset | WindowBatch, config: TrainConfig
) -> tuple[float, float]:
    """(AUC, mean loss) over all valid positions, dropout off."""
    p, r = predict_all(params, data, config)
    mean_loss, _ = loss(p, r, np.ones_like(r, dtype=bool))
    return auc(p, r), mean_loss


# ---------------------------------------------------------------------------
# relevance matrix
# ---------------------------------------------------------------------------


@dataclass
class RelevanceMatrix:
    values: np.ndarray  # (E, E), rows with support sum to 1
    support: np.ndarray  # (E, E) number of (query, key) pairs seen
    meta: dict = field(default_factory=dict)

    @property
    def num_exercises(self) -> int:
        return self.values.shape[0]

    def supported_rows(self) -> np.ndarray:
        return self.support.sum(axis=1) > 0


def accumulate_attention(
    weights: np.ndarray, batch: WindowBatch, num_exercises: int
) -> tuple[np.ndarray, np.ndarray]:
    """Sum head-averaged weights (B, n, n) into (query exercise, key exercise) cells."""
    E = num_exercises
    mask = attention_mask(batch.valid)[:, 0]
    key_ex = batch.interaction_ids % E
    cell = batch.query_exercise_ids[:, :, None] * E + key_ex[:, None, :]
    mass = np.bincount(cell[mask], weights=weights[mask], minlength=E * E)
    count = np.bincount(cell[mask], minlength=E * E)
    return mass.reshape(E, E), count.reshape(E, E)


def relevance_matrix(
    params: ModelParams,
    data: Dataset | WindowBatch,
    config: TrainConfig,
    block: int = -1,
) -> RelevanceMatrix:
    """Aggregate attention of query exercises on key exercises, row-normalized.

    Weights are averaged over the heads of one block (the last by default).
    """
    if params.blocks == 0:
        raise ValueError("a model without attention blocks has no relevance matrix")
    E = params.num_exercises
    windows = _as_windows(data, config.n)
    mass = np.zeros((E, E))
    count = np.zeros((E, E), dtype=np.int64)
    for start in range(0, len(windows), EVAL_CHUNK):
        chunk = windows.take(slice(start, start + EVAL_CHUNK))
        trace = forward(params, chunk, config)
        m, c = accumulate_attention(trace.attention(block).mean(axis=1), chunk, E)
        mass += m
        count += c
    totals = mass.sum(axis=1, keepdims=True)
    values = np.divide(mass, totals, out=np.zeros_like(mass), where=totals > 0)
    block_index = block % params.blocks
    meta = {
        "head_aggregation": "mean",
        "block": block_index,
        "blocks": params.blocks,
        "heads": params.heads,
        "num_exercises": E,
        "windows": len(windows),
    }
    return RelevanceMatrix(values, count, meta)


def write_relevance(rel: RelevanceMatrix, csv_path: str | Path) -> tuple[Path, Path]:
    """E x E CSV (row = query exercise) plus a JSON sidecar with metadata and support."""
    csv_path = Path(csv_path)
    np.savetxt(csv_path, rel.values, delimiter=",", fmt="%.10g")
    meta_path = csv_path.with_suffix(".json")
    payload = dict(rel.meta, support=rel.support.tolist())
    meta_path.write_text(json.dumps(payload, sort_keys=True) + "\n")
    return csv_path, meta_path


# ---------------------------------------------------------------------------
# influence graph
# ---------------------------------------------------------------------------


@dataclass
class InfluenceGraph:
    nodes: list[int]
    edges: list[tuple[int, int, float]]
    anchors: list[int]
    concept_of: tuple[int, ...] | None = None
    warnings: list[str] = field(default_factory=list)

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(self.nodes)
        g.add_weighted_edges_from(self.edges)
        return g

    def out_degree(self, node: int) -> int:
        return sum(1 for s, _, _ in self.edges if s == node)


def concept_anchors(concept_of: Sequence[int]) -> list[int]:
    """Lowest exercise id of each concept (first in the canonical order)."""
    first: dict[int, int] = {}
    for ex, c in enumerate(concept_of):
        first.setdefault(c, ex)
    return sorted(first.values())


def influence_graph(
    rel: RelevanceMatrix,
    anchors: Sequence[int] = (),
    concept_of: Sequence[int] | None = None,
    top_k: int = 2,
) -> InfluenceGraph:
    """Link every non-anchor exercise to its ``top_k`` most relevant other exercises.

    Only keys that were actually observed with the query are candidates;
    self-pairs are skipped and ties go to the lower exercise id.
    """
    E = rel.num_exercises
    anchor_set = set(anchors)
    edges: list[tuple[int, int, float]] = []
    notes: list[str] = []
    for q in range(E):
        if q in anchor_set:
            continue
        cands = [k for k in range(E) if k != q and rel.support[q, k] > 0]
        cands.sort(key=lambda k: (-rel.values[q, k], k))
        chosen = cands[:top_k]
        if len(chosen) < top_k:
            msg = f"exercise {q}: only {len(chosen)} candidate key(s)"
            notes.append(msg)
            log.warning(msg)
        edges.extend((q, k, float(rel.values[q, k])) for k in chosen)
    return InfluenceGraph(
        nodes=list(range(E)),
        edges=edges,
        anchors=sorted(anchor_set),
        concept_of=tuple(concept_of) if concept_of is not None else None,
        warnings=notes,
    )


def component_purity(graph: InfluenceGraph, concept_of: Sequence[int]) -> float:
    """Share of nodes whose concept is the majority concept of their weakly
    connected component."""
    total = 0
    for comp in nx.weakly_connected_components(graph.to_networkx()):
        counts = np.bincount([concept_of[v] for v in comp])
        total += int(counts.max())
    return total / len(graph.nodes)


def write_dot(graph: InfluenceGraph, path: str | Path, labels: Sequence[str] | None = None) -> Path:
    path = Path(path)
    lines = ["digraph influence {", "  node [shape=circle];"]
    for v in graph.nodes:
        attrs = [f'label="{labels[v] if labels else v}"']
        if graph.concept_of is not None:
            attrs.append(f"concept={graph.concept_of[v]}")
            attrs.append(f'group="c{graph.concept_of[v]}"')
        if v in graph.anchors:
            attrs.append("peripheries=2")
        lines.append(f"  {v} [{', '.join(attrs)}];")
    for s, t, w in graph.edges:
        lines.append(f'  {s} -> {t} [weight={w:.6g}, label="{w:.3f}"];')
    lines.append("}")
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATIONS: tuple[tuple[str, dict], ...] = (
    ("Default", {}),
    ("No PE", {"no_pe": True}),
    ("No RC", {"no_residual": True}),
    ("No Dropout", {"no_dropout": True}),
    ("Single head", {"single_head": True}),
    ("0 block", {"blocks": 0}),
    ("2 blocks", {"blocks": 2}),
)


@dataclass
class AblationResult:
    architecture: str
    config: TrainConfig
    auc: float
    loss: float


def run_ablations(
    base: TrainConfig,
    train_set: Dataset,
    test_set: Dataset,
    variants: Sequence[str] | None = None,
    threads: int = 1,
) -> list[AblationResult]:
    """Train every architecture variant on one split with one seed."""
    from .training import train

    results = []
    for name, change in ABLATIONS:
        if variants is not None and name not in variants:
            continue
        cfg = base.replace(**change)
        log.info("ablation %s", name)
        params, history = train(train_set, test_set, cfg, threads=threads)
        test_auc, test_loss = evaluate(params, test_set, cfg)
        results.append(AblationResult(name, cfg, test_auc, test_loss))
    return results


def write_ablation_table(
    results: Sequence[AblationResult], path: str | Path, dataset_name: str = "Synthetic"
) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Architecture", dataset_name])
        for res in results:
            w.writerow([res.architecture, f"{res.auc:.6f}"])
    return path
