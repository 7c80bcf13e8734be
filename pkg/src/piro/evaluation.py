"""Pose-invariant classification and retrieval tasks, mAP, distance diagnostics.

Eight tasks, named ``{sv,mv}_{cat,obj}_{cls,retr}``:

* ``sv_cat_cls`` / ``mv_cat_cls``: softmax argmax of the classifier on one
  view's category embedding / on the multi-view category embedding.
* ``sv_obj_cls``: nearest multi-view object prototype. The query object's own
  prototype is aggregated over all of its views except the query view.
* ``mv_obj_cls``: the query is the multi-view embedding of an object's
  even-indexed views; its own prototype uses the odd-indexed views.
* ``sv_*_retr``: rank every other test view; relevant = same category/object.
* ``mv_*_retr``: the multi-view embedding over all views ranks every test view.

Ties: classification to the lowest category index, recognition to the lowest
object id, retrieval by gallery insertion order (objects sorted by id, then
view index).
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .encoder import EncoderParams, aggregate_space, embed_single_views, encode

TASKS = (
    "sv_cat_cls", "mv_cat_cls", "sv_obj_cls", "mv_obj_cls",
    "sv_cat_retr", "mv_cat_retr", "sv_obj_retr", "mv_obj_retr",
)
CLS_TASKS = TASKS[:4]
RETR_TASKS = TASKS[4:]
REPORT_FORMAT = "piro-eval-report"

_metric = {"type": "number", "minimum": 0.0, "maximum": 1.0}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "metrics", "averages", "diagnostics", "num_objects", "num_queries"],
    "additionalProperties": False,
    "properties": {
        "format": {"const": REPORT_FORMAT},
        "version": {"const": 1},
        "metrics": {
            "type": "object",
            "properties": {t: _metric for t in TASKS},
            "additionalProperties": False,
        },
        "averages": {
            "type": "object",
            "required": ["classification", "retrieval"],
            "additionalProperties": False,
            "properties": {
                "classification": {"anyOf": [_metric, {"type": "null"}]},
                "retrieval": {"anyOf": [_metric, {"type": "null"}]},
            },
        },
        "diagnostics": {
            "type": "object",
            "required": ["d_max_intra", "d_min_inter", "rho"],
            "additionalProperties": False,
            "properties": {
                "d_max_intra": {"type": "number", "minimum": 0},
                "d_min_inter": {"type": ["number", "null"], "minimum": 0},
                "rho": {"type": ["number", "null"], "minimum": 0},
            },
        },
        "num_objects": {"type": "integer", "minimum": 1},
        "num_queries": {"type": "object", "additionalProperties": {"type": "integer"}},
    },
}


def task_from_cli(name: str) -> str:
    task = name.strip().replace("-", "_")
    if task not in TASKS:
        raise ValueError(f"unknown task {name!r}; choose from {', '.join(t.replace('_', '-') for t in TASKS)}")
    return task


# ---------------------------------------------------------------------------
# metrics

def average_precision(relevance: Sequence[int]) -> float:
    """Mean over relevant ranks r of precision@r; 0 when nothing is relevant."""
    hits = 0
    total = 0.0
    for rank, rel in enumerate(relevance, start=1):
        if rel:
            hits += 1
            total += hits / rank
    return total / hits if hits else 0.0


def mean_average_precision(rankings: Sequence[Sequence[int]]) -> float:
    if len(rankings) == 0:
        raise ValueError("mean_average_precision needs at least one query")
    for r in rankings:
        if len(r) == 0:
            raise ValueError("every query needs at least one gallery entry")
    return float(np.mean([average_precision(r) for r in rankings]))


# ---------------------------------------------------------------------------
# galleries and single-query operations

@dataclass
class GalleryIndex:
    embeddings: np.ndarray
    object_ids: list[str]
    category_ids: list[str]
    view_index: list[int]
    is_multiview: list[bool]

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        n = len(self.embeddings)
        if not (len(self.object_ids) == len(self.category_ids) == len(self.view_index) == len(self.is_multiview) == n):
            raise ValueError("gallery fields have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.object_ids)


def rank_gallery(gallery: GalleryIndex, query: np.ndarray, exclude: Sequence[int] = ()) -> np.ndarray:
    """Gallery indices by ascending Euclidean distance; stable on ties."""
    keep = np.ones(len(gallery), dtype=bool)
    keep[list(exclude)] = False
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise ValueError("gallery is empty after excluding the query")
    diff = gallery.embeddings[idx] - np.asarray(query, dtype=np.float64)
    dist = np.sqrt((diff * diff).sum(axis=1))
    return idx[np.argsort(dist, kind="stable")]


def nearest_prototype(prototypes: np.ndarray, query: np.ndarray) -> int:
    if len(prototypes) == 0:
        raise ValueError("empty gallery")
    diff = np.asarray(prototypes) - query
    return int(np.argmin(np.sqrt((diff * diff).sum(axis=1))))


def predict_category(classifier: np.ndarray, embedding: np.ndarray) -> np.ndarray:
    """Argmax of plain softmax logits (the angular margin is train-only)."""
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.shape[-1] != classifier.shape[0]:
        raise ValueError(f"embedding dim {emb.shape[-1]} != classifier rows {classifier.shape[0]}")
    return np.argmax(emb @ classifier, axis=-1)


def _embed(params: EncoderParams, views, mode: str):
    views = np.asarray(views, dtype=np.float64)
    if mode == "single":
        if views.ndim == 1:
            views = views[None, :]
        obj, cat = embed_single_views(params, views)
        return obj.data, cat.data
    if mode == "multi":
        emb = encode(params, views)
        return emb.obj_mv.data[None, :], emb.cat_mv.data[None, :]
    raise ValueError(f"mode must be 'single' or 'multi', got {mode!r}")


def classify_category(params: EncoderParams, classifier: np.ndarray, views, mode: str = "single"):
    """Category index for one view (``single``) or a view set (``multi``).
    In single mode a (V, D) input yields one prediction per view."""
    _, cat = _embed(params, views, mode)
    pred = predict_category(classifier, cat)
    return int(pred[0]) if pred.size == 1 else pred


def recognize_object(params: EncoderParams, gallery: GalleryIndex, views, mode: str = "single") -> str:
    """Object id of the nearest prototype; equidistant prototypes resolve to
    the lowest object id."""
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    obj, _ = _embed(params, views, mode)
    diff = gallery.embeddings - obj[0]
    dist = np.sqrt((diff * diff).sum(axis=1))
    return min(gallery.object_ids[i] for i in np.flatnonzero(dist == dist.min()))


def retrieve(params: EncoderParams, gallery: GalleryIndex, views, space: str = "object",
             mode: str = "single", exclude: Sequence[int] = ()) -> list[int]:
    obj, cat = _embed(params, views, mode)
    query = {"object": obj, "category": cat}[space][0]
    return list(rank_gallery(gallery, query, exclude))


# ---------------------------------------------------------------------------
# split-level embeddings

@dataclass
class SplitEmbeddings:
    """Eval-mode embeddings of a set of objects, sorted by object id."""

    object_ids: list[str]
    category_ids: list[str]
    labels: np.ndarray
    obj_single: list[np.ndarray]
    cat_single: list[np.ndarray]
    obj_mv: np.ndarray
    cat_mv: np.ndarray
    obj_mv_loo: list[np.ndarray] = field(default_factory=list)  # row k: all views but k
    obj_mv_even: np.ndarray | None = None
    obj_mv_odd: np.ndarray | None = None

    def single_gallery(self, space: str) -> GalleryIndex:
        embs = self.obj_single if space == "object" else self.cat_single
        object_ids, category_ids, view_index = [], [], []
        for oid, cid, e in zip(self.object_ids, self.category_ids, embs):
            object_ids += [oid] * len(e)
            category_ids += [cid] * len(e)
            view_index += list(range(len(e)))
        return GalleryIndex(np.concatenate(embs), object_ids, category_ids, view_index, [False] * len(object_ids))

    def prototype_gallery(self) -> GalleryIndex:
        n = len(self.object_ids)
        return GalleryIndex(self.obj_mv, list(self.object_ids), list(self.category_ids), [-1] * n, [True] * n)


def embed_objects(params: EncoderParams, objects, category_index: Mapping[str, int],
                  num_views: int | None = None) -> SplitEmbeddings:
    objects = sorted(objects, key=lambda o: o.object_id)
    if not objects:
        raise ValueError("no objects to embed")
    out = SplitEmbeddings([], [], np.zeros(0, dtype=np.int64), [], [], None, None)
    obj_mv, cat_mv, even, odd = [], [], [], []
    for obj in objects:
        views = obj.views if num_views is None else obj.views[:num_views]
        o, c = embed_single_views(params, views)
        o_mv = aggregate_space(params, o, "obj")
        c_mv = aggregate_space(params, c, "cat")
        out.object_ids.append(obj.object_id)
        out.category_ids.append(obj.category_id)
        out.obj_single.append(o.data)
        out.cat_single.append(c.data)
        obj_mv.append(o_mv.data)
        cat_mv.append(c_mv.data)
        V = len(views)
        if V >= 2:
            loo = np.stack([np.delete(o.data, k, axis=0) for k in range(V)])
            out.obj_mv_loo.append(aggregate_space(params, loo, "obj").data)
            e_mv = aggregate_space(params, o.data[0::2], "obj")
            d_mv = aggregate_space(params, o.data[1::2], "obj")
            even.append(e_mv.data)
            odd.append(d_mv.data)
        else:
            out.obj_mv_loo.append(np.full_like(o.data, np.nan))
            even.append(o_mv.data)
            odd.append(np.full_like(o_mv.data, np.nan))
    out.labels = np.array([category_index[c] for c in out.category_ids], dtype=np.int64)
    out.obj_mv, out.cat_mv = np.stack(obj_mv), np.stack(cat_mv)
    out.obj_mv_even, out.obj_mv_odd = np.stack(even), np.stack(odd)
    return out


# ---------------------------------------------------------------------------
# distance diagnostics

@dataclass
class Diagnostics:
    d_max_intra: float
    d_min_inter: float | None
    rho: float | None

    def as_dict(self) -> dict:
        return {"d_max_intra": self.d_max_intra, "d_min_inter": self.d_min_inter, "rho": self.rho}


def distance_diagnostics(obj_single: Sequence[np.ndarray], obj_mv, category_ids: Sequence[str]) -> Diagnostics:
    """Object-space compactness and separability, averaged over objects.

    intra: max distance from an object's single-view embeddings to its own
    multi-view embedding. inter: min distance from its single-view embeddings
    to those of any other same-category object (objects alone in their
    category are skipped). rho = inter / intra, absent when undefined.
    """
    n = len(obj_single)
    if n == 0:
        raise ValueError("no objects")
    intra = []
    for e, mv in zip(obj_single, obj_mv):
        diff = np.asarray(e) - np.asarray(mv)
        intra.append(float(np.sqrt((diff * diff).sum(axis=1)).max()))
    inter = []
    for i in range(n):
        best = math.inf
        for j in range(n):
            if j == i or category_ids[j] != category_ids[i]:
                continue
            diff = np.asarray(obj_single[i])[:, None, :] - np.asarray(obj_single[j])[None, :, :]
            best = min(best, float(np.sqrt((diff * diff).sum(axis=-1)).min()))
        if best < math.inf:
            inter.append(best)
    d_intra = float(np.mean(intra))
    d_inter = float(np.mean(inter)) if inter else None
    rho = d_inter / d_intra if d_inter is not None and d_intra > 0 else None
    return Diagnostics(d_intra, d_inter, rho)


def track_distances(params: EncoderParams, objects, num_views: int | None = None) -> Diagnostics:
    objects = list(objects)
    if not objects:
        raise ValueError("split is empty")
    singles, mvs, cats = [], [], []
    for obj in objects:
        views = obj.views if num_views is None else obj.views[:num_views]
        emb = encode(params, views)
        singles.append(emb.obj_single.data)
        mvs.append(emb.obj_mv.data)
        cats.append(obj.category_id)
    return distance_diagnostics(singles, mvs, cats)


# ---------------------------------------------------------------------------
# the eight tasks

@dataclass
class EvalReport:
    metrics: dict[str, float]
    diagnostics: Diagnostics
    num_objects: int
    num_queries: dict[str, int]
    per_query: dict[str, list[float]] = field(default_factory=dict)

    def average(self, group: Sequence[str]) -> float | None:
        vals = [self.metrics[t] for t in group if t in self.metrics]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": 1,
            "metrics": {t: self.metrics[t] for t in TASKS if t in self.metrics},
            "averages": {"classification": self.average(CLS_TASKS), "retrieval": self.average(RETR_TASKS)},
            "diagnostics": self.diagnostics.as_dict(),
            "num_objects": self.num_objects,
            "num_queries": {t: self.num_queries[t] for t in TASKS if t in self.num_queries},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def per_query_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["task", "query", "score"])
        for task in TASKS:
            for i, v in enumerate(self.per_query.get(task, [])):
                writer.writerow([task, i, repr(float(v))])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{t:12s} {100 * self.metrics[t]:6.2f}" for t in TASKS if t in self.metrics]
        for name, group in (("avg_cls", CLS_TASKS), ("avg_retr", RETR_TASKS)):
            v = self.average(group)
            if v is not None:
                lines.append(f"{name:12s} {100 * v:6.2f}")
        d = self.diagnostics
        rho = "n/a" if d.rho is None else f"{d.rho:.4f}"
        inter = "n/a" if d.d_min_inter is None else f"{d.d_min_inter:.4f}"
        lines.append(f"d_max_intra={d.d_max_intra:.4f} d_min_inter={inter} rho={rho}")
        return "\n".join(lines)


def _retrieval_scores(queries, gallery: GalleryIndex, key: Sequence[str], query_keys: Sequence[str],
                      excludes: Sequence[Sequence[int]]) -> list[float]:
    keys = np.asarray(key)
    scores = []
    for q, qk, ex in zip(queries, query_keys, excludes):
        order = rank_gallery(gallery, q, ex)
        scores.append(average_precision((keys[order] == qk).astype(int)))
    return scores


def evaluate_embeddings(emb: SplitEmbeddings, classifier: np.ndarray, tasks: Sequence[str] = TASKS) -> EvalReport:
    tasks = [t for t in TASKS if t in set(tasks)]
    per_query: dict[str, list[float]] = {}
    ids = emb.object_ids
    n = len(ids)

    if "sv_cat_cls" in tasks:
        per_query["sv_cat_cls"] = [
            float(p == emb.labels[i]) for i, c in enumerate(emb.cat_single) for p in predict_category(classifier, c)
        ]
    if "mv_cat_cls" in tasks:
        per_query["mv_cat_cls"] = [float(p == l) for p, l in zip(predict_category(classifier, emb.cat_mv), emb.labels)]
    if "sv_obj_cls" in tasks:
        hits = []
        for i, views in enumerate(emb.obj_single):
            for k, q in enumerate(views):
                protos = emb.obj_mv.copy()
                protos[i] = emb.obj_mv_loo[i][k]
                keep = [j for j in range(n) if np.all(np.isfinite(protos[j]))]
                hits.append(float(keep[nearest_prototype(protos[keep], q)] == i))
        per_query["sv_obj_cls"] = hits
    if "mv_obj_cls" in tasks:
        hits = []
        for i in range(n):
            protos = emb.obj_mv.copy()
            protos[i] = emb.obj_mv_odd[i]
            keep = [j for j in range(n) if np.all(np.isfinite(protos[j]))]
            hits.append(float(keep[nearest_prototype(protos[keep], emb.obj_mv_even[i])] == i))
        per_query["mv_obj_cls"] = hits

    for space, short, key_name in (("category", "cat", "category_ids"), ("object", "obj", "object_ids")):
        sv, mv = f"sv_{short}_retr", f"mv_{short}_retr"
        if sv not in tasks and mv not in tasks:
            continue
        gallery = emb.single_gallery(space)
        keys = getattr(gallery, key_name)
        if sv in tasks:
            per_query[sv] = _retrieval_scores(
                gallery.embeddings, gallery, keys, keys, [[g] for g in range(len(gallery))]
            )
        if mv in tasks:
            queries = emb.cat_mv if space == "category" else emb.obj_mv
            per_query[mv] = _retrieval_scores(queries, gallery, keys, getattr(emb, key_name), [[]] * n)

    return EvalReport(
        metrics={t: float(np.mean(per_query[t])) for t in tasks},
        diagnostics=distance_diagnostics(emb.obj_single, emb.obj_mv, emb.category_ids),
        num_objects=n,
        num_queries={t: len(per_query[t]) for t in tasks},
        per_query=per_query,
    )


def evaluate_all(params: EncoderParams, classifier: np.ndarray, dataset, num_views: int | None = None,
                 tasks: Sequence[str] = TASKS, split: str = "test") -> EvalReport:
    """Run the requested tasks on one split; ``num_views`` truncates each
    object to its first V views (default: all)."""
    objects = dataset.split(split)
    if not objects:
        raise ValueError(f"{split} split is empty")
    index = {c: dataset.category_index(c) for c in dataset.categories}
    emb = embed_objects(params, objects, index, num_views)
    return evaluate_embeddings(emb, np.asarray(classifier, dtype=np.float64), tasks)
