import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, strategies as st

from piro.data import Dataset, ObjectRecord
from piro.encoder import EncoderConfig, identity_encoder, init_encoder
from piro.evaluation import (
    CLS_TASKS, REPORT_SCHEMA, RETR_TASKS, TASKS, GalleryIndex, average_precision, classify_category,
    embed_objects, evaluate_all, mean_average_precision, predict_category, rank_gallery, recognize_object,
    retrieve, task_from_cli,
)

from oracles import brute_ap, brute_evaluate, brute_rank


def test_ap_examples():
    assert math.isclose(average_precision([1, 0, 1]), 0.5 * (1 + 2 / 3), rel_tol=1e-15)
    assert average_precision([1, 1, 0, 0]) == 1.0
    assert average_precision([0, 0, 0]) == 0.0
    assert math.isclose(mean_average_precision([[1, 0, 1], [0, 0]]), (0.5 * (1 + 2 / 3)) / 2, rel_tol=1e-15)
    with pytest.raises(ValueError):
        mean_average_precision([])
    with pytest.raises(ValueError):
        mean_average_precision([[]])


@given(st.lists(st.booleans(), min_size=1, max_size=30))
def test_ap_matches_oracle(rel):
    assert abs(average_precision(rel) - brute_ap(rel)) <= 1e-12


def gallery(embs):
    n = len(embs)
    return GalleryIndex(np.array(embs, dtype=float), [f"o{i}" for i in range(n)], ["c"] * n, list(range(n)), [False] * n)


def test_ranking_examples():
    g = gallery([[0.1], [0.1], [0.5]])
    assert list(rank_gallery(g, np.array([0.0]))) == [0, 1, 2]
    assert list(rank_gallery(gallery([[3.0]]), np.array([0.0]))) == [0]
    with pytest.raises(ValueError):
        rank_gallery(gallery([[1.0]]), np.array([0.0]), exclude=[0])


def test_ranking_matches_full_sort_and_is_scale_invariant():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        E = rng.normal(size=(5, 3))
        q = rng.normal(size=3)
        order = list(rank_gallery(gallery(E), q))
        assert order == brute_rank(list(E), q)
        assert order == list(rank_gallery(gallery(E * 3.7), q * 3.7))


def test_classify_examples():
    W = np.eye(3)
    assert int(predict_category(W, np.array([2.0, 1.0, 1.0]))) == 0
    assert int(predict_category(W, np.array([1.0, 1.0, 0.0]))) == 0  # tie -> lowest id
    rng = np.random.default_rng(0)
    cols = rng.normal(size=(3, 4))
    W = cols / np.linalg.norm(cols, axis=0)
    x = rng.normal(size=3)
    assert predict_category(W, x) == predict_category(W, 5.0 * x)
    with pytest.raises(ValueError):
        predict_category(np.eye(3), np.ones(2))


def test_classify_multi_of_identical_views_equals_single():
    params = identity_encoder(3)
    W = np.random.default_rng(1).normal(size=(3, 4))
    v = np.array([0.2, 1.0, 0.3])
    assert classify_category(params, W, np.tile(v, (4, 1)), "multi") == classify_category(params, W, v, "single")


def test_recognize_examples():
    params = identity_encoder(2)
    g = gallery([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]])
    assert recognize_object(params, g, np.array([1.0, 1.0])) == "o1"
    tie = GalleryIndex(np.array([[0.0, 0.0], [2.0, 0.0]]), ["b", "a"], ["c", "c"], [0, 0], [True, True])
    assert recognize_object(params, tie, np.array([1.0, 0.0])) == "a"
    with pytest.raises(ValueError):
        recognize_object(params, GalleryIndex(np.zeros((0, 2)), [], [], [], []), np.zeros(2))
    for seed in range(30):
        rng = np.random.default_rng(seed)
        P = np.abs(rng.normal(size=(3, 2)))
        q = np.abs(rng.normal(size=2))
        expect = min(range(3), key=lambda i: (np.linalg.norm(P[i] - q), i))
        assert recognize_object(params, gallery(P), q) == f"o{expect}"


def test_retrieve_excludes():
    params = identity_encoder(1)
    g = gallery([[0.0], [0.2], [0.1]])
    assert retrieve(params, g, np.array([0.0]), exclude=[0]) == [2, 1]


def test_task_names():
    assert task_from_cli("sv-obj-retr") == "sv_obj_retr"
    with pytest.raises(ValueError):
        task_from_cli("sv-obj")


def perfect_fixture(n_cat=3, n_obj=2, V=3):
    """Object j has one-hot view e_j plus 2 * one-hot of its category block."""
    n = n_cat * n_obj
    dim = n + n_cat
    objects, cats = [], {f"c{c}": f"cat{c}" for c in range(n_cat)}
    for c in range(n_cat):
        for j in range(n_obj):
            idx = c * n_obj + j
            v = np.zeros(dim)
            v[idx] = 1.0
            v[n + c] = 2.0
            objects.append(ObjectRecord(f"o{idx:02d}", f"c{c}", np.tile(v, (V, 1)), "test"))
    W = np.zeros((dim, n_cat))
    for c in range(n_cat):
        W[n + c, c] = 1.0
    return Dataset(cats, objects), identity_encoder(dim), W


def test_perfect_fixture_scores_one():
    ds, params, W = perfect_fixture()
    report = evaluate_all(params, W, ds)
    assert report.metrics == {t: 1.0 for t in TASKS}
    doc = report.to_dict()
    jsonschema.validate(doc, REPORT_SCHEMA)
    assert doc["averages"]["classification"] == 1.0 and doc["averages"]["retrieval"] == 1.0


def random_case(seed):
    rng = np.random.default_rng(seed)
    n_cat = int(rng.integers(1, 5))
    cfg = EncoderConfig(input_dim=4, backbone_widths=(5,), d_obj=3, d_cat=3, dropout_rate=0.0)
    params = init_encoder(cfg, rng, head_gain=1.0)
    W = rng.normal(size=(3, n_cat))
    cats = {f"k{c}": f"cat{c}" for c in rng.permutation(n_cat)}
    objects = []
    for cid in cats:
        for _ in range(int(rng.integers(1, 5))):
            oid = f"x{int(rng.integers(10**6)):06d}"
            while any(o.object_id == oid for o in objects):
                oid += "a"
            objects.append(ObjectRecord(oid, cid, rng.normal(size=(int(rng.integers(2, 5)), 4)), "test"))
    rng.shuffle(objects)
    return Dataset(cats, objects), params, W


def test_evaluate_all_matches_brute_force_oracle():
    for seed in range(500):
        ds, params, W = random_case(seed)
        report = evaluate_all(params, W, ds)
        ref = brute_evaluate(params.tensors, 1, W, [(o.object_id, o.category_id, o.views) for o in ds.objects],
                             list(ds.categories))
        for t in TASKS:
            assert abs(report.metrics[t] - ref[t]) <= 1e-12, (seed, t, report.metrics[t], ref[t])


def test_report_structure_and_averages():
    ds, params, W = random_case(3)
    report = evaluate_all(params, W, ds)
    doc = report.to_dict()
    jsonschema.validate(doc, REPORT_SCHEMA)
    assert math.isclose(doc["averages"]["classification"], np.mean([report.metrics[t] for t in CLS_TASKS]))
    assert math.isclose(doc["averages"]["retrieval"], np.mean([report.metrics[t] for t in RETR_TASKS]))
    n_views = sum(o.num_views for o in ds.objects)
    assert doc["num_queries"]["sv_obj_retr"] == n_views and doc["num_queries"]["mv_obj_cls"] == len(ds.objects)
    sub = evaluate_all(params, W, ds, tasks=["sv_obj_retr"])
    assert list(sub.to_dict()["metrics"]) == ["sv_obj_retr"]
    assert sub.metrics["sv_obj_retr"] == report.metrics["sv_obj_retr"]
    assert "sv_obj_retr" in report.summary()
    csv_lines = report.per_query_csv().splitlines()
    assert csv_lines[0] == "task,query,score" and len(csv_lines) == 1 + sum(doc["num_queries"].values())


def test_single_view_retrieval_never_returns_the_query():
    ds, params, _ = random_case(11)
    emb = embed_objects(params, ds.objects, {c: i for i, c in enumerate(ds.categories)})
    g = emb.single_gallery("object")
    for i in range(len(g)):
        assert i not in rank_gallery(g, g.embeddings[i], exclude=[i])


def test_metrics_invariant_under_common_rescaling():
    ds, params, W = random_case(5)
    a = evaluate_all(params, W, ds, tasks=RETR_TASKS)
    scaled = dict(params.tensors)
    for name in ("head_obj.weight", "head_obj.bias", "head_cat.weight", "head_cat.bias"):
        scaled[name] = scaled[name] * 2.0
    for space in ("obj", "cat"):
        # doubling the heads scales attention scores by 4; the query projection undoes it
        scaled[f"attn_{space}.query"] = scaled[f"attn_{space}.query"] / 4.0
    from piro.encoder import EncoderParams
    b = evaluate_all(EncoderParams(params.config, scaled), W, ds, tasks=RETR_TASKS)
    for t in RETR_TASKS:
        assert abs(a.metrics[t] - b.metrics[t]) <= 1e-12


def test_evaluate_all_empty_split():
    ds, params, W = random_case(0)
    with pytest.raises(ValueError):
        evaluate_all(params, W, ds, split="train")
