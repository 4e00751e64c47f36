from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vtar.data import Dataset, ManifestEntry, gen_synthetic
from vtar.errors import DataError, DomainError, SpecError
from vtar.evaluation import (AblationSpec, ConfusionMatrix, MergeSpec, ablate_prompts, ablation_csv, ablation_json,
                             compute_metrics, evaluate, merge_classes, metrics_csv, split_dataset)
from vtar.model import ModelConfig, VideoTextModel
from vtar.presets import TASK_LABELS, task_spec

LABELS = ["a", "b", "c", "d"]


def cm(counts, labels=None):
    counts = np.asarray(counts)
    return ConfusionMatrix(counts, labels or LABELS[:len(counts)])


# -- metrics ------------------------------------------------------------------------------

def test_diagonal_is_perfect():
    m = compute_metrics(cm(np.diag([3, 1, 4])))
    assert (m.accuracy, m.precision_macro, m.recall_macro, m.f1_macro) == (1.0, 1.0, 1.0, 1.0)


def test_two_class_hand_values():
    m = compute_metrics(cm([[5, 5], [0, 10]]))
    assert m.accuracy == 0.75
    assert m.per_class["a"]["precision"] == 1.0 and m.per_class["a"]["recall"] == 0.5
    assert m.per_class["b"]["precision"] == pytest.approx(2 / 3) and m.per_class["b"]["recall"] == 1.0
    assert m.precision_macro == pytest.approx(5 / 6)
    assert m.recall_macro == 0.75


def test_absent_class_counts_as_zero():
    m = compute_metrics(cm([[4, 0, 0], [1, 3, 0], [0, 0, 0]]))
    assert m.per_class["c"] == {"precision": 0.0, "recall": 0.0, "f1": 0.0, "support": 0}
    assert m.recall_macro == pytest.approx((1.0 + 0.75 + 0.0) / 3)


def test_from_pairs_hand_count():
    c = ConfusionMatrix.from_pairs([0, 1, 1, 1], [0, 0, 1, 1], ["A", "B"])
    assert c.counts.tolist() == [[1, 0], [1, 2]]
    assert compute_metrics(c).accuracy == 0.75


def test_empty_matrix_rejected():
    with pytest.raises(DomainError):
        compute_metrics(cm(np.zeros((2, 2), dtype=int)))


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        cm([[1, -1], [0, 1]])


def _brute(truth, pred, k):
    acc = sum(t == p for t, p in zip(truth, pred)) / len(truth)
    ps, rs, fs = [], [], []
    for c in range(k):
        tp = sum(1 for t, p in zip(truth, pred) if t == c and p == c)
        predicted = sum(1 for p in pred if p == c)
        actual = sum(1 for t in truth if t == c)
        p_ = tp / predicted if predicted else 0.0
        r_ = tp / actual if actual else 0.0
        ps.append(p_)
        rs.append(r_)
        fs.append(2 * p_ * r_ / (p_ + r_) if p_ + r_ else 0.0)
    return acc, sum(ps) / k, sum(rs) / k, sum(fs) / k, ps, rs


def test_metrics_against_brute_force_recount():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(1, 7))
        counts = rng.integers(0, 6, size=(k, k)) * (rng.random((k, k)) < 0.7)
        if counts.sum() == 0:
            counts[0, 0] = 1
        truth = np.repeat(np.repeat(np.arange(k), k), counts.ravel()).tolist()
        pred = np.repeat(np.tile(np.arange(k), k), counts.ravel()).tolist()
        c = ConfusionMatrix.from_pairs(truth, pred, [str(i) for i in range(k)])
        assert np.array_equal(c.counts, counts)
        m = compute_metrics(c)
        acc, p, r, f, ps, rs = _brute(truth, pred, k)
        assert m.accuracy == acc
        assert abs(m.precision_macro - p) <= 1e-12
        assert abs(m.recall_macro - r) <= 1e-12
        assert abs(m.f1_macro - f) <= 1e-12
        for i in range(k):
            assert abs(m.per_class[str(i)]["precision"] - ps[i]) <= 1e-12
            assert abs(m.per_class[str(i)]["recall"] - rs[i]) <= 1e-12


square = st.integers(1, 6).flatmap(lambda k: arrays(np.int64, (k, k), elements=st.integers(0, 20)))


@settings(max_examples=200, deadline=None)
@given(square, st.randoms(use_true_random=False))
def test_label_permutation(counts, rnd):
    if counts.sum() == 0:
        return
    k = len(counts)
    labels = [f"l{i}" for i in range(k)]
    perm = list(range(k))
    rnd.shuffle(perm)
    m = compute_metrics(ConfusionMatrix(counts, labels))
    mp = compute_metrics(ConfusionMatrix(counts[np.ix_(perm, perm)], [labels[i] for i in perm]))
    assert mp.per_class == m.per_class
    assert mp.accuracy == m.accuracy
    for name in ("precision_macro", "recall_macro", "f1_macro"):
        assert getattr(mp, name) == pytest.approx(getattr(m, name), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(square)
def test_metric_ranges_and_f1(counts):
    if counts.sum() == 0:
        return
    m = compute_metrics(ConfusionMatrix(counts, [str(i) for i in range(len(counts))]))
    for v in (m.accuracy, m.precision_macro, m.recall_macro, m.f1_macro):
        assert 0 <= v <= 1
    for pc in m.per_class.values():
        p, r = pc["precision"], pc["recall"]
        assert pc["f1"] == pytest.approx(2 * p * r / (p + r) if p + r else 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_balanced_accuracy_is_mean_recall(k, per_class, seed):
    rng = np.random.default_rng(seed)
    counts = np.stack([rng.multinomial(per_class, np.ones(k) / k) for _ in range(k)])
    m = compute_metrics(ConfusionMatrix(counts, [str(i) for i in range(k)]))
    assert m.accuracy == pytest.approx(m.recall_macro, abs=1e-12)


# -- merging ------------------------------------------------------------------------------

def test_identity_merge_is_unchanged():
    c = cm([[3, 1], [2, 4]])
    merged = merge_classes(c, MergeSpec.identity(c.labels))
    assert np.array_equal(merged.counts, c.counts) and merged.labels == c.labels


def test_total_merge():
    merged = merge_classes(cm([[8, 2], [3, 7]]), MergeSpec({"all": ["a", "b"]}))
    assert merged.counts.tolist() == [[20]] and merged.accuracy == 1.0


def test_push_pull_merge_gain():
    labels = ["lift", "carry", "push", "pull"]
    counts = np.array([[10, 1, 0, 0], [0, 9, 1, 0], [0, 0, 6, 3], [1, 0, 4, 5]])
    c = ConfusionMatrix(counts, labels)
    merged = merge_classes(c, MergeSpec.with_singletons({"push or pull": ["push", "pull"]}, labels))
    assert merged.labels == ["lift", "carry", "push or pull"]
    assert merged.accuracy - c.accuracy == pytest.approx((3 + 4) / counts.sum())


def test_merge_unknown_label():
    with pytest.raises(SpecError):
        merge_classes(cm([[1, 0], [0, 1]]), MergeSpec({"x": ["a", "zzz"], "b": ["b"]}))


def test_merge_must_cover():
    with pytest.raises(SpecError):
        merge_classes(cm([[1, 0], [0, 1]]), MergeSpec({"x": ["a"]}))


def test_merge_groups_disjoint():
    with pytest.raises(SpecError):
        MergeSpec({"x": ["a", "b"], "y": ["b"]})


@settings(max_examples=300, deadline=None)
@given(square, st.randoms(use_true_random=False))
def test_merge_monotonicity(counts, rnd):
    if counts.sum() == 0:
        return
    k = len(counts)
    labels = [f"l{i}" for i in range(k)]
    groups: dict = {}
    for lab in labels:
        groups.setdefault(f"g{rnd.randrange(k)}", []).append(lab)
    c = ConfusionMatrix(counts, labels)
    merged = merge_classes(c, MergeSpec(groups))
    assert merged.total == c.total
    assert merged.accuracy >= c.accuracy
    within = sum(counts[labels.index(a), labels.index(b)] for g in groups.values() for a in g for b in g if a != b)
    if within > 0:
        assert merged.accuracy > c.accuracy


# -- splitting ------------------------------------------------------------------------------

def _toy_dataset(per_label):
    entries = []
    for lab, n in per_label.items():
        entries += [ManifestEntry(f"{lab}{i}.vclp", lab, 0, 4) for i in range(n)]
    return Dataset(".", entries)


def test_split_sixty_percent():
    train, held = split_dataset(_toy_dataset({"x": 10, "y": 10}), 0.6, seed=0)
    for lab in "xy":
        assert sum(e.label == lab for e in held.entries) == 6
        assert sum(e.label == lab for e in train.entries) == 4


def test_split_deterministic_partition():
    ds = _toy_dataset({"x": 7, "y": 3, "z": 12})
    a = split_dataset(ds, 0.6, seed=4)
    b = split_dataset(ds, 0.6, seed=4)
    assert [e.clip_path for e in a[1].entries] == [e.clip_path for e in b[1].entries]
    train, held = {e.clip_path for e in a[0].entries}, {e.clip_path for e in a[1].entries}
    assert not train & held
    assert train | held == {e.clip_path for e in ds.entries}


def test_split_single_clip_goes_to_train():
    with pytest.warns(UserWarning, match="single clip"):
        train, held = split_dataset(_toy_dataset({"x": 1, "y": 5}), 0.6, seed=0)
    assert [e.label for e in train.entries].count("x") == 1
    assert "x" not in held.labels


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.2])
def test_split_bad_fraction(frac):
    with pytest.raises(ValueError):
        split_dataset(_toy_dataset({"x": 3}), frac)


# -- evaluate and ablate ------------------------------------------------------------------------

SMALL = dict(embed_dim=16, text_layers=1, frame_layers=1, temporal_layers=1, heads=2, frames_per_clip=8)


@pytest.fixture(scope="module")
def corpus():
    return gen_synthetic(task_spec(0, clips_per_class=3))


@pytest.fixture(scope="module")
def model():
    return VideoTextModel(ModelConfig(**SMALL))


def test_evaluate_counts_every_clip(model, corpus):
    c, m = evaluate(model, corpus, TASK_LABELS)
    assert c.total == len(corpus) and c.labels == TASK_LABELS
    assert m.accuracy == pytest.approx(np.trace(c.counts) / len(corpus))


def test_evaluate_deterministic(model, corpus):
    a, _ = evaluate(model, corpus, TASK_LABELS, sample_seed=3)
    b, _ = evaluate(model, corpus, TASK_LABELS, sample_seed=3)
    assert np.array_equal(a.counts, b.counts)


def test_evaluate_unknown_label(model, corpus):
    with pytest.raises(DataError, match="pulling a box"):
        evaluate(model, corpus, TASK_LABELS[:3])


def test_evaluate_empty(model, corpus):
    with pytest.raises(DomainError):
        evaluate(model, corpus.subset([]), TASK_LABELS)


def test_evaluate_all_correct_is_identity(monkeypatch, model, corpus):
    import vtar.evaluation as ev
    truth = [TASK_LABELS.index(e.label) for e in corpus.entries]
    monkeypatch.setattr(ev, "predict", lambda *a, **k: np.array(truth))
    c, m = evaluate(model, corpus, TASK_LABELS)
    assert m.accuracy == 1.0 and np.array_equal(c.counts, np.diag(np.bincount(truth)))


def test_ablation_identical_variants(model, corpus):
    rows = ablate_prompts(model, corpus, AblationSpec({"one": TASK_LABELS, "two": list(TASK_LABELS)}), TASK_LABELS)
    assert rows[0].metrics == rows[1].metrics


def test_ablation_single_variant(model, corpus):
    rows = ablate_prompts(model, corpus, AblationSpec({"only": TASK_LABELS}), TASK_LABELS)
    assert len(rows) == 1


def test_ablation_sorted_and_serialised(model, corpus):
    variants = {"matched": TASK_LABELS, "verbs": ["lift", "carry", "push", "pull"],
                "shuffled": TASK_LABELS[1:] + TASK_LABELS[:1], "x": ["w", "x", "y", "z"]}
    rows = ablate_prompts(model, corpus, AblationSpec(variants), TASK_LABELS)
    accs = [r.metrics.accuracy for r in rows]
    assert accs == sorted(accs, reverse=True)
    assert len(ablation_csv(rows).splitlines()) == 5
    assert [r["variant"] for r in json.loads(ablation_json(rows))] == [r.name for r in rows]


def test_ablation_arity():
    with pytest.raises(SpecError):
        AblationSpec({"a": ["x", "y"], "b": ["x"]})


def test_ablation_spec_from_json():
    spec = AblationSpec.from_json([{"name": "a", "prompts": ["x"]}, {"name": "b", "prompts": ["y"]}])
    assert list(spec.variants) == ["a", "b"]
    with pytest.raises(SpecError):
        AblationSpec.from_json([{"name": "a", "prompts": ["x"]}, {"name": "a", "prompts": ["y"]}])


def test_ablation_label_count_mismatch(model, corpus):
    with pytest.raises(SpecError):
        ablate_prompts(model, corpus, AblationSpec({"a": ["x", "y"]}), TASK_LABELS)


def test_text_outputs():
    c = cm([[5, 5], [0, 10]])
    table = c.to_text().splitlines()
    assert len({len(line) for line in table if "|" in line}) == 1
    rows = metrics_csv(compute_metrics(c)).splitlines()
    assert rows[0] == "class,precision,recall,f1,support" and rows[-1].startswith("macro,")
