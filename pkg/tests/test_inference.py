import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mitosis_mtl.augmentation import DIHEDRAL_GROUP, apply_dihedral
from mitosis_mtl.data import Label, SampleStore, SynthSpec, generate_synthetic
from mitosis_mtl.errors import EmptyEnsemble, MixedSampleIds, UndefinedClassRate
from mitosis_mtl.inference import (
    Confusion,
    PredictionRecord,
    balanced_accuracy,
    ensemble_vote,
    evaluate,
    predict_proba,
    predict_tta,
    write_report,
)
from mitosis_mtl.model import ModelConfig, build_model, prune_auxiliary

from oracles import balanced_accuracy_brute

CFG = ModelConfig(input_size=16, stem_channels=4, stage_channels=(4, 8, 8, 16), cls_hidden=(8, 4), seed=0)


def _pruned(seed=0):
    model = build_model(ModelConfig(**{**CFG.to_dict(), "seed": seed})).eval()
    return prune_auxiliary(model)


def _rec(p, sid="s", mid="m"):
    return PredictionRecord.from_probability(sid, mid, p, 8)


def test_tta_constant_image_equals_single_view():
    model = _pruned()
    patch = np.full((3, 16, 16), 0.4, dtype=np.float32)
    with torch.no_grad():
        single = float(torch.sigmoid(model(torch.from_numpy(patch)[None]))[0])
    assert predict_tta(model, patch) == pytest.approx(single, abs=1e-6)


def test_tta_input_independent_model():
    model = _pruned()
    with torch.no_grad():
        model.cls_head.fc3.weight.zero_()
        model.cls_head.fc3.bias.fill_(-0.8)
    patch = np.random.default_rng(0).uniform(size=(3, 16, 16)).astype(np.float32)
    assert predict_tta(model, patch) == pytest.approx(1 / (1 + math.exp(0.8)), abs=1e-7)


def test_tta_matches_external_loop():
    rng = np.random.default_rng(1)
    for seed in range(3):
        model = _pruned(seed)
        patch = rng.uniform(size=(3, 16, 16)).astype(np.float32)
        views = []
        for t in DIHEDRAL_GROUP:
            view = apply_dihedral(patch, t)
            with torch.no_grad():
                views.append(float(torch.sigmoid(model(torch.from_numpy(view)[None]))[0]))
        assert predict_tta(model, patch) == pytest.approx(sum(views) / 8, abs=1e-6)


def test_tta_off_is_single_view():
    model = _pruned()
    x = np.random.default_rng(2).uniform(size=(2, 3, 16, 16)).astype(np.float32)
    with torch.no_grad():
        direct = torch.sigmoid(model(torch.from_numpy(x))).numpy()
    np.testing.assert_allclose(predict_proba(model, x, tta=False), direct, atol=1e-7)


@pytest.mark.parametrize("t", DIHEDRAL_GROUP)
def test_tta_group_invariance(t):
    model = _pruned(5)
    patch = np.random.default_rng(3).uniform(size=(3, 16, 16)).astype(np.float32)
    assert predict_tta(model, apply_dihedral(patch, t)) == pytest.approx(predict_tta(model, patch), abs=1e-5)


def test_vote_examples():
    assert ensemble_vote([_rec(0.9), _rec(0.8), _rec(0.1)]) == Label.ATYPICAL
    assert ensemble_vote([_rec(0.3)]) == Label.TYPICAL
    assert ensemble_vote([_rec(0.7)]) == Label.ATYPICAL
    # tie: mean p = 0.55
    assert ensemble_vote([_rec(0.9), _rec(0.2)]) == Label.ATYPICAL
    assert ensemble_vote([_rec(0.6), _rec(0.1)]) == Label.TYPICAL


def test_vote_errors():
    with pytest.raises(EmptyEnsemble):
        ensemble_vote([])
    with pytest.raises(MixedSampleIds):
        ensemble_vote([_rec(0.9, "a"), _rec(0.9, "b")])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=7), st.randoms())
def test_vote_order_invariant(ps, rnd):
    recs = [_rec(p, mid=f"m{i}") for i, p in enumerate(ps)]
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    assert ensemble_vote(recs) == ensemble_vote(shuffled)


@pytest.mark.parametrize("n", [3, 5])
def test_vote_strict_majority_exhaustive(n):
    for pattern in itertools.product([0, 1], repeat=n):
        recs = [_rec(0.8 if bit else 0.2, mid=f"m{i}") for i, bit in enumerate(pattern)]
        expected = Label.ATYPICAL if sum(pattern) > n / 2 else Label.TYPICAL
        assert ensemble_vote(recs) == expected


def test_prediction_record_threshold():
    assert _rec(0.5).predicted == Label.ATYPICAL
    assert _rec(0.4999).predicted == Label.TYPICAL


def test_balanced_accuracy_examples():
    assert balanced_accuracy(Confusion(tp=5, fp=0, tn=7, fn=0)) == 1.0
    assert balanced_accuracy(Confusion(tp=0, fp=0, tn=7, fn=5)) == 0.5
    assert balanced_accuracy(Confusion(tp=3, fn=1, tn=2, fp=2)) == pytest.approx(0.625)


def test_balanced_accuracy_undefined():
    with pytest.raises(UndefinedClassRate):
        balanced_accuracy(Confusion(tp=0, fn=0, tn=3, fp=1))
    with pytest.raises(UndefinedClassRate):
        balanced_accuracy(Confusion(tp=2, fn=1, tn=0, fp=0))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(0, 30), st.integers(1, 30), st.integers(0, 30), st.integers(1, 5))
def test_balanced_accuracy_duplication_invariant_and_brute(pos, tp, neg, tn, k):
    tp, tn = min(tp, pos), min(tn, neg)
    c = Confusion(tp=tp, fn=pos - tp, tn=tn, fp=neg - tn)
    ck = Confusion(tp=k * c.tp, fn=k * c.fn, tn=k * c.tn, fp=k * c.fp)
    assert balanced_accuracy(c) == pytest.approx(balanced_accuracy(ck), abs=1e-15)
    truth = [1] * pos + [0] * neg
    pred = [1] * tp + [0] * (pos - tp) + [0] * tn + [1] * (neg - tn)
    assert balanced_accuracy(c) == pytest.approx(balanced_accuracy_brute(truth, pred), abs=1e-15)


class _Oracle(torch.nn.Module):
    """Pruned-model stand-in that looks every view up in the ground truth."""

    def __init__(self, samples):
        super().__init__()
        self.views = {}
        for s in samples.values():
            for t in DIHEDRAL_GROUP:
                self.views[apply_dihedral(s.patch, t).tobytes()] = int(s.label)

    def forward(self, x):
        return torch.tensor([20.0 if self.views[v.numpy().tobytes()] else -20.0 for v in x])


@pytest.fixture(scope="module")
def synth():
    spec = SynthSpec(n_domains=3, per_domain=8, atypical_ratio=0.25, patch_size=16)
    manifest, samples = generate_synthetic(spec, seed=2)
    return manifest, samples


def test_evaluate_perfect_model(synth):
    manifest, samples = synth
    store = SampleStore(manifest, samples)
    report, preds = evaluate([("oracle", _Oracle(samples))], store, domains=["d2"])
    assert report.balanced_accuracy == 1.0
    assert report.per_domain["d2"].total == 8
    assert all(p.n_views == 8 for p in preds)


def test_evaluate_three_copies_equals_single(synth, tmp_path):
    manifest, samples = synth
    store = SampleStore(manifest, samples)
    model = _pruned(1)
    single, _ = evaluate([("a", model)], store)
    triple, _ = evaluate([("a", model), ("b", model), ("c", model)], store)
    assert single.per_domain == triple.per_domain
    assert single.overall == triple.overall


def test_evaluate_totals_match_manifest(synth, tmp_path):
    manifest, samples = synth
    store = SampleStore(manifest, samples)
    report, preds = evaluate([("m", _pruned())], store, tta=False)
    for d, c in report.per_domain.items():
        assert c.total == sum(manifest.class_counts[d].values())
        assert c.tp + c.fn == manifest.class_counts[d][Label.ATYPICAL]
    assert report.overall.total == len(manifest.samples)
    assert {p.n_views for p in preds} == {1}
    write_report(report, tmp_path, preds)
    text = (tmp_path / "report.txt").read_text()
    assert "[domain d0]" in text and "balanced_accuracy:" in text
    header = (tmp_path / "predictions.csv").read_text().splitlines()[0]
    assert header == "sample_id,model_id,p_atypical,predicted,n_views"


def test_evaluate_empty_ensemble(synth):
    manifest, samples = synth
    with pytest.raises(EmptyEnsemble):
        evaluate([], SampleStore(manifest, samples))


def test_evaluate_unknown_domain(synth):
    from mitosis_mtl.errors import MissingDomain

    manifest, samples = synth
    with pytest.raises(MissingDomain):
        evaluate([("m", _pruned())], SampleStore(manifest, samples), domains=["nope"])
