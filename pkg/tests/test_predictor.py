import logging

import numpy as np
import pytest

from linko import autodiff as ad
from linko.cohort import Visit, generate_synthetic, make_samples
from linko.embeddings import MockProvider
from linko.encoder import EncoderConfig
from linko.errors import ConfigError, UnknownCodeError
from linko.experiment import build_predictor, split_records, stream_factory
from linko.metakg import UnifiedIndex, build_metakg
from linko.ontology import ConceptId, OntologySet
from linko.predictor import Batch, BaseModel, TrainConfig, _mean_loss, loss, train_model, visit_embed

from .conftest import tiny_synth
from .gradcheck import check

ENC = dict(d=8, heads_h=2, heads_v=2)


def toy_model(records, onts, seed=0, **enc):
    mkg = build_metakg(records, onts)
    cfg = EncoderConfig(**{**ENC, **enc})
    return build_predictor(mkg, cfg, TrainConfig(max_len=8), seed, MockProvider(0)), mkg


def test_visit_embed_examples(toy_cohort, caplog):
    _, onts = toy_cohort
    idx = UnifiedIndex(onts)
    z = np.random.default_rng(0).normal(size=(idx.n_leaves, 4))
    leaves = idx.levels[-1]
    one = visit_embed(z, Visit.of([leaves[3]]), idx).data
    np.testing.assert_array_equal(one, z[3])
    three = visit_embed(z, Visit.of([leaves[0], leaves[5], leaves[-1]]), idx).data
    np.testing.assert_allclose(three, z[0] + z[5] + z[-1], atol=1e-15)
    mean = visit_embed(z, Visit.of([leaves[0], leaves[5]]), idx, normalize=True).data
    np.testing.assert_allclose(mean, (z[0] + z[5]) / 2)
    with caplog.at_level(logging.WARNING):
        empty = visit_embed(z, Visit.of([]), idx).data
    assert not empty.any() and "empty visit" in caplog.text
    with pytest.raises(UnknownCodeError):
        visit_embed(z, Visit.of([ConceptId("dx", "NOPE", 3)]), idx)


def test_batch_layout(toy_cohort):
    records, onts = toy_cohort
    samples = make_samples(records, onts["dx"])[:5]
    b = Batch.from_samples(samples, UnifiedIndex(onts))
    assert b.visits.shape[:2] == b.mask.shape == (5, max(s.t for s in samples))
    assert b.mask.sum(axis=1).tolist() == [s.t for s in samples]
    assert not b.visits[~b.mask].any()


def test_loss_examples():
    eps = 1e-4
    y = (np.random.default_rng(0).random((3, 5)) < 0.5).astype(float)
    p = np.where(y == 1, 1 - eps, eps)
    assert loss(ad.Tensor(np.log(p / (1 - p))), y).item() == pytest.approx(-np.log(1 - eps), rel=1e-9)
    assert loss(ad.Tensor(np.zeros((3, 5))), y).item() == pytest.approx(np.log(2), rel=1e-15)
    z = np.random.default_rng(1).normal(size=(4, 6)) * 3
    y = (np.random.default_rng(2).random((4, 6)) < 0.3).astype(float)
    s = 1 / (1 + np.exp(-z))
    direct = np.mean(-(y * np.log(s) + (1 - y) * np.log(1 - s)))
    assert abs(loss(ad.Tensor(z), y).item() - direct) <= 1e-12


def test_base_model_single_visit_and_symmetry():
    rng = np.random.default_rng(0)
    model = BaseModel(6, 4, rng)
    v = rng.normal(size=(1, 1, 6))
    a = model(ad.Tensor(v), np.ones((1, 1), bool)).data
    np.testing.assert_array_equal(a, model(ad.Tensor(v), np.ones((1, 1), bool)).data)
    # identical visit vectors at positions 1 and 2 with equal position rows: swapping is a no-op
    model.pos.data[1] = model.pos.data[0]
    x = rng.normal(size=6)
    w = rng.normal(size=6)
    seq = ad.Tensor(np.stack([[x, x, w]]))
    swapped = ad.Tensor(np.stack([[x, x, w]])[:, [1, 0, 2]])
    m = np.ones((1, 3), bool)
    np.testing.assert_array_equal(model(seq, m).data, model(swapped, m).data)
    with pytest.raises(ConfigError):
        model(ad.Tensor(np.zeros((1, 5, 6))), np.ones((1, 5), bool))


def test_padding_does_not_change_the_output():
    rng = np.random.default_rng(3)
    model = BaseModel(4, 6, rng)
    v = rng.normal(size=(1, 2, 4))
    short = model(ad.Tensor(v), np.ones((1, 2), bool)).data
    padded = np.concatenate([v, rng.normal(size=(1, 3, 4))], axis=1)
    mask = np.array([[True, True, False, False, False]])
    np.testing.assert_allclose(model(ad.Tensor(padded), mask).data, short, atol=1e-14)


def test_base_model_gradients():
    rng = np.random.default_rng(5)
    model = BaseModel(4, 5, rng)
    v = ad.parameter(rng.normal(size=(2, 3, 4)), "v")
    mask = np.array([[True, True, True], [True, True, False]])
    errs = check(lambda: ad.tsum(ad.mul(model(v, mask), model(v, mask))),
                 {"v": v, **model.named_parameters()})
    assert max(errs.values()) < 1e-4, errs


def test_full_model_gradients(toy_cohort):
    records, onts = toy_cohort
    model, _ = toy_model(records, onts, d=4, dropout_h=0.0, dropout_v=0.0)
    batch = Batch.from_samples(make_samples(records, onts["dx"])[:6], model.index)
    errs = check(lambda: loss(model.logits(batch), batch.targets), model.named_parameters())
    assert max(errs.values()) < 1e-4, {k: v for k, v in errs.items() if v >= 1e-4}


FIXTURES = {
    "toy": (tiny_synth(), 7, {}),
    "twenty": (tiny_synth(n_patients=20), 11, {}),
    "hypergraph": (tiny_synth(n_patients=20), 3, {"leaf_hmp_mode": "hypergraph"}),
}


@pytest.mark.parametrize("fixture", sorted(FIXTURES))
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_five_epochs_reduce_training_loss(fixture, seed):
    synth, data_seed, enc = FIXTURES[fixture]
    records, onts = generate_synthetic(synth, data_seed)
    onts = OntologySet(onts)
    model, _ = toy_model(records, onts, seed, **enc)
    samples = make_samples(records, onts["dx"])
    streams = stream_factory(seed)
    cfg = TrainConfig(max_epochs=5, patience=100, batch_size=8, lr=1e-2, max_len=8)
    result = train_model(model, samples, samples, cfg, streams("shuffle"), streams("dropout"))
    assert len(result.epoch_losses) == 5
    assert _mean_loss(model, samples, 8) < result.initial_loss


def test_training_is_deterministic(toy_cohort):
    records, onts = toy_cohort
    samples = make_samples(records, onts["dx"])
    runs = []
    for _ in range(2):
        model, _ = toy_model(records, onts, 4)
        streams = stream_factory(4)
        res = train_model(model, samples, samples, TrainConfig(max_epochs=3, max_len=8), streams("shuffle"),
                          streams("dropout"))
        runs.append((res.epoch_losses, res.val_auprc, model.predict(samples).tobytes()))
    assert runs[0] == runs[1]


def test_best_state_and_early_stop(toy_cohort, monkeypatch):
    records, onts = toy_cohort
    samples = make_samples(records, onts["dx"])
    model, _ = toy_model(records, onts)
    scores = iter([0.3, 0.5, 0.4, 0.45, 0.2, 0.9])
    monkeypatch.setattr("linko.predictor.average_precision", lambda *a: next(scores))
    streams = stream_factory(0)
    res = train_model(model, samples, samples, TrainConfig(max_epochs=10, patience=3, max_len=8),
                      streams("shuffle"), streams("dropout"))
    assert res.best_epoch == 2 and res.best_val_auprc == 0.5
    assert len(res.val_auprc) == 5  # three epochs without improvement after epoch 2
    assert any(not np.array_equal(res.best_state[k], v) for k, v in model.state_dict().items())


def test_divergence_keeps_last_good_state(toy_cohort, monkeypatch):
    records, onts = toy_cohort
    samples = make_samples(records, onts["dx"])
    model, _ = toy_model(records, onts)
    per_epoch = -(-len(samples) // 8)
    calls = {"n": 0}
    real_step = ad.Adam.step

    def flaky(self, grads=None):
        calls["n"] += 1
        return False if calls["n"] > per_epoch + 1 else real_step(self, grads)

    monkeypatch.setattr(ad.Adam, "step", flaky)
    streams = stream_factory(0)
    res = train_model(model, samples, samples, TrainConfig(max_epochs=5, batch_size=8, max_len=8),
                      streams("shuffle"), streams("dropout"))
    assert res.diverged
    assert res.best_epoch == 1 and len(res.val_auprc) == 1


def test_empty_splits_rejected(toy_cohort):
    records, onts = toy_cohort
    samples = make_samples(records, onts["dx"])
    model, _ = toy_model(records, onts)
    streams = stream_factory(0)
    with pytest.raises(ConfigError):
        train_model(model, [], samples, TrainConfig(), streams("a"), streams("b"))
    with pytest.raises(ConfigError):
        train_model(model, samples, [], TrainConfig(), streams("a"), streams("b"))


def test_split_records_fraction(toy_cohort):
    records, _ = toy_cohort
    full = split_records(records)
    part = split_records(records, train_fraction=0.5, subsample_rng=np.random.default_rng(0))
    assert part[1] == full[1] and part[2] == full[2]
    assert len(part[0]) == round(0.5 * len(full[0]))
    assert set(r.patient_id for r in part[0]) <= set(r.patient_id for r in full[0])
    with pytest.raises(ConfigError):
        split_records(records, train_fraction=0.0)
