"""Seeded end-to-end runs: split, Meta-KG, encoder, training, test metrics."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .cohort import PatientRecord, make_samples, split_patients
from .encoder import ABLATIONS, EncoderConfig, EncoderGraphs, LinkoEncoder, init_embeddings
from .errors import ConfigError
from .metakg import MetaKG, build_metakg
from .metrics import MetricsReport, evaluate, frequency_bands
from .ontology import OntologySet
from .predictor import LinkoPredictor, TrainConfig, TrainResult, train_model

logger = logging.getLogger(__name__)


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose under one root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))]))


def stream_factory(seed: int):
    return lambda name: rng_stream(seed, name)


@dataclass
class RunResult:
    seed: int
    metrics: dict
    train: TrainResult
    model: LinkoPredictor
    mkg: MetaKG
    counts: dict  # patients and samples per split


def split_records(records, split_seed=0, fold_count=5, train_fraction=1.0, subsample_rng=None):
    """Fold 0 of the patient split, with the training patients optionally subsampled.

    The split depends on ``split_seed`` only, so every training seed and
    every ablation sees the same validation and test patients.
    """
    if not 0.0 < train_fraction <= 1.0:
        raise ConfigError("train_fraction must be in (0, 1]")
    train_ids, val_ids, test_ids = split_patients([r.patient_id for r in records], fold_count, split_seed)[0]
    if train_fraction < 1.0:
        if subsample_rng is None:
            raise ValueError("subsampling needs an rng")
        keep = max(1, int(round(train_fraction * len(train_ids))))
        pick = np.sort(subsample_rng.permutation(len(train_ids))[:keep])
        train_ids = [train_ids[i] for i in pick]
    by_id = {r.patient_id: r for r in records}
    return tuple([by_id[i] for i in ids] for ids in (train_ids, val_ids, test_ids))


def build_predictor(mkg: MetaKG, enc_cfg: EncoderConfig, train_cfg: TrainConfig, seed: int, provider=None,
                    cache=None, provider_id=None, tables=None) -> LinkoPredictor:
    """Freshly initialised model for ``seed``; ``tables`` bypasses embedding initialisation."""
    streams = stream_factory(seed)
    if tables is None:
        tables = init_embeddings(mkg.index, enc_cfg, streams("init.tables"), provider, cache, provider_id)
    encoder = LinkoEncoder(tables, enc_cfg, streams)
    graphs = EncoderGraphs.from_metakg(mkg, enc_cfg)
    return LinkoPredictor(encoder, graphs, mkg.index, train_cfg.max_len, streams("init.predictor"),
                          train_cfg.normalize_visits)


def test_metrics(model: LinkoPredictor, train, test) -> dict:
    """Test-fold metrics with frequency bands taken from the training targets."""
    bands = frequency_bands(np.vstack([s.target for s in train]))
    return evaluate(model.predict(test), np.vstack([s.target for s in test]), bands)


def run_experiment(records: list[PatientRecord], ontologies: OntologySet, enc_cfg: EncoderConfig,
                   train_cfg: TrainConfig, seed: int, split_seed: int = 0, fold_count: int = 5,
                   train_fraction: float = 1.0, provider=None, cache=None, provider_id=None,
                   mkg: MetaKG | None = None) -> RunResult:
    """Train on fold 0 with ``seed`` and report test metrics.

    The Meta-KG is built from the (possibly subsampled) training patients
    unless a prebuilt one is passed; a prebuilt graph is only accepted for
    the full training set.
    """
    if not isinstance(ontologies, OntologySet):
        ontologies = OntologySet(ontologies)
    enc_cfg.validate()
    streams = stream_factory(seed)
    tr_rec, va_rec, te_rec = split_records(records, split_seed, fold_count, train_fraction, streams("subsample"))
    dx = ontologies["dx"]
    train, val, test = (make_samples(r, dx) for r in (tr_rec, va_rec, te_rec))
    if not (train and val and test):
        raise ConfigError(f"a split has no samples (train {len(train)}, val {len(val)}, test {len(test)})")
    if mkg is None:
        mkg = build_metakg(tr_rec, ontologies, enc_cfg.taus)
    elif train_fraction < 1.0:
        raise ConfigError("a prebuilt Meta-KG cannot be reused for a subsampled training set")
    model = build_predictor(mkg, enc_cfg, train_cfg, seed, provider, cache, provider_id)
    result = train_model(model, train, val, train_cfg, streams("shuffle"), streams("dropout"))
    model.load_state_dict(result.best_state)
    metrics = test_metrics(model, train, test)
    counts = {
        "train_patients": len(tr_rec), "val_patients": len(va_rec), "test_patients": len(te_rec),
        "train_samples": len(train), "val_samples": len(val), "test_samples": len(test),
    }
    logger.info("seed %d: test auprc %.4f (best epoch %d)", seed, metrics["auprc"], result.best_epoch)
    return RunResult(seed, metrics, result, model, mkg, counts)


def run_seeds(records, ontologies, enc_cfg, train_cfg, seeds, **kwargs) -> tuple[MetricsReport, list[RunResult]]:
    report = MetricsReport()
    runs = []
    for seed in seeds:
        run = run_experiment(records, ontologies, enc_cfg, train_cfg, seed, **kwargs)
        report.add(seed, run.metrics, epochs_to_best=run.train.best_epoch, **run.counts)
        runs.append(run)
    return report, runs


def ablation_config(base: EncoderConfig, name: str) -> EncoderConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return replace(base, **ABLATIONS[name])


def ablate(records, ontologies, enc_cfg, train_cfg, seeds, names=tuple(ABLATIONS), **kwargs) -> dict:
    """One MetricsReport per ablation row; rows without prompt initialisation ignore the provider."""
    return {
        name: run_seeds(records, ontologies, ablation_config(enc_cfg, name), train_cfg, seeds, **kwargs)[0]
        for name in names
    }


def sweep_trainsize(records, ontologies, enc_cfg, train_cfg, seeds, fractions=(0.2, 0.4, 0.6, 0.8, 1.0),
                    **kwargs) -> dict:
    return {
        float(f): run_seeds(records, ontologies, enc_cfg, train_cfg, seeds, train_fraction=float(f), **kwargs)[0]
        for f in fractions
    }


def comparison_table(reports: dict, metric: str = "auprc") -> str:
    """Rows of ``name  mean  ci  per-seed...`` for a metric, values in percent."""
    lines = [f"{'setting':<18}{metric + ' %':>12}{'95% CI':>9}   per seed"]
    for name, rep in reports.items():
        mean, ci = rep.summary()[metric]
        per_seed = " ".join(f"{100 * rep.per_seed[s][metric]:.2f}" for s in sorted(rep.per_seed))
        lines.append(f"{str(name):<18}{100 * mean:>12.2f}{100 * ci:>9.2f}   {per_seed}")
    return "\n".join(lines) + "\n"
