"""Command-line pipeline.

Every subcommand writes its artifacts plus ``<command>.manifest.json`` into
its output directory. The manifest records the package version, seeds, a
digest of the effective configuration and sha256 hashes of every input
file. Re-running a command whose manifest matches is a no-op unless
``--force`` is given.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .cohort import generate_synthetic, load_cohort, make_samples, write_cohort
from .config import RunConfig, endpoint_config, load_config
from .embeddings import PROMPT_VARIANTS, EmbeddingCache, MockProvider, RemoteProvider, fill_cache
from .encoder import ABLATIONS
from .errors import ConfigError, LinkoError, MissingArtifactError
from .experiment import (
    ablate, build_predictor, comparison_table, run_seeds, split_records, sweep_trainsize, test_metrics,
)
from .metakg import build_metakg, export_metakg, load_metakg, resolve_taus
from .metrics import MetricsReport
from .ontology import CONCEPT_TYPES, OntologySet, load_ontology, write_ontology

logger = logging.getLogger("linko")

COHORT_FILE = "cohort.tsv"
CACHE_FILE = "embeddings.bin"
ABLATION_FLAGS = {
    "no_hmp": ("use_hmp_leaf", "use_hmp_parent"),
    "no_leaf_hmp": ("use_hmp_leaf",),
    "no_parent_hmp": ("use_hmp_parent",),
    "no_hgip": ("use_hgip",),
    "no_llm": ("use_llm_init",),
}


# -- artifacts and manifests ----------------------------------------------------------

def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def input_digests(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise MissingArtifactError(f"missing input artifact {p}")
        out[str(p)] = file_digest(p)
    return out


class Manifest:
    def __init__(self, command: str, out_dir: Path, cfg: RunConfig, inputs: dict, params: dict):
        self.command = command
        self.path = out_dir / f"{command}.manifest.json"
        self.body = {
            "command": command,
            "version": __version__,
            "config_sha256": cfg.digest(),
            "seed": cfg.run.seed,
            "seeds": list(cfg.run.seeds),
            "params": params,
            "inputs": inputs,
        }

    def up_to_date(self) -> bool:
        if not self.path.exists():
            return False
        try:
            old = json.loads(self.path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            return False
        if {k: old.get(k) for k in self.body} != self.body:
            return False
        return all((self.path.parent / name).exists() for name in old.get("outputs", []))

    def write(self, outputs, extra=None):
        body = dict(self.body)
        body["outputs"] = sorted(str(Path(p).relative_to(self.path.parent)) for p in outputs)
        if extra:
            body["results"] = extra
        self.path.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def ontology_paths(data_dir: Path) -> list[Path]:
    return [data_dir / f"ontology_{tag}.csv" for tag in CONCEPT_TYPES]


def load_data(data_dir: Path):
    paths = ontology_paths(data_dir)
    for p in paths + [data_dir / COHORT_FILE]:
        if not p.exists():
            raise MissingArtifactError(f"missing input artifact {p} (run gen-cohort first)")
    ontologies = OntologySet(load_ontology(p, tag) for p, tag in zip(paths, CONCEPT_TYPES))
    records = load_cohort(data_dir / COHORT_FILE, ontologies)
    return records, ontologies


def make_provider(cfg: RunConfig):
    if cfg.embed.provider == "mock":
        return MockProvider(cfg.embed.mock_seed)
    return RemoteProvider(endpoint_config(cfg.embed))


def provider_id_for(cfg: RunConfig) -> str:
    if cfg.embed.provider == "mock":
        return MockProvider(cfg.embed.mock_seed).provider_id
    return f"remote:{cfg.embed.model}"


def open_cache(emb_dir: Path | None, cfg: RunConfig):
    """(cache, provider_id) for runs that use prompt initialisation; (None, None) otherwise."""
    if not cfg.encoder.use_llm_init:
        return None, None
    if emb_dir is None:
        raise ConfigError("prompt initialisation needs --embeddings (or encoder.use_llm_init=false)")
    path = emb_dir / CACHE_FILE
    if not path.exists():
        raise MissingArtifactError(f"missing embedding cache {path} (run init-embeddings first)")
    return EmbeddingCache(path), provider_id_for(cfg)


def embedding_inputs(emb_dir: Path | None, cfg: RunConfig) -> list[Path]:
    return [emb_dir / CACHE_FILE] if cfg.encoder.use_llm_init and emb_dir is not None else []


# -- subcommands --------------------------------------------------------------------------

def cmd_gen_cohort(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("gen-cohort", out, cfg, {}, {})
    if manifest.up_to_date() and not args.force:
        print(f"gen-cohort: {out} is up to date")
        return 0
    cfg.synth.validate()
    records, onts = generate_synthetic(cfg.synth, cfg.run.seed)
    written = []
    for ont in onts:
        path = out / f"ontology_{ont.type_tag}.csv"
        write_ontology(ont, path)
        written.append(path)
    write_cohort(records, out / COHORT_FILE)
    written.append(out / COHORT_FILE)
    n_visits = sum(r.n_visits for r in records)
    manifest.write(written, {"patients": len(records), "visits": n_visits})
    print(f"gen-cohort: {len(records)} patients, {n_visits} visits -> {out}")
    return 0


def cmd_build_metakg(args, cfg: RunConfig) -> int:
    data, out = Path(args.data), Path(args.out)
    inputs = input_digests(ontology_paths(data) + [data / COHORT_FILE])
    out.mkdir(parents=True, exist_ok=True)
    params = {"split_seed": cfg.run.split_seed, "fold_count": cfg.run.fold_count}
    manifest = Manifest("build-metakg", out, cfg, inputs, params)
    if manifest.up_to_date() and not args.force:
        print(f"build-metakg: {out} is up to date")
        return 0
    records, onts = load_data(data)
    train, _, _ = split_records(records, cfg.run.split_seed, cfg.run.fold_count)
    mkg = build_metakg(train, onts, cfg.encoder.taus)
    written = export_metakg(mkg, out)
    edges = [mkg.horizontal_edges(level) for level in range(1, mkg.depth + 1)]
    manifest.write(written, {"train_patients": len(train), "edges_per_level": edges})
    print(f"build-metakg: {len(train)} training patients -> {out}")
    return 0


def cmd_init_embeddings(args, cfg: RunConfig) -> int:
    data, out = Path(args.data), Path(args.out)
    if args.provider:
        cfg.embed.provider = args.provider
    if args.prompt_variant:
        cfg.encoder.prompt_variant = args.prompt_variant
    cfg.validate()
    inputs = input_digests(ontology_paths(data))
    out.mkdir(parents=True, exist_ok=True)
    params = {"provider_id": provider_id_for(cfg), "d": cfg.encoder.d, "variant": cfg.encoder.prompt_variant,
              "task": cfg.encoder.task_name}
    manifest = Manifest("init-embeddings", out, cfg, inputs, params)
    if manifest.up_to_date() and not args.force:
        print(f"init-embeddings: {out} is up to date")
        return 0
    onts = OntologySet(load_ontology(p, tag) for p, tag in zip(ontology_paths(data), CONCEPT_TYPES))
    provider = make_provider(cfg)
    cache = EmbeddingCache(out / CACHE_FILE)
    stats = fill_cache(onts, provider, cache, cfg.encoder.d, cfg.encoder.task_name, cfg.encoder.prompt_variant,
                       parallel=cfg.embed.parallel if cfg.embed.provider == "remote" else 1)
    manifest.write([cache.path, cache.index_path], vars(stats))
    print(f"init-embeddings: {stats.nodes} nodes, {stats.hits} cached, {stats.stores} stored -> {out}")
    return 0


def _apply_ablation_flags(args, cfg: RunConfig):
    for flag, fields in ABLATION_FLAGS.items():
        if getattr(args, flag, False):
            cfg.encoder = replace(cfg.encoder, **{f: False for f in fields})
    if getattr(args, "epochs", None) is not None:
        cfg.train.max_epochs = args.epochs
    if getattr(args, "seeds", None):
        cfg.run.seeds = [int(s) for s in args.seeds.split(",")]


def _check_metakg(mkg, cfg: RunConfig):
    if [float(t) for t in mkg.taus] != resolve_taus(cfg.encoder.taus, mkg.depth):
        raise ConfigError(f"Meta-KG was built with taus {mkg.taus}, config asks for {cfg.encoder.taus}")


def cmd_train(args, cfg: RunConfig) -> int:
    data, out = Path(args.data), Path(args.out)
    emb = Path(args.embeddings) if args.embeddings else None
    mkg_dir = Path(args.metakg)
    cfg.validate()
    inputs = input_digests(
        ontology_paths(data) + [data / COHORT_FILE, mkg_dir / "metakg.json"] + embedding_inputs(emb, cfg)
    )
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("train", out, cfg, inputs, {"data": str(data), "metakg": str(mkg_dir)})
    if manifest.up_to_date() and not args.force:
        print(f"train: {out} is up to date")
        return 0
    records, onts = load_data(data)
    mkg = load_metakg(mkg_dir, onts)
    _check_metakg(mkg, cfg)
    cache, provider_id = open_cache(emb, cfg)
    report, runs = run_seeds(records, onts, cfg.encoder, cfg.train, cfg.run.seeds, split_seed=cfg.run.split_seed,
                             fold_count=cfg.run.fold_count, cache=cache, provider_id=provider_id, mkg=mkg)
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    written = [out / "config.ini"]
    for run in runs:
        stem = out / f"checkpoint_seed{run.seed}"
        ad.save_checkpoint(run.train.best_state, stem)
        written += [stem.with_suffix(".bin"), stem.with_suffix(".idx")]
        if run.train.diverged:
            logger.error("seed %d diverged; checkpoint holds epoch %d", run.seed, run.train.best_epoch)
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "metrics_table.txt").write_text(report.to_table(), encoding="utf-8")
    written += [out / "metrics.txt", out / "metrics_table.txt"]
    manifest.write(written, {f"seed{r.seed}": {"best_epoch": r.train.best_epoch, **r.counts} for r in runs})
    print(report.to_table(), end="")
    if any(r.train.diverged for r in runs):
        return 4
    return 0


def cmd_evaluate(args, _cfg: RunConfig) -> int:
    # the run's own config.ini is authoritative here
    run_dir = Path(args.run)
    train_manifest = run_dir / "train.manifest.json"
    if not train_manifest.exists():
        raise MissingArtifactError(f"no trained run at {run_dir}")
    info = json.loads(train_manifest.read_text(encoding="utf-8"))
    cfg = load_config(run_dir / "config.ini")
    data, mkg_dir = Path(info["params"]["data"]), Path(info["params"]["metakg"])
    if input_digests(info["inputs"]) != info["inputs"]:
        raise MissingArtifactError("training inputs changed since the run was trained; re-run train")
    checkpoints = [run_dir / o for o in info["outputs"] if o.startswith("checkpoint_")]
    manifest = Manifest("evaluate", run_dir, cfg, input_digests(checkpoints), {})
    if manifest.up_to_date() and not args.force:
        print(f"evaluate: {run_dir} is up to date")
        return 0
    records, onts = load_data(data)
    mkg = load_metakg(mkg_dir, onts)
    train, _, test = (make_samples(r, onts["dx"]) for r in split_records(records, cfg.run.split_seed,
                                                                         cfg.run.fold_count))
    report = MetricsReport()
    zeros = [np.zeros((mkg.index.size(level), cfg.encoder.d)) for level in range(1, mkg.depth + 1)]
    for seed in cfg.run.seeds:
        model = build_predictor(mkg, cfg.encoder, cfg.train, seed, tables=zeros)
        model.load_state_dict(ad.load_checkpoint(run_dir / f"checkpoint_seed{seed}"))
        report.add(seed, test_metrics(model, train, test))
    (run_dir / "evaluation.txt").write_text(report.to_text(), encoding="utf-8")
    (run_dir / "evaluation_table.txt").write_text(report.to_table(), encoding="utf-8")
    manifest.write([run_dir / "evaluation.txt", run_dir / "evaluation_table.txt"])
    print(report.to_table(), end="")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    data, out = Path(args.data), Path(args.out)
    emb = Path(args.embeddings) if args.embeddings else None
    cfg.validate()
    inputs = input_digests(ontology_paths(data) + [data / COHORT_FILE] + embedding_inputs(emb, cfg))
    out.mkdir(parents=True, exist_ok=True)
    names = [n.strip() for n in args.rows.split(";")] if args.rows else list(ABLATIONS)
    manifest = Manifest("ablate", out, cfg, inputs, {"rows": names})
    if manifest.up_to_date() and not args.force:
        print(f"ablate: {out} is up to date")
        return 0
    records, onts = load_data(data)
    train, _, _ = split_records(records, cfg.run.split_seed, cfg.run.fold_count)
    mkg = build_metakg(train, onts, cfg.encoder.taus)
    cache, provider_id = open_cache(emb, cfg)
    reports = ablate(records, onts, cfg.encoder, cfg.train, cfg.run.seeds, names, split_seed=cfg.run.split_seed,
                     fold_count=cfg.run.fold_count, cache=cache, provider_id=provider_id, mkg=mkg)
    written = []
    for name, rep in reports.items():
        path = out / f"metrics_{name.replace('/', '').replace(' ', '_')}.txt"
        path.write_text(rep.to_text(), encoding="utf-8")
        written.append(path)
    table = comparison_table(reports)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    written.append(out / "ablation.txt")
    manifest.write(written)
    print(table, end="")
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    data, out = Path(args.data), Path(args.out)
    emb = Path(args.embeddings) if args.embeddings else None
    if args.fractions:
        cfg.run.fractions = [float(f) for f in args.fractions.split(",")]
    cfg.validate()
    inputs = input_digests(ontology_paths(data) + [data / COHORT_FILE] + embedding_inputs(emb, cfg))
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("sweep-trainsize", out, cfg, inputs, {"fractions": cfg.run.fractions})
    if manifest.up_to_date() and not args.force:
        print(f"sweep-trainsize: {out} is up to date")
        return 0
    records, onts = load_data(data)
    cache, provider_id = open_cache(emb, cfg)
    reports = sweep_trainsize(records, onts, cfg.encoder, cfg.train, cfg.run.seeds, cfg.run.fractions,
                              split_seed=cfg.run.split_seed, fold_count=cfg.run.fold_count, cache=cache,
                              provider_id=provider_id)
    written = []
    counts = {}
    for frac, rep in reports.items():
        path = out / f"metrics_fraction_{frac:g}.txt"
        path.write_text(rep.to_text(), encoding="utf-8")
        written.append(path)
        counts[f"{frac:g}"] = {s: rep.extras[s]["train_patients"] for s in sorted(rep.extras)}
    table = comparison_table({f"{f:g}": r for f, r in reports.items()})
    (out / "sweep.txt").write_text(table, encoding="utf-8")
    written.append(out / "sweep.txt")
    manifest.write(written, {"train_patients": counts})
    print(table, end="")
    return 0


# -- argument parsing ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config key (repeatable; wins over --config)")
    common.add_argument("--force", action="store_true", help="re-run even if the manifest is up to date")
    common.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(prog="linko", description="Multi-ontology concept encoder pipeline")
    parser.add_argument("--version", action="version", version=f"linko {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-cohort", parents=[common], help="generate a synthetic cohort and ontologies")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
    p.set_defaults(func=cmd_gen_cohort)

    p = sub.add_parser("build-metakg", parents=[common], help="build and export the Meta-KG")
    p.add_argument("--data", required=True, help="directory written by gen-cohort")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_metakg)

    p = sub.add_parser("init-embeddings", parents=[common], help="fill the prompt-embedding cache")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--provider", choices=("mock", "remote"))
    p.add_argument("--prompt-variant", choices=PROMPT_VARIANTS)
    p.set_defaults(func=cmd_init_embeddings)

    def training_args(p, with_metakg):
        p.add_argument("--data", required=True)
        if with_metakg:
            p.add_argument("--metakg", required=True, help="directory written by build-metakg")
        p.add_argument("--embeddings", help="directory written by init-embeddings")
        p.add_argument("--out", required=True)
        p.add_argument("--seeds", help="comma-separated training seeds (overrides run.seeds)")
        p.add_argument("--epochs", type=int, help="maximum epochs (overrides train.max_epochs)")

    p = sub.add_parser("train", parents=[common], help="train and report test metrics")
    training_args(p, True)
    for flag in ABLATION_FLAGS:
        p.add_argument("--" + flag.replace("_", "-"), action="store_true", dest=flag)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="re-score a trained run's checkpoints on the test fold")
    p.add_argument("--run", required=True, help="output directory of train")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="train every ablation row and compare")
    training_args(p, False)
    p.add_argument("--rows", help="semicolon-separated subset of: " + "; ".join(ABLATIONS))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-trainsize", parents=[common], help="AUPRC against training-set fraction")
    training_args(p, False)
    p.add_argument("--fractions", help="comma-separated fractions (overrides run.fractions)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        if getattr(args, "seed", None) is not None:
            cfg.run.seed = args.seed
        _apply_ablation_flags(args, cfg)
        return args.func(args, cfg)
    except LinkoError as exc:
        print(f"linko {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"linko {args.command}: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
