"""Experiment pipeline stages: prepare, train-disc, extract-embed, train-ae, evaluate.

Every stage reads its inputs from and writes its outputs to the run
directory, so stages can be re-run independently. Layout::

    <out>/prepared/                 scheme.json, context_<c>/{train,val,test}.npz
    <out>/discriminators/embed_<p>/ manifest.json, weights.bin
    <out>/embeddings/embed_<p>.json
    <out>/models/seed_<s>/<model>/  manifest.json, weights.bin
    <out>/reports/                  auc.json, auc.txt, discriminator_accuracy.*, embedding_study.*
    <out>/run_manifest.json
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .context import EmbeddingTable, collect_activations, context_embeddings, onehot_table
from .errors import CheckpointError, ConfigError
from .evaluation import NoveltyReport, auc, format_table, group_scores, novelty_scores
from .models import (EMBEDDING_SIZES, TrainConfig, build_autoencoder, build_discriminator, read_checkpoint,
                     train_autoencoder, train_discriminator, write_checkpoint)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
VARIANTS = ("individual", "unconditioned", "cande-onehot", "cande-embed")


def derive_seed(seed: int, *stage) -> int:
    """Stable per-stage seed from the global seed and a stage path."""
    key = json.dumps([int(seed), *[str(s) for s in stage]]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str | Path | None = None) -> "ExperimentConfig":
        raw = copy.deepcopy(raw)
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
        if "dataset" not in raw or raw["dataset"].get("kind") not in ("idx", "csv", "synth"):
            raise ConfigError("dataset.kind must be one of idx, csv, synth")
        roster = raw.setdefault("roster", list(VARIANTS))
        if not roster:
            raise ConfigError("roster must not be empty")
        bad = [v for v in roster if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown roster entries {bad}; expected a subset of {list(VARIANTS)}")
        sizes = raw.setdefault("embedding_sizes", list(EMBEDDING_SIZES))
        if not sizes or any(not isinstance(p, int) or p < 1 for p in sizes):
            raise ConfigError("embedding_sizes must be a non-empty list of positive integers")
        if not set(sizes) <= set(EMBEDDING_SIZES) and not raw.get("allow_custom_embedding_sizes"):
            raise ConfigError(f"embedding sizes {sizes} outside {list(EMBEDDING_SIZES)}; "
                              "set allow_custom_embedding_sizes to override")
        raw.setdefault("seed", 0)
        raw.setdefault("model", {})
        raw.setdefault("discriminator", {})
        raw.setdefault("train", {})
        try:
            cls._train_cfg(raw["train"], 0)
            cls._train_cfg(raw["discriminator"].get("train", {}), 0)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid training settings: {exc}") from exc
        return cls(raw, Path(base_dir) if base_dir else Path.cwd())

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(raw, path.parent)

    @staticmethod
    def _train_cfg(d: dict, seed: int) -> TrainConfig:
        d = {k: v for k, v in d.items() if k != "seed"}
        return TrainConfig(seed=seed, **d)

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def roster(self) -> list[str]:
        return list(self.raw["roster"])

    @property
    def embedding_sizes(self) -> list[int]:
        return list(self.raw["embedding_sizes"])

    @property
    def repeats(self) -> int:
        return int(self.raw["train"].get("repeats", 1))

    def repeat_seeds(self) -> list[int]:
        return [derive_seed(self.seed, "repeat", i) for i in range(self.repeats)]

    def ae_train_cfg(self, seed: int) -> TrainConfig:
        return self._train_cfg(self.raw["train"], seed)

    def disc_train_cfg(self, seed: int) -> TrainConfig:
        return self._train_cfg(self.raw["discriminator"].get("train", {}), seed)

    def path(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def hash(self) -> str:
        return config_hash(self.raw)


# -- run manifest ------------------------------------------------------------


def _update_manifest(out: Path, cfg: ExperimentConfig, stage: str, paths: list[Path]):
    mpath = out / "run_manifest.json"
    manifest = json.loads(mpath.read_text(encoding="utf-8")) if mpath.exists() else {"artifacts": {}, "stages": {}}
    manifest["config_hash"] = cfg.hash()
    manifest["seed"] = cfg.seed
    manifest["repeat_seeds"] = cfg.repeat_seeds()
    manifest["artifacts"][stage] = sorted(str(p.relative_to(out)) for p in paths)
    manifest["stages"][stage] = {"finished": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _files_under(*dirs: Path) -> list[Path]:
    return [p for d in dirs if d.exists() for p in sorted(d.rglob("*")) if p.is_file()]


# -- prepare -----------------------------------------------------------------


def prepare(cfg: ExperimentConfig, out: Path) -> D.ContextualSplits:
    ds = cfg.raw["dataset"]
    split = D.SplitSpec(ds.get("train_fraction", 0.9), ds.get("val_fraction", 0.1),
                        derive_seed(cfg.seed, "prepare"))
    kind = ds["kind"]
    if kind == "csv":
        splits = D.splits_from_labelled(D.load_feature_csv(cfg.path(ds["train"])),
                                        D.load_feature_csv(cfg.path(ds["test"])), split)
    else:
        if kind == "idx":
            pool = D.load_idx(cfg.path(ds["train_images"]), cfg.path(ds["train_labels"]))
            test_pool = D.load_idx(cfg.path(ds["test_images"]), cfg.path(ds["test_labels"]))
            scheme = D.ContextScheme.from_dict(ds["scheme"]) if "scheme" in ds else D.ContextScheme.mnist_default()
        else:
            params = {k: v for k, v in ds.items() if k in D.SynthConfig.__dataclass_fields__}
            synth = D.synth_contextual(D.SynthConfig(**params))
            pool, test_pool, scheme = synth.pool, synth.test_pool, synth.scheme
        splits = D.build_contextual_dataset(pool, scheme, split, test_pool=test_pool,
                                            max_train_per_context=ds.get("max_train_per_context"),
                                            max_test_per_context=ds.get("max_test_per_context"))
    target = out / "prepared"
    splits.save(target)
    _update_manifest(out, cfg, "prepare", _files_under(target))
    return splits


def load_prepared(out: Path) -> D.ContextualSplits:
    return D.ContextualSplits.load(out / "prepared")


# -- discriminators ------------------------------------------------------------


def _table(head, rows):
    return format_table(head, rows, footer=False)


def train_discriminators(cfg: ExperimentConfig, out: Path, sizes: list[int] | None = None) -> dict[int, float]:
    """Train one context discriminator per embedding size; returns size -> validation accuracy."""
    splits = load_prepared(out)
    if len(splits.context_ids) < 2:
        raise ConfigError("a context discriminator needs at least two contexts")
    train, val = splits.pooled("train"), splits.pooled("val")
    dcfg = cfg.raw["discriminator"]
    accs = {}
    for p in sizes or cfg.embedding_sizes:
        seed = derive_seed(cfg.seed, "discriminator", p)
        model = build_discriminator(train.dim, max(splits.context_ids) + 1, p,
                                    tuple(dcfg.get("hidden", (256,))), seed=seed)
        result = train_discriminator(model, train.features, train.contexts, val.features, val.contexts,
                                     cfg.disc_train_cfg(seed))
        result.model.meta.update(embedding_dim=p, validation_accuracy=result.best_metric)
        write_checkpoint(result.model, out / "discriminators" / f"embed_{p}")
        accs[p] = result.best_metric
    _write_accuracy_report(out)
    reports = out / "reports"
    _update_manifest(out, cfg, "train-disc", [*_files_under(out / "discriminators"),
                                              reports / "discriminator_accuracy.json",
                                              reports / "discriminator_accuracy.txt"])
    return accs


def _write_accuracy_report(out: Path):
    """Size -> best validation accuracy over every discriminator present on disk."""
    rows = []
    for d in sorted((out / "discriminators").glob("embed_*"), key=lambda p: int(p.name.split("_")[1])):
        meta = json.loads((d / "manifest.json").read_text(encoding="utf-8"))["meta"]
        rows.append({"layer_size": meta["embedding_dim"], "validation_accuracy": meta["validation_accuracy"],
                     "best_epoch": meta["best_epoch"]})
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "discriminator_accuracy.json").write_text(
        json.dumps({"schema_version": 1, "rows": rows}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    text = _table(["Layer size", "% Validation Accuracy"],
                  [[str(r["layer_size"]), f"{100 * r['validation_accuracy']:.2f}"] for r in rows])
    (reports / "discriminator_accuracy.txt").write_text(text, encoding="utf-8")


def extract_embeddings(cfg: ExperimentConfig, out: Path, sizes: list[int] | None = None) -> dict[int, EmbeddingTable]:
    splits = load_prepared(out)
    train = splits.pooled("train")
    tables = {}
    for p in sizes or cfg.embedding_sizes:
        ckpt = out / "discriminators" / f"embed_{p}"
        if not ckpt.exists():
            raise CheckpointError(f"no discriminator checkpoint for embedding size {p} at {ckpt}; run train-disc")
        disc = read_checkpoint(ckpt)
        acts = collect_activations(disc, train.features, train.contexts)
        table = context_embeddings(acts, splits.context_ids, provenance={
            "discriminator": str(ckpt.relative_to(out)),
            "best_epoch": disc.meta.get("best_epoch"),
            "validation_accuracy": disc.meta.get("validation_accuracy"),
            "n_examples": int(len(train)),
        })
        path = out / "embeddings" / f"embed_{p}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        table.save(path)
        tables[p] = table
    _update_manifest(out, cfg, "extract-embed", _files_under(out / "embeddings"))
    return tables


# -- autoencoders --------------------------------------------------------------


def model_names(cfg: ExperimentConfig) -> list[str]:
    names = []
    for v in cfg.roster:
        if v == "cande-embed":
            names.extend(f"cande-embed-{p}" for p in cfg.embedding_sizes)
        else:
            names.append(v)
    return names


def _output_activation(cfg: ExperimentConfig) -> str:
    default = "sigmoid" if cfg.raw["dataset"]["kind"] == "idx" else "linear"
    return cfg.raw["model"].get("output_activation", default)


def _ae_jobs(cfg: ExperimentConfig, splits: D.ContextualSplits, variant: str,
             sizes: list[int] | None) -> list[dict]:
    jobs = []
    for rep, seed in enumerate(cfg.repeat_seeds()):
        if variant == "individual":
            for c in splits.context_ids:
                jobs.append({"variant": variant, "name": "individual", "context": c, "seed": seed})
        elif variant == "cande-embed":
            for p in sizes or cfg.embedding_sizes:
                jobs.append({"variant": variant, "name": f"cande-embed-{p}", "size": p, "seed": seed})
        else:
            jobs.append({"variant": variant, "name": variant, "seed": seed})
    return jobs


def _model_dir(out: Path, seed: int, name: str, context: int | None = None) -> Path:
    d = out / "models" / f"seed_{seed}" / name
    return d / f"context_{context}" if context is not None else d


def _run_ae_job(args) -> str:
    raw, base_dir, out, job = args
    cfg = ExperimentConfig(raw, Path(base_dir))
    out = Path(out)
    splits = load_prepared(out)
    seed = derive_seed(job["seed"], job["name"], job.get("context", "pooled"))
    hidden = tuple(cfg.raw["model"].get("hidden", (128, 64, 32)))
    act = _output_activation(cfg)
    if job["variant"] == "individual":
        train, val = splits.get(job["context"], "train"), splits.get(job["context"], "val")
    else:
        train, val = splits.pooled("train"), splits.pooled("val")
    encodings, kind = None, None
    if job["variant"] == "cande-onehot":
        encodings, kind = onehot_table(splits.context_ids), "onehot"
    elif job["variant"] == "cande-embed":
        path = out / "embeddings" / f"embed_{job['size']}.json"
        if not path.exists():
            raise ConfigError(f"cande-embed needs the embedding table {path}; run extract-embed first")
        encodings, kind = EmbeddingTable.load(path).vectors, "embedding"
    model = build_autoencoder(train.dim, hidden, act, encodings, kind, seed=seed)
    model.meta.update(variant=job["variant"], name=job["name"], repeat_seed=job["seed"],
                      scheme=None if splits.scheme is None else splits.scheme.digest())
    if job.get("context") is not None:
        model.meta["context"] = job["context"]
    cond = model.kind == "cande"
    result = train_autoencoder(model, train.features, val.features, cfg.ae_train_cfg(seed),
                               train.contexts if cond else None, val.contexts if cond else None)
    target = _model_dir(out, job["seed"], job["name"], job.get("context"))
    write_checkpoint(result.model, target)
    return str(target)


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("CANDE_THREADS", "1")))
    except ValueError as exc:
        raise ConfigError("CANDE_THREADS must be an integer") from exc


def train_autoencoders(cfg: ExperimentConfig, out: Path, variant: str,
                       sizes: list[int] | None = None) -> list[Path]:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {list(VARIANTS)}")
    splits = load_prepared(out)
    jobs = _ae_jobs(cfg, splits, variant, sizes)
    args = [(cfg.raw, str(cfg.base_dir), str(out), job) for job in jobs]
    workers = min(max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            paths = list(pool.map(_run_ae_job, args))
    else:
        paths = [_run_ae_job(a) for a in args]
    paths = [Path(p) for p in paths]
    _update_manifest(out, cfg, f"train-ae:{variant}", _files_under(out / "models"))
    return paths


# -- evaluation --------------------------------------------------------------


def _context_label(splits: D.ContextualSplits, c: int) -> str:
    if splits.scheme is None:
        return str(c)
    normal = ", ".join(str(v) for v in splits.scheme.contexts[c])
    return f"{normal} | {splits.scheme.novel[c]}"


def score_context(model, test: D.Dataset) -> tuple[float, str]:
    """AUC for one context's test split; file-level when the data carries group ids."""
    scores = novelty_scores(model, test.features, test.contexts if model.kind == "cande" else None)
    if test.groups is not None and np.any(test.groups != ""):
        _, gscores, glabels = group_scores(scores, test.novelty, test.groups)
        return auc(gscores, glabels), "group"
    return auc(scores, test.novelty), "example"


def evaluate(cfg: ExperimentConfig, out: Path) -> NoveltyReport:
    splits = load_prepared(out)
    report = NoveltyReport(context_names={c: _context_label(splits, c) for c in splits.context_ids})
    for seed in cfg.repeat_seeds():
        for name in model_names(cfg):
            for c in splits.context_ids:
                ckpt = _model_dir(out, seed, name, c if name == "individual" else None)
                if not (ckpt / "manifest.json").exists():
                    raise CheckpointError(f"missing checkpoint {ckpt.relative_to(out)} for roster model "
                                          f"{name!r}, seed {seed}; run train-ae first")
                model = read_checkpoint(ckpt)
                value, level = score_context(model, splits.get(c, "test"))
                report.add(name, c, seed, value, level)
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "auc.json").write_text(report.to_json(), encoding="utf-8")
    (reports / "auc.txt").write_text(report.to_text(), encoding="utf-8")
    written = [reports / "auc.json", reports / "auc.txt"]
    if "cande-embed" in cfg.roster:
        written += _write_embedding_study(report, cfg, splits, reports)
    _update_manifest(out, cfg, "evaluate", written)
    return report


def _write_embedding_study(report: NoveltyReport, cfg: ExperimentConfig, splits, reports: Path) -> list[Path]:
    means = report.mean_auc()
    acc_path = reports / "discriminator_accuracy.json"
    accs = {}
    if acc_path.exists():
        accs = {r["layer_size"]: r["validation_accuracy"]
                for r in json.loads(acc_path.read_text(encoding="utf-8"))["rows"]}
    rows = []
    for p in cfg.embedding_sizes:
        per = {str(c): means[(f"cande-embed-{p}", c)] for c in splits.context_ids}
        rows.append({"layer_size": p, "validation_accuracy": accs.get(p), "auc": per,
                     "mean_auc": float(np.mean(list(per.values())))})
    doc = {"schema_version": 1, "rows": rows}
    (reports / "embedding_study.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                                  encoding="utf-8")
    head = ["Layer size", "% Validation Accuracy", *(f"AUC ctx {c}" for c in splits.context_ids), "mean AUC"]
    body = [[str(r["layer_size"]),
             "-" if r["validation_accuracy"] is None else f"{100 * r['validation_accuracy']:.2f}",
             *(f"{r['auc'][str(c)]:.3f}" for c in splits.context_ids), f"{r['mean_auc']:.3f}"] for r in rows]
    (reports / "embedding_study.txt").write_text(_table(head, body), encoding="utf-8")
    return [reports / "embedding_study.json", reports / "embedding_study.txt"]


def run_all(cfg: ExperimentConfig, out: Path) -> NoveltyReport:
    prepare(cfg, out)
    if "cande-embed" in cfg.roster:
        train_discriminators(cfg, out)
        extract_embeddings(cfg, out)
    for variant in cfg.roster:
        train_autoencoders(cfg, out, variant)
    return evaluate(cfg, out)
