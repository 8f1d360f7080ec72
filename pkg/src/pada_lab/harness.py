"""Leave-one-out experiment orchestration and shift reporting.

For each setting one domain is held out as the target; vocabulary,
domain profiles, embeddings, and prompt annotations are built from the
sources alone. Every requested model variant trains on the sources and
is scored on the target plus the pooled source dev set (one score over
the concatenated examples, not a per-domain average). The dev minus
test difference is the performance shift the heatmap renders.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import (
    ExpertEnsemble,
    argmax_class,
    classify_many,
    dn_predict_many,
    moe_predict_many,
    train_classifier_only,
    train_experts,
)
from .corpus import (
    Example,
    LeaveOneOutSetting,
    MultiDomainDataset,
    Vocabulary,
    build_vocabulary,
    load_vocab,
    make_loo_settings,
    save_vocab,
)
from .drf import (
    DomainProfile,
    EmbeddingTable,
    PromptAnnotation,
    annotate_prompt,
    build_embeddings,
    extract_drf_set,
    save_profile,
)
from .inference import BeamConfig, GeneratedPrompt, generate_prompt
from .metrics import f1_binary, f1_macro
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainResult, train

MODEL_NAMES = ("pada", "pada-nc", "pada-dn", "noda", "moe", "ub")

# Reference points from full-scale runs with a large pretrained
# backbone on rumour detection: mean absolute shift 0.087 for the
# prompt-conditioned model against 0.17 with no adaptation. Desk-scale
# runs are not expected to reproduce these; they document the
# direction the shift table is read in.
FULL_SCALE_MEAN_ABS_SHIFT = {"pada": 0.087, "noda": 0.17}


@dataclass(frozen=True)
class MetricSpec:
    kind: str = "binary-F1"
    positive_class: str | None = None

    def __post_init__(self):
        if self.kind not in ("binary-F1", "macro-F1"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.kind == "binary-F1" and self.positive_class is None:
            raise ValueError("binary-F1 needs a declared positive class")

    def score(self, y_true: Sequence[str], y_pred: Sequence[str], label_set: Sequence[str]) -> float:
        if self.kind == "binary-F1":
            return f1_binary(y_true, y_pred, self.positive_class, label_set=label_set)
        return f1_macro(y_true, y_pred, label_set)


def metric_for_dataset(dataset: MultiDomainDataset) -> MetricSpec:
    if len(dataset.label_set) == 2 and dataset.positive_class is not None:
        return MetricSpec(kind="binary-F1", positive_class=dataset.positive_class)
    return MetricSpec(kind="macro-F1")


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of the pipeline in one flat, hashable record."""

    # feature extraction
    rho: float = 3.0
    k_drf: int = 50
    prompt_len: int = 9
    d_emb: int = 32
    window: int = 3
    # model dimensions
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 128
    max_input_len: int = 128
    max_output_len: int = 16
    conv_filters: int = 32
    conv_width: int = 9
    # optimization
    alpha: float = 0.5
    epochs: int = 15
    batch_size: int = 16
    lr: float = 2e-3
    warmup_ratio: float = 0.1
    patience: int = 8
    # prompt decoding
    num_candidates: int = 5
    beam_size: int = 10
    num_groups: int = 5
    diversity_penalty: float = 1.5
    # bookkeeping
    seed: int = 0

    def model_config(self, vocab_size: int, n_classes: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            n_classes=n_classes,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ffn=self.d_ffn,
            max_input_len=self.max_input_len,
            max_output_len=self.max_output_len,
            conv_filters=self.conv_filters,
            conv_width=self.conv_width,
            seed=self.seed,
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            warmup_ratio=self.warmup_ratio,
            patience=self.patience,
            seed=self.seed if seed is None else seed,
        )

    def beam_config(self) -> BeamConfig:
        return BeamConfig(
            num_candidates=self.num_candidates,
            beam_size=self.beam_size,
            num_groups=self.num_groups,
            diversity_penalty=self.diversity_penalty,
        )

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


@dataclass
class SettingArtifacts:
    """Source-side artifacts shared by every model in one setting."""

    domains: tuple[str, ...]
    vocab: Vocabulary
    profiles: dict[str, DomainProfile]
    embeddings: EmbeddingTable
    annotations: dict[tuple[str, str], PromptAnnotation]  # (domain, example id)


def build_artifacts(
    dataset: MultiDomainDataset, domains: Sequence[str], cfg: ExperimentConfig
) -> SettingArtifacts:
    domains = tuple(domains)
    vocab = build_vocabulary(dataset, domains)
    profiles = {
        d: extract_drf_set(dataset, domains, d, rho=cfg.rho, k_drf=cfg.k_drf)
        for d in domains
    }
    embeddings = build_embeddings(dataset, domains, vocab, d_emb=cfg.d_emb, window=cfg.window)
    annotations: dict[tuple[str, str], PromptAnnotation] = {}
    for d in domains:
        for ex in list(dataset.train[d]) + list(dataset.dev[d]):
            annotations[(d, ex.id)] = annotate_prompt(
                ex, profiles[d], embeddings, m=cfg.prompt_len
            )
    return SettingArtifacts(
        domains=domains,
        vocab=vocab,
        profiles=profiles,
        embeddings=embeddings,
        annotations=annotations,
    )


# --- prediction paths -------------------------------------------------------


def pada_predict_many(
    model_cfg: ModelConfig,
    params: dict,
    vocab: Vocabulary,
    examples: Sequence[Example],
    beam_cfg: BeamConfig,
) -> tuple[np.ndarray, list[GeneratedPrompt]]:
    """Two-step prediction for a batch: per-example prompt generation,
    then one batched classification over prompt + SEP + text."""
    prompts = [generate_prompt(model_cfg, params, vocab, ex, beam_cfg) for ex in examples]
    probs = classify_many(
        model_cfg, params, vocab, examples, prompts=[p.prompt_ids for p in prompts]
    )
    return probs, prompts


def probs_to_labels(probs: np.ndarray, label_set: Sequence[str]) -> list[str]:
    return [label_set[argmax_class(row)] for row in probs]


# --- per-setting runs -------------------------------------------------------


@dataclass
class TrainedVariant:
    model: str
    model_cfg: ModelConfig
    vocab: Vocabulary
    label_set: tuple[str, ...]
    positive_class: str | None
    sources: tuple[str, ...]
    target: str | None = None
    params: dict | None = None
    ensemble: ExpertEnsemble | None = None
    logs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_dev: float = float("nan")


@dataclass(frozen=True)
class ExperimentReport:
    target: str
    sources: tuple[str, ...]
    model: str
    target_f1: float
    source_dev_f1: float
    shift: float
    seed: int
    config_hash: str
    log: tuple[dict, ...]
    best_epoch: int
    fallback_count: int = 0
    target_split: str = "test"

    def __post_init__(self):
        if abs(self.shift - (self.source_dev_f1 - self.target_f1)) > 1e-12:
            raise ValueError("shift must equal dev minus test")
        for name, score in (("target_f1", self.target_f1), ("source_dev_f1", self.source_dev_f1)):
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sources"] = list(self.sources)
        d["log"] = list(self.log)
        return d


def _mixture_pairs(dataset, sources, artifacts) -> list:
    pairs = []
    for d in sources:
        for ex in dataset.train[d]:
            pairs.append((ex, artifacts.annotations[(d, ex.id)]))
    return pairs


def _pooled_dev(dataset, domains) -> list[Example]:
    return dataset.dev_examples(domains)


def train_mixture_model(
    dataset: MultiDomainDataset,
    setting: LeaveOneOutSetting,
    artifacts: SettingArtifacts,
    cfg: ExperimentConfig,
    seed: int,
    metric: MetricSpec,
) -> TrainedVariant:
    """The prompt-conditioned model: generative/discriminative mixture
    with feature prompts, epoch selection by end-to-end two-step F1 on
    the pooled source dev set."""
    vocab = artifacts.vocab
    model_cfg = cfg.model_config(len(vocab.id_to_token), len(dataset.label_set))
    dev = _pooled_dev(dataset, setting.sources)
    dev_gold = [ex.label for ex in dev]
    beam_cfg = cfg.beam_config()

    def eval_fn(params):
        probs, _ = pada_predict_many(model_cfg, params, vocab, dev, beam_cfg)
        return metric.score(dev_gold, probs_to_labels(probs, dataset.label_set), dataset.label_set)

    result = train(
        model_cfg, vocab, dataset.label_set,
        _mixture_pairs(dataset, setting.sources, artifacts),
        cfg.train_config(seed), eval_fn, prompt_style="drf",
    )
    return TrainedVariant(
        model="pada",
        model_cfg=model_cfg,
        vocab=vocab,
        label_set=tuple(dataset.label_set),
        positive_class=dataset.positive_class,
        sources=tuple(setting.sources),
        target=setting.target,
        params=result.params,
        logs=result.log,
        best_epoch=result.best_epoch,
        best_dev=result.best_dev,
    )


def train_variant(
    dataset: MultiDomainDataset,
    setting: LeaveOneOutSetting,
    model: str,
    artifacts: SettingArtifacts,
    cfg: ExperimentConfig,
    seed: int,
    metric: MetricSpec,
    cache: dict | None = None,
) -> TrainedVariant:
    """Train one named variant for one setting.

    pada and pada-nc share a single mixture training run (they differ
    only in how the classifier input is built at prediction time); the
    optional cache carries it between the two.
    """
    if model not in MODEL_NAMES:
        raise ValueError(f"unknown model {model!r}; expected one of {MODEL_NAMES}")
    vocab = artifacts.vocab
    label_set = dataset.label_set
    model_cfg = cfg.model_config(len(vocab.id_to_token), len(label_set))
    sources = tuple(setting.sources)

    if model in ("pada", "pada-nc"):
        key = ("mixture", setting.target, seed)
        trained = cache.get(key) if cache is not None else None
        if trained is None:
            trained = train_mixture_model(dataset, setting, artifacts, cfg, seed, metric)
            if cache is not None:
                cache[key] = trained
        if model == "pada":
            return trained
        return TrainedVariant(
            model="pada-nc", model_cfg=trained.model_cfg, vocab=vocab,
            label_set=trained.label_set, positive_class=trained.positive_class,
            sources=sources, target=setting.target, params=trained.params,
            logs=trained.logs, best_epoch=trained.best_epoch, best_dev=trained.best_dev,
        )

    dev = _pooled_dev(dataset, sources)
    dev_gold = [ex.label for ex in dev]

    if model == "pada-dn":
        def eval_fn(params):
            probs = dn_predict_many(model_cfg, params, vocab, dev, sources)
            return metric.score(dev_gold, probs_to_labels(probs, label_set), label_set)

        result = train(
            model_cfg, vocab, label_set,
            _mixture_pairs(dataset, sources, artifacts),
            cfg.train_config(seed), eval_fn, prompt_style="name",
        )
        return TrainedVariant(
            model="pada-dn", model_cfg=model_cfg, vocab=vocab,
            label_set=tuple(label_set), positive_class=dataset.positive_class,
            sources=sources, target=setting.target, params=result.params,
            logs=result.log, best_epoch=result.best_epoch, best_dev=result.best_dev,
        )

    if model == "noda":
        def eval_fn(params):
            probs = classify_many(model_cfg, params, vocab, dev)
            return metric.score(dev_gold, probs_to_labels(probs, label_set), label_set)

        result = train_classifier_only(
            model_cfg, vocab, label_set, dataset.train_examples(sources),
            cfg.train_config(seed), eval_fn,
        )
        return TrainedVariant(
            model="noda", model_cfg=model_cfg, vocab=vocab,
            label_set=tuple(label_set), positive_class=dataset.positive_class,
            sources=sources, target=setting.target, params=result.params,
            logs=result.log, best_epoch=result.best_epoch, best_dev=result.best_dev,
        )

    if model == "moe":
        def eval_fn_for(domain):
            domain_dev = list(dataset.dev[domain])
            gold = [ex.label for ex in domain_dev]

            def eval_fn(params):
                probs = classify_many(model_cfg, params, vocab, domain_dev)
                return metric.score(gold, probs_to_labels(probs, label_set), label_set)

            return eval_fn

        ensemble, results = train_experts(
            model_cfg, vocab, label_set,
            {d: dataset.train[d] for d in sources},
            cfg.train_config(seed), eval_fn_for,
        )
        logs = []
        for d in ensemble.domains:
            for rec in results[d].log:
                logs.append({"domain": d, **rec})
        return TrainedVariant(
            model="moe", model_cfg=model_cfg, vocab=vocab,
            label_set=tuple(label_set), positive_class=dataset.positive_class,
            sources=sources, target=setting.target, ensemble=ensemble, logs=logs,
            best_epoch=max(results[d].best_epoch for d in ensemble.domains),
        )

    # ub: sees every domain's training data, including the target's.
    # The training run is setting-invariant, so it is cached by seed.
    all_domains = tuple(dataset.domains)
    key = ("ub", seed)
    cached = cache.get(key) if cache is not None else None
    if cached is None:
        ub_vocab = (
            artifacts.vocab if artifacts.domains == all_domains
            else build_vocabulary(dataset, all_domains)
        )
        ub_model_cfg = cfg.model_config(len(ub_vocab.id_to_token), len(label_set))
        all_dev = _pooled_dev(dataset, all_domains)
        all_gold = [ex.label for ex in all_dev]

        def eval_fn(params):
            probs = classify_many(ub_model_cfg, params, ub_vocab, all_dev)
            return metric.score(all_gold, probs_to_labels(probs, label_set), label_set)

        result = train_classifier_only(
            ub_model_cfg, ub_vocab, label_set, dataset.train_examples(all_domains),
            cfg.train_config(seed), eval_fn,
        )
        cached = (ub_model_cfg, ub_vocab, result)
        if cache is not None:
            cache[key] = cached
    ub_model_cfg, ub_vocab, result = cached
    return TrainedVariant(
        model="ub", model_cfg=ub_model_cfg, vocab=ub_vocab,
        label_set=tuple(label_set), positive_class=dataset.positive_class,
        sources=sources, target=setting.target, params=result.params,
        logs=result.log, best_epoch=result.best_epoch, best_dev=result.best_dev,
    )


def variant_probs(
    trained: TrainedVariant,
    examples: Sequence[Example],
    beam_cfg: BeamConfig,
) -> tuple[np.ndarray, list[GeneratedPrompt] | None]:
    """Class probabilities [N, C] under a trained variant's own input
    construction; the prompt list is non-None only for the two-step model."""
    m = trained.model
    if m == "pada":
        return pada_predict_many(
            trained.model_cfg, trained.params, trained.vocab, examples, beam_cfg
        )
    if m == "moe":
        return moe_predict_many(trained.ensemble, trained.vocab, examples), None
    if m == "pada-dn":
        return (
            dn_predict_many(
                trained.model_cfg, trained.params, trained.vocab, examples, trained.sources
            ),
            None,
        )
    if m in ("pada-nc", "noda", "ub"):
        return classify_many(trained.model_cfg, trained.params, trained.vocab, examples), None
    raise ValueError(f"unknown model {m!r}")


def run_setting(
    dataset: MultiDomainDataset,
    setting: LeaveOneOutSetting,
    model: str,
    cfg: ExperimentConfig,
    seed: int | None = None,
    metric: MetricSpec | None = None,
    artifacts: SettingArtifacts | None = None,
    cache: dict | None = None,
    config_hash: str | None = None,
) -> ExperimentReport:
    """Train one variant in one setting and score both sides of the shift.

    The upper-bound variant is scored on the target's dev split (its
    training saw the target's training split); every other variant is
    scored on the full held-out target domain.
    """
    seed = cfg.seed if seed is None else seed
    metric = metric if metric is not None else metric_for_dataset(dataset)
    if artifacts is None:
        domains = tuple(dataset.domains) if model == "ub" else tuple(setting.sources)
        artifacts = build_artifacts(dataset, domains, cfg)
    trained = train_variant(dataset, setting, model, artifacts, cfg, seed, metric, cache)

    if model == "ub":
        test_examples = list(dataset.dev[setting.target])
        target_split = "dev"
    else:
        test_examples = dataset.target_test_examples(setting.target)
        target_split = "test"
    gold = [ex.label for ex in test_examples]
    probs, prompts = variant_probs(trained, test_examples, cfg.beam_config())
    target_f1 = metric.score(gold, probs_to_labels(probs, dataset.label_set), dataset.label_set)
    fallbacks = sum(1 for p in prompts if p.used_fallback) if prompts else 0

    dev = _pooled_dev(dataset, setting.sources)
    dev_gold = [ex.label for ex in dev]
    if model in ("pada", "pada-dn", "noda") and not np.isnan(trained.best_dev):
        # Training already scored this variant end-to-end on the pooled
        # source dev set; reuse the selected checkpoint's score.
        source_dev_f1 = trained.best_dev
    else:
        dev_probs, _ = variant_probs(trained, dev, cfg.beam_config())
        source_dev_f1 = metric.score(
            dev_gold, probs_to_labels(dev_probs, dataset.label_set), dataset.label_set
        )

    return ExperimentReport(
        target=setting.target,
        sources=tuple(setting.sources),
        model=model,
        target_f1=float(target_f1),
        source_dev_f1=float(source_dev_f1),
        shift=float(source_dev_f1) - float(target_f1),
        seed=seed,
        config_hash=config_hash if config_hash is not None else cfg.config_hash(),
        log=tuple(trained.logs),
        best_epoch=trained.best_epoch,
        fallback_count=fallbacks,
        target_split=target_split,
    )


# --- aggregation ------------------------------------------------------------


def shift_matrix(
    reports: Sequence[ExperimentReport],
    models: Sequence[str],
    targets: Sequence[str],
) -> dict[tuple[str, str], ExperimentReport]:
    """Index reports by (model, target), requiring a complete grid."""
    by_cell: dict[tuple[str, str], ExperimentReport] = {}
    for r in reports:
        key = (r.model, r.target)
        if key in by_cell:
            raise ValueError(f"duplicate report for model {key[0]!r}, target {key[1]!r}")
        by_cell[key] = r
    for m in models:
        for t in targets:
            if (m, t) not in by_cell:
                raise ValueError(f"missing report for model {m!r}, target {t!r}")
    return by_cell


def write_aggregate_csv(
    path,
    cells: dict[tuple[str, str], dict],
    models: Sequence[str],
    targets: Sequence[str],
) -> None:
    """One row per model: per-target F1 and shift, then the means.
    Fixed 6-decimal formatting keeps reruns byte-identical."""
    header = ["model"]
    for t in targets:
        header += [f"{t}_f1", f"{t}_shift"]
    header += ["mean_f1", "mean_abs_shift"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for m in models:
            row = [m]
            f1s, shifts = [], []
            for t in targets:
                cell = cells[(m, t)]
                f1s.append(cell["target_f1"])
                shifts.append(cell["shift"])
                row += [f"{cell['target_f1']:.6f}", f"{cell['shift']:.6f}"]
            row += [
                f"{statistics.mean(f1s):.6f}",
                f"{statistics.mean(abs(s) for s in shifts):.6f}",
            ]
            writer.writerow(row)


def render_shift_svg(
    cells: dict[tuple[str, str], dict],
    models: Sequence[str],
    targets: Sequence[str],
) -> str:
    """Hand-rolled heatmap of shifts, models down, targets across.

    Shading normalizes the absolute shift within each column: the
    darkest cell in a column is that target's smallest absolute shift,
    so the best-adapted model per target reads directly off the figure.
    """
    cell_w, cell_h, left, top = 96, 36, 120, 40
    width = left + cell_w * len(targets) + 20
    height = top + cell_h * len(models) + 20
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    col_norm = {}
    for t in targets:
        col = [abs(cells[(m, t)]["shift"]) for m in models]
        lo, hi = min(col), max(col)
        col_norm[t] = (lo, hi)
    for j, t in enumerate(targets):
        x = left + j * cell_w + cell_w // 2
        parts.append(f'<text x="{x}" y="{top - 12}" text-anchor="middle">{t}</text>')
    for i, m in enumerate(models):
        y = top + i * cell_h + cell_h // 2 + 4
        parts.append(f'<text x="{left - 8}" y="{y}" text-anchor="end">{m}</text>')
        for j, t in enumerate(targets):
            shift = cells[(m, t)]["shift"]
            lo, hi = col_norm[t]
            norm = 0.5 if hi == lo else (abs(shift) - lo) / (hi - lo)
            shade = int(round(64 + 180 * norm))
            fill = f"rgb({shade},{shade},{shade})"
            text_fill = "white" if shade < 150 else "black"
            x, y0 = left + j * cell_w, top + i * cell_h
            parts.append(
                f'<rect x="{x}" y="{y0}" width="{cell_w}" height="{cell_h}" '
                f'fill="{fill}" stroke="black"/>'
            )
            parts.append(
                f'<text x="{x + cell_w // 2}" y="{y0 + cell_h // 2 + 4}" '
                f'text-anchor="middle" fill="{text_fill}">{shift:+.3f}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _thread_cap() -> int:
    raw = os.environ.get("PADA_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"PADA_LAB_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def run_loo(
    dataset: MultiDomainDataset,
    models: Sequence[str],
    cfg: ExperimentConfig,
    out_dir,
    seeds: Sequence[int] | None = None,
    metric: MetricSpec | None = None,
    config_hash: str | None = None,
) -> dict[tuple[str, str], dict]:
    """Full leave-one-out grid: every domain once as target, every
    requested model per setting. Writes per-cell JSON under cells/, an
    aggregate CSV, and the shift heatmap. Returns the cell summaries.

    With several seeds each cell reruns per seed and the summary keeps
    the per-seed reports plus mean and population-sd scores; the CSV
    always holds the means.
    """
    models = list(models)
    unknown = [m for m in models if m not in MODEL_NAMES]
    if unknown:
        raise ValueError(f"unknown models {unknown}; expected names from {MODEL_NAMES}")
    if len(set(models)) != len(models):
        raise ValueError("duplicate model names")
    seeds = [cfg.seed] if not seeds else list(seeds)
    metric = metric if metric is not None else metric_for_dataset(dataset)
    settings = make_loo_settings(dataset)
    out_dir = Path(out_dir)
    (out_dir / "cells").mkdir(parents=True, exist_ok=True)

    ub_art = build_artifacts(dataset, dataset.domains, cfg) if "ub" in models else None
    # Cross-setting cache: the upper bound trains once per seed. Cells
    # are pure functions of (dataset, config, seed), so a concurrent
    # duplicate computation is wasteful but cannot change results.
    shared_cache: dict = {}

    def run_one_setting(setting: LeaveOneOutSetting):
        source_art = build_artifacts(dataset, setting.sources, cfg)
        out = {}
        for seed in seeds:
            cache: dict = dict(shared_cache)
            for model in models:
                art = ub_art if model == "ub" else source_art
                report = run_setting(
                    dataset, setting, model, cfg,
                    seed=seed, metric=metric, artifacts=art, cache=cache,
                    config_hash=config_hash,
                )
                out.setdefault((model, setting.target), []).append(report)
            shared_cache.update(
                (k, v) for k, v in cache.items() if k[0] == "ub"
            )
        return out

    per_cell_reports: dict[tuple[str, str], list[ExperimentReport]] = {}
    threads = _thread_cap()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for chunk in pool.map(run_one_setting, settings):
                per_cell_reports.update(chunk)
    else:
        for setting in settings:
            per_cell_reports.update(run_one_setting(setting))

    targets = [s.target for s in settings]
    flat = [reports[0] for reports in per_cell_reports.values()]
    shift_matrix(flat, models, targets)  # completeness check

    cells: dict[tuple[str, str], dict] = {}
    for (model, target), reports in sorted(per_cell_reports.items()):
        f1s = [r.target_f1 for r in reports]
        devs = [r.source_dev_f1 for r in reports]
        shifts = [r.shift for r in reports]
        summary = {
            "model": model,
            "target": target,
            "sources": list(reports[0].sources),
            "target_f1": statistics.mean(f1s),
            "source_dev_f1": statistics.mean(devs),
            "shift": statistics.mean(shifts),
            "target_f1_sd": statistics.pstdev(f1s),
            "shift_sd": statistics.pstdev(shifts),
            "seeds": [r.seed for r in reports],
            "config_hash": reports[0].config_hash,
            "target_split": reports[0].target_split,
            "reports": [r.to_dict() for r in reports],
        }
        cells[(model, target)] = summary
        cell_path = out_dir / "cells" / f"{model}__{target}.json"
        with open(cell_path, "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")

    write_aggregate_csv(out_dir / "aggregate.csv", cells, models, targets)
    with open(out_dir / "shifts.svg", "w") as f:
        f.write(render_shift_svg(cells, models, targets))
    return cells


DEFAULT_ALPHA_GRID = (0.1, 0.25, 0.5, 0.75, 0.9)


def grid_search_alpha(
    dataset: MultiDomainDataset,
    values: Sequence[float],
    cfg: ExperimentConfig,
    metric: MetricSpec | None = None,
) -> tuple[float, dict[float, float]]:
    """Pick the mixture share by pooled dev F1 with every domain acting
    as a source; ties go to the smaller value."""
    if not values:
        raise ValueError("empty alpha grid")
    metric = metric if metric is not None else metric_for_dataset(dataset)
    all_domains = tuple(dataset.domains)
    setting = LeaveOneOutSetting(target="", sources=all_domains)
    artifacts = build_artifacts(dataset, all_domains, cfg)
    scores: dict[float, float] = {}
    for alpha in values:
        trial_cfg = ExperimentConfig(**{**asdict(cfg), "alpha": float(alpha)})
        trained = train_mixture_model(dataset, setting, artifacts, trial_cfg, cfg.seed, metric)
        scores[float(alpha)] = float(trained.best_dev)
    best = min(scores, key=lambda a: (-scores[a], a))
    return best, scores


# --- model directories ------------------------------------------------------


def save_model_dir(
    out_dir,
    trained: TrainedVariant,
    cfg: ExperimentConfig,
    artifacts: SettingArtifacts | None = None,
    config_hash: str | None = None,
) -> None:
    """Self-contained directory a later `predict` run can reload:
    manifest, vocabulary, checkpoint(s), training log, and the source
    feature profiles when available."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_vocab(out / "vocab.json", trained.vocab)
    manifest = {
        "model": trained.model,
        "target": trained.target,
        "sources": list(trained.sources),
        "label_set": list(trained.label_set),
        "positive_class": trained.positive_class,
        "config": asdict(cfg),
        "config_hash": config_hash if config_hash is not None else cfg.config_hash(),
        "best_epoch": trained.best_epoch,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out / "train_log.jsonl", "w") as f:
        for rec in trained.logs:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    if trained.ensemble is not None:
        experts = out / "experts"
        experts.mkdir(exist_ok=True)
        for d in trained.ensemble.domains:
            save_checkpoint(
                experts / f"{d}.bin", trained.model_cfg, trained.ensemble.params_by_domain[d]
            )
    else:
        save_checkpoint(out / "checkpoint.bin", trained.model_cfg, trained.params)
    if artifacts is not None:
        profiles = out / "profiles"
        profiles.mkdir(exist_ok=True)
        for d, profile in artifacts.profiles.items():
            save_profile(profiles / f"{d}.json", profile, rho=cfg.rho)
        artifacts.embeddings.write_text(profiles / "embeddings.txt")


def load_model_dir(model_dir) -> tuple[TrainedVariant, ExperimentConfig]:
    model_dir = Path(model_dir)
    manifest_path = model_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {model_dir}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    cfg = ExperimentConfig(**manifest["config"])
    vocab = load_vocab(model_dir / "vocab.json")
    model = manifest["model"]
    params = None
    ensemble = None
    if model == "moe":
        params_by_domain = {}
        model_cfg = None
        for d in manifest["sources"]:
            model_cfg, expert_params = load_checkpoint(model_dir / "experts" / f"{d}.bin")
            params_by_domain[d] = expert_params
        ensemble = ExpertEnsemble(
            model_cfg=model_cfg,
            domains=tuple(manifest["sources"]),
            params_by_domain=params_by_domain,
        )
    else:
        model_cfg, params = load_checkpoint(model_dir / "checkpoint.bin")
    trained = TrainedVariant(
        model=model,
        model_cfg=model_cfg,
        vocab=vocab,
        label_set=tuple(manifest["label_set"]),
        positive_class=manifest["positive_class"],
        sources=tuple(manifest["sources"]),
        target=manifest["target"],
        params=params,
        ensemble=ensemble,
        best_epoch=manifest.get("best_epoch", -1),
    )
    return trained, cfg
