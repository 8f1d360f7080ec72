"""Subcommand front door for the whole pipeline.

Every subcommand merges three layers of configuration, most specific
winning: command-line flags, then a key=value config file, then
built-in defaults. The merged mapping is hashed and the hash is
embedded in every report a run emits, so outputs can be traced back to
the exact configuration that produced them.

Exit codes: 0 on success, 1 on a runtime error, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .corpus import (
    SEP_TOKEN,
    Example,
    IngestSchema,
    LeaveOneOutSetting,
    SyntheticSpec,
    generate_synthetic,
    ingest_jsonl,
    write_jsonl,
)
from .harness import (
    MODEL_NAMES,
    ExperimentConfig,
    MetricSpec,
    build_artifacts,
    load_model_dir,
    metric_for_dataset,
    render_shift_svg,
    run_loo,
    run_setting,
    save_model_dir,
    train_variant,
    variant_probs,
    write_aggregate_csv,
)
from .inference import generate_candidates
from .metrics import f1_binary, f1_macro  # noqa: F401  (re-export for scripts)


class UsageError(Exception):
    """Bad flags, bad config keys, or missing required values: exit 2."""


EXPERIMENT_KEYS = tuple(f.name for f in fields(ExperimentConfig))
SYNTH_KEYS = tuple(f.name for f in fields(SyntheticSpec))
SCHEMA_KEYS = (
    "text_field", "premise_field", "hypothesis_field", "label_field",
    "domain_field", "id_field", "split_field", "labels", "positive_class",
)

_SCHEMA_DEFAULTS = {
    "text_field": "text",
    "premise_field": "premise",
    "hypothesis_field": "hypothesis",
    "label_field": "label",
    "domain_field": "domain",
    "id_field": "id",
    "split_field": "split",
    "labels": None,
    "positive_class": None,
}


def _experiment_defaults() -> dict:
    return asdict(ExperimentConfig())


def _parse_scalar(raw: str):
    text = raw.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def read_config_file(path) -> dict:
    """key = value lines; # starts a comment; values are parsed as
    bool/int/float when they look like one, strings otherwise."""
    values = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise UsageError(f"{path}:{n}: expected key = value, got {line.strip()!r}")
            key, _, raw = stripped.partition("=")
            key = key.strip().replace("-", "_")
            if not key:
                raise UsageError(f"{path}:{n}: empty key")
            values[key] = _parse_scalar(raw)
    return values


def merge_config(defaults: dict, args: argparse.Namespace) -> dict:
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        file_values = read_config_file(config_path)
        unknown = sorted(set(file_values) - set(defaults))
        if unknown:
            raise UsageError(
                f"unknown config keys {unknown}; valid keys: {sorted(defaults)}"
            )
        merged.update(file_values)
    for key in defaults:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    return merged


def config_hash(command: str, merged: dict) -> str:
    payload = json.dumps({"command": command, "values": merged}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _require(merged: dict, key: str):
    if merged.get(key) in (None, ""):
        raise UsageError(f"missing required value --{key.replace('_', '-')}")
    return merged[key]


def _schema_from(merged: dict) -> IngestSchema:
    labels = merged.get("labels")
    if isinstance(labels, str):
        labels = tuple(s.strip() for s in labels.split(",") if s.strip())
    return IngestSchema(
        text=merged["text_field"],
        premise=merged["premise_field"],
        hypothesis=merged["hypothesis_field"],
        label=merged["label_field"],
        domain=merged["domain_field"],
        id=merged["id_field"],
        split=merged["split_field"],
        labels=labels,
        positive_class=merged.get("positive_class"),
    )


def _experiment_config(merged: dict) -> ExperimentConfig:
    return ExperimentConfig(**{k: merged[k] for k in EXPERIMENT_KEYS})


def _metric_from(merged: dict, dataset) -> MetricSpec:
    choice = merged.get("task_metric")
    if choice in (None, "", "auto"):
        return metric_for_dataset(dataset)
    if choice == "binary":
        positive = merged.get("positive_class") or dataset.positive_class
        if positive is None:
            raise UsageError("binary metric needs a positive class (--positive-class)")
        return MetricSpec(kind="binary-F1", positive_class=positive)
    if choice == "macro":
        return MetricSpec(kind="macro-F1")
    raise UsageError(f"unknown task metric {choice!r}; expected binary or macro")


# --- flag registration ------------------------------------------------------


def _add_keys(parser: argparse.ArgumentParser, defaults: dict, keys, types: dict):
    for key in keys:
        flag = "--" + key.replace("_", "-")
        parser.add_argument(flag, type=types.get(key, str), default=None, dest=key)


def _key_types(defaults: dict) -> dict:
    types = {}
    for key, value in defaults.items():
        if isinstance(value, bool):
            types[key] = lambda s: s.lower() == "true"
        elif isinstance(value, int):
            types[key] = int
        elif isinstance(value, float):
            types[key] = float
        else:
            types[key] = str
    return types


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pada-lab",
        description="Prompt-conditioned multi-source domain adaptation at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    defaults: dict[str, dict] = {}

    def command(name, keys_with_defaults, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", default=None, help="key = value config file")
        merged_defaults = {}
        for block in keys_with_defaults:
            merged_defaults.update(block)
        _add_keys(p, merged_defaults, merged_defaults.keys(), _key_types(merged_defaults))
        defaults[name] = merged_defaults
        return p

    synth_defaults = asdict(SyntheticSpec())
    command(
        "gen-data",
        [synth_defaults, {"out": None}],
        help="write a synthetic multi-domain JSONL corpus",
    )

    drf = sub.add_parser("drf", help="domain-feature operations")
    drf_sub = drf.add_subparsers(dest="drf_command", required=True)
    extract = drf_sub.add_parser("extract", help="extract per-domain feature profiles")
    extract.add_argument("--config", default=None)
    extract_defaults = {
        "data": None, "out": None, "domains": None,
        "rho": 1.5, "k_drf": 50, "d_emb": 32, "window": 3,
        **_SCHEMA_DEFAULTS,
    }
    _add_keys(extract, extract_defaults, extract_defaults.keys(), _key_types(
        {k: v for k, v in extract_defaults.items() if v is not None}
    ))
    defaults["drf extract"] = extract_defaults

    command(
        "train",
        [_experiment_defaults(), _SCHEMA_DEFAULTS,
         {"data": None, "out": None, "model": "pada", "target": None, "task_metric": None}],
        help="train one model variant for one held-out target",
    )
    command(
        "predict",
        [_SCHEMA_DEFAULTS, {"data": None, "out": None, "model_dir": None}],
        help="run a trained model directory over JSONL examples",
    )
    command(
        "run-loo",
        [_experiment_defaults(), _SCHEMA_DEFAULTS,
         {"data": None, "out": None, "models": "pada,noda", "seeds": None,
          "task_metric": None}],
        help="full leave-one-out grid with reports, CSV, and heatmap",
    )
    command(
        "report",
        [{"run_dir": None, "out": None}],
        help="rebuild the aggregate CSV and heatmap from cell reports",
    )

    parser.set_defaults(_defaults_by_command=defaults)
    return parser


# --- subcommand bodies ------------------------------------------------------


def _cmd_gen_data(merged: dict, rc_hash: str) -> int:
    out = Path(_require(merged, "out"))
    spec = SyntheticSpec(**{k: merged[k] for k in SYNTH_KEYS})
    dataset = generate_synthetic(spec)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(dataset, out)
    total = sum(len(dataset.train[d]) + len(dataset.dev[d]) for d in dataset.domains)
    print(f"wrote {total} examples across {len(dataset.domains)} domains to {out}")
    print(f"config hash: {rc_hash}")
    return 0


def _cmd_drf_extract(merged: dict, rc_hash: str) -> int:
    from .drf import build_embeddings, extract_drf_set, save_profile
    from .corpus import build_vocabulary

    data = _require(merged, "data")
    out = Path(_require(merged, "out"))
    dataset = ingest_jsonl(data, _schema_from(merged))
    raw_domains = merged.get("domains")
    domains = (
        tuple(s.strip() for s in raw_domains.split(",") if s.strip())
        if raw_domains else tuple(dataset.domains)
    )
    out.mkdir(parents=True, exist_ok=True)
    for d in domains:
        profile = extract_drf_set(
            dataset, domains, d, rho=merged["rho"], k_drf=merged["k_drf"]
        )
        save_profile(out / f"{d}.json", profile, rho=merged["rho"])
        print(f"{d}: {len(profile.drfs)} features -> {out / f'{d}.json'}")
    vocab = build_vocabulary(dataset, domains)
    emb = build_embeddings(dataset, domains, vocab, d_emb=merged["d_emb"], window=merged["window"])
    emb.write_text(out / "embeddings.txt")
    print(f"embeddings: {len(emb.vectors)} tokens x {emb.dim} dims -> {out / 'embeddings.txt'}")
    print(f"config hash: {rc_hash}")
    return 0


def _cmd_train(merged: dict, rc_hash: str) -> int:
    data = _require(merged, "data")
    out = Path(_require(merged, "out"))
    target = _require(merged, "target")
    model = merged["model"]
    if model not in MODEL_NAMES:
        raise UsageError(f"unknown model {model!r}; expected one of {MODEL_NAMES}")
    dataset = ingest_jsonl(data, _schema_from(merged))
    if target not in dataset.domains:
        raise ValueError(f"target {target!r} not a domain of {data}")
    sources = tuple(d for d in dataset.domains if d != target)
    setting = LeaveOneOutSetting(target=target, sources=sources)
    cfg = _experiment_config(merged)
    metric = _metric_from(merged, dataset)
    domains = tuple(dataset.domains) if model == "ub" else sources
    artifacts = build_artifacts(dataset, domains, cfg)
    trained = train_variant(
        dataset, setting, model, artifacts, cfg, cfg.seed, metric, cache={}
    )
    save_model_dir(out, trained, cfg, artifacts=artifacts, config_hash=rc_hash)
    print(f"trained {model} (target {target}) -> {out}")
    for rec in trained.logs:
        print(f"  {json.dumps(rec, sort_keys=True)}")
    print(f"config hash: {rc_hash}")
    return 0


def _read_predict_records(path, schema: IngestSchema) -> list[Example]:
    """Unlabeled-friendly JSONL reader for predict: text is required,
    label and domain are carried through when present."""
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"line {n}: malformed JSON ({e.msg})") from e
            if schema.premise in rec and schema.hypothesis in rec:
                text = f"{rec[schema.premise]} {SEP_TOKEN} {rec[schema.hypothesis]}"
            elif schema.text in rec:
                text = rec[schema.text]
            else:
                raise ValueError(f"line {n}: no {schema.text!r} or premise/hypothesis fields")
            out.append(
                Example(
                    id=str(rec.get(schema.id, f"r{n}")),
                    text=text,
                    label=str(rec.get(schema.label, "")),
                    domain=str(rec.get(schema.domain, "")),
                )
            )
    if not out:
        raise ValueError(f"empty input: {path}")
    return out


def _cmd_predict(merged: dict, rc_hash: str) -> int:
    model_dir = _require(merged, "model_dir")
    data = _require(merged, "data")
    out = Path(_require(merged, "out"))
    trained, cfg = load_model_dir(model_dir)
    examples = _read_predict_records(data, _schema_from(merged))
    beam_cfg = cfg.beam_config()

    candidate_lists = None
    if trained.model == "pada":
        candidate_lists = [
            generate_candidates(trained.model_cfg, trained.params, trained.vocab, ex, beam_cfg)
            for ex in examples
        ]
        from .baselines import classify_many

        probs = classify_many(
            trained.model_cfg, trained.params, trained.vocab, examples,
            prompts=[cands[0].prompt_ids for cands in candidate_lists],
        )
    else:
        probs, _ = variant_probs(trained, examples, beam_cfg)

    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for i, ex in enumerate(examples):
            cands = candidate_lists[i] if candidate_lists else []
            rec = {
                "id": ex.id,
                "generated_prompt": " ".join(cands[0].tokens) if cands else None,
                "candidates": [
                    {"tokens": list(c.tokens), "score": c.score} for c in cands
                ],
                "class_probs": [float(p) for p in probs[i]],
                "predicted_label": trained.label_set[int(probs[i].argmax())],
                "config_hash": rc_hash,
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"wrote {len(examples)} predictions -> {out}")
    print(f"config hash: {rc_hash}")
    return 0


def _cmd_run_loo(merged: dict, rc_hash: str) -> int:
    data = _require(merged, "data")
    out = Path(_require(merged, "out"))
    models = [m.strip() for m in merged["models"].split(",") if m.strip()]
    if not models:
        raise UsageError("empty --models list")
    seeds = None
    if merged.get("seeds") not in (None, ""):
        try:
            seeds = [int(s) for s in str(merged["seeds"]).split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"--seeds must be comma-separated integers, got {merged['seeds']!r}")
    dataset = ingest_jsonl(data, _schema_from(merged))
    cfg = _experiment_config(merged)
    metric = _metric_from(merged, dataset)
    cells = run_loo(
        dataset, models, cfg, out, seeds=seeds, metric=metric, config_hash=rc_hash
    )
    targets = sorted({t for _, t in cells})
    print(f"{'model':<10} {'mean_f1':>8} {'mean_|shift|':>12}")
    for m in models:
        f1s = [cells[(m, t)]["target_f1"] for t in targets]
        shifts = [abs(cells[(m, t)]["shift"]) for t in targets]
        print(f"{m:<10} {sum(f1s)/len(f1s):>8.4f} {sum(shifts)/len(shifts):>12.4f}")
    print(f"reports -> {out}")
    print(f"config hash: {rc_hash}")
    return 0


def _cmd_report(merged: dict, rc_hash: str) -> int:
    run_dir = Path(_require(merged, "run_dir"))
    out = Path(merged["out"]) if merged.get("out") else run_dir
    cells_dir = run_dir / "cells"
    if not cells_dir.is_dir():
        raise ValueError(f"no cells/ directory under {run_dir}")
    cells = {}
    for path in sorted(cells_dir.glob("*.json")):
        with open(path) as f:
            cell = json.load(f)
        cells[(cell["model"], cell["target"])] = cell
    if not cells:
        raise ValueError(f"no cell reports under {cells_dir}")
    models = sorted({m for m, _ in cells})
    targets = sorted({t for _, t in cells})
    for m in models:
        for t in targets:
            if (m, t) not in cells:
                raise ValueError(f"missing report for model {m!r}, target {t!r}")
    out.mkdir(parents=True, exist_ok=True)
    write_aggregate_csv(out / "aggregate.csv", cells, models, targets)
    with open(out / "shifts.svg", "w") as f:
        f.write(render_shift_svg(cells, models, targets))
    print(f"aggregate over {len(models)} models x {len(targets)} targets -> {out}")
    return 0


_BODIES = {
    "gen-data": _cmd_gen_data,
    "drf extract": _cmd_drf_extract,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "run-loo": _cmd_run_loo,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    if command == "drf":
        command = f"drf {args.drf_command}"
    defaults = args._defaults_by_command[command]
    try:
        merged = merge_config(defaults, args)
        rc_hash = config_hash(command, merged)
        return _BODIES[command](merged, rc_hash)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, KeyError) as e:
        module = type(e).__module__
        origin = "" if module == "builtins" else f" [{module}]"
        print(f"error{origin}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
