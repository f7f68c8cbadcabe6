"""Batch command-line interface.

Commands: ``generate`` (synthetic corpus with ground truth), ``train``,
``predict``, ``evaluate``, ``analyze``. Every command prints a JSON
summary on stdout and returns exit code 0 only when nothing errored; all
randomness flows from explicit seeds, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, evaluation, inference, persistence, prediction
from .corpus import load_corpus, write_corpus
from .generative import ScenarioConfig, make_synthetic_scenario
from .inference import TrainConfig, fit, write_trace_csv


class CommandError(RuntimeError):
    """A command failed; the message goes to stderr and the exit is nonzero."""


def _load_train_config(args) -> TrainConfig:
    data: dict = {}
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        data["workers"] = args.workers
    if getattr(args, "tied_xi", False):
        data["tied_xi"] = True
    try:
        return TrainConfig.from_dict(data)
    except ValueError as exc:
        raise CommandError(f"bad training config: {exc}") from exc


def cmd_generate(args) -> dict:
    try:
        cfg = ScenarioConfig.from_json(args.config)
    except (OSError, ValueError, TypeError) as exc:
        raise CommandError(f"bad scenario config: {exc}") from exc
    seed = args.seed if args.seed is not None else cfg.seed
    rng = np.random.default_rng(seed)
    try:
        params, corpus, records = make_synthetic_scenario(cfg, rng)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = write_corpus(corpus, out, stem="corpus")
    truth_path = persistence.save_model(
        params,
        {
            "kind": "ground-truth",
            "seed": seed,
            "config_hash": persistence.hash_json(cfg.to_dict()),
            "corpus_hash": corpus.content_hash(),
        },
        out / "truth_model.mmt",
    )
    latents_path = out / "latents.jsonl"
    with latents_path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.to_json() + "\n")
    return {
        "command": "generate",
        "documents": len(corpus),
        "corpus_manifest": str(manifest),
        "truth_model": str(truth_path),
        "latents": str(latents_path),
        "seed": seed,
    }


def cmd_train(args) -> dict:
    config = _load_train_config(args)
    try:
        corpus = load_corpus(args.corpus)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    rng = np.random.default_rng(config.seed)
    try:
        state = fit(corpus, config, rng)
    except (ValueError, FloatingPointError) as exc:
        raise CommandError(str(exc)) from exc
    except inference.ElboDecreaseError as exc:
        raise CommandError(f"training aborted: {exc} (sweep {exc.sweep})") from exc

    train_perp = {m: state.perplexity_trace[m][-1]
                  for m in state.params.layout.names}
    provenance = {
        "kind": "trained",
        "config": config.to_dict(),
        "config_hash": persistence.hash_json(config.to_dict()),
        "corpus_hash": state.corpus_hash,
        "seed": config.seed,
        "sweeps": len(state.elbo_trace),
        "final_elbo": state.elbo_trace[-1],
        "train_perplexity": train_perp,
    }
    model_path = persistence.save_model(state.params, provenance, args.out)
    trace_path = Path(args.trace) if args.trace else Path(args.out).with_suffix(".trace.csv")
    write_trace_csv(state, trace_path)
    return {
        "command": "train",
        "model": str(model_path),
        "trace": str(trace_path),
        "sweeps": len(state.elbo_trace),
        "final_elbo": state.elbo_trace[-1],
        "train_perplexity": train_perp,
        "converged": len(state.elbo_trace) < config.max_sweeps,
    }


def cmd_predict(args) -> dict:
    model, _ = _load_model(args.model)
    try:
        corpus = load_corpus(args.corpus)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    for name in (args.observed, args.target):
        if name not in model.layout.names:
            raise CommandError(f"modality {name!r} not in model {model.layout.names}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    written = 0
    with out.open("w", encoding="utf-8") as fh:
        for doc in corpus.documents:
            if doc.length(args.observed) == 0:
                continue
            result = prediction.predict_document(doc, model, args.observed, args.target)
            order = np.argsort(-result.word_dist)[: args.top_words]
            terms = (model.vocabularies[args.target].terms
                     if model.vocabularies and args.target in model.vocabularies
                     else [f"w{i}" for i in range(result.word_dist.shape[0])])
            fh.write(json.dumps({
                "id": doc.id,
                "target_modality": args.target,
                "theta": result.theta_predicted.tolist(),
                "top_words": [[terms[i], float(result.word_dist[i])] for i in order],
            }) + "\n")
            written += 1
    return {
        "command": "predict",
        "out": str(out),
        "documents": written,
        "observed": args.observed,
        "target": args.target,
    }


def _load_model(path: str):
    try:
        return persistence.load_model(path)
    except (persistence.ArchiveVersionError, persistence.ArchiveValidationError,
            OSError) as exc:
        raise CommandError(str(exc)) from exc


def cmd_evaluate(args) -> dict:
    try:
        corpus = load_corpus(args.corpus)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    report_paths = []
    for model_path in args.model:
        model, provenance = _load_model(model_path)
        try:
            report = evaluation.evaluate_model(
                model, corpus,
                model_id=Path(model_path).stem,
                config_hash=provenance.get("config_hash", ""),
                train_perplexities=provenance.get("train_perplexity", {}),
            )
        except ValueError as exc:
            raise CommandError(str(exc)) from exc
        path = out / f"report_{report.model_id}.json"
        report.write_json(path)
        reports.append(report)
        report_paths.append(str(path))
    summary = {
        "command": "evaluate",
        "reports": report_paths,
        "metrics": {r.model_id: r.metrics() for r in reports},
    }
    if len(reports) >= 2:
        try:
            table = evaluation.compare_models(reports)
        except ValueError as exc:
            raise CommandError(str(exc)) from exc
        comparison_path = out / "comparison.csv"
        table.to_csv(comparison_path)
        summary["comparison"] = str(comparison_path)
        summary["best"] = {
            name: (table.model_ids[idx] if idx is not None else None)
            for name, idx in zip(table.metric_names, table.best)
        }
    return summary


def cmd_analyze(args) -> dict:
    model, _ = _load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []

    report = analysis.stick_report(model)
    stick_path = out / "stick_report.csv"
    lines = ["modality,topic,p"]
    for m in model.layout.names:
        for k, pk in enumerate(report[m]["p"]):
            lines.append(f"{m},{k},{pk!r}")
    stick_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    artifacts.append(str(stick_path))

    pairs = [(s, t) for s in model.layout.names for t in model.layout.names if s != t]
    if args.source and args.target:
        pairs = [(args.source, args.target)]
    rankings = {}
    for source, target in pairs:
        try:
            result = analysis.analyze_topics(model, source, target,
                                             tau=args.threshold,
                                             relevance=args.relevance)
        except (KeyError, ValueError) as exc:
            raise CommandError(str(exc)) from exc
        cross_path = out / f"cross_block_{source}_{target}.csv"
        cross_lines = []
        for row in result.cross_block:
            cross_lines.append(",".join(repr(x) for x in row))
        cross_path.write_text("\n".join(cross_lines) + "\n", encoding="utf-8")
        artifacts.append(str(cross_path))

        rank_path = out / f"rho_ranking_{source}_{target}.csv"
        rank_lines = ["rank,topic,rho,private,top_words"]
        for rank, topic in enumerate(result.ranking):
            words = analysis.top_words(model, source, int(topic), args.top_words)
            joined = ";".join(f"{term}:{prob:.6f}" for term, prob in words)
            private = int(result.rho[topic] == 0.0)
            rank_lines.append(f"{rank},{int(topic)},{result.rho[topic]!r},{private},{joined}")
        rank_path.write_text("\n".join(rank_lines) + "\n", encoding="utf-8")
        artifacts.append(str(rank_path))
        rankings[f"{source}->{target}"] = [int(t) for t in result.ranking]

    return {
        "command": "analyze",
        "artifacts": artifacts,
        "effective_topics": {m: report[m]["effective_topics"] for m in model.layout.names},
        "rankings": rankings,
        "threshold": args.threshold,
        "relevance": args.relevance,
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmtopic",
        description="Multi-modal topic modeling: generate, train, predict, "
                    "evaluate, analyze.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a synthetic corpus with ground truth")
    p.add_argument("--config", required=True, help="scenario config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit a model on a corpus")
    p.add_argument("--corpus", required=True, help="corpus manifest path")
    p.add_argument("--out", required=True, help="output model archive path")
    p.add_argument("--config", default=None, help="training config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--tied-xi", dest="tied_xi", action="store_true",
                   help="train the tied-weight baseline variant")
    p.add_argument("--trace", default=None, help="trace CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict a missing modality")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--observed", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True, help="output JSON-lines path")
    p.add_argument("--top-words", dest="top_words", type=int, default=10)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="perplexity reports, optionally comparing models")
    p.add_argument("--model", required=True, action="append",
                   help="model archive (repeat to compare)")
    p.add_argument("--corpus", required=True, help="test corpus manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="stick report, cross-correlations, topic ranking")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=analysis.DEFAULT_THRESHOLD)
    p.add_argument("--relevance", choices=("mean", "max"), default="mean")
    p.add_argument("--source", default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--top-words", dest="top_words", type=int, default=10)
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        summary = args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
