"""Command-line entry point.

Subcommands: synth, preprocess, train, eval, sweep, ablate, tsne, report.
Exit codes: 0 success, 1 configuration rejected, 2 runtime failure.

Every subcommand writes only under ``--out`` and drops the effective
(defaults-merged) config plus a provenance file (seed, argv, content hashes
of its inputs) into that directory.  Heavy imports happen inside the
command functions so the SOMNIUM_THREADS cap is applied before any BLAS
thread pool spins up.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback
from pathlib import Path

from .errors import ConfigValidation, MissingStore, SomniumError

SUBCOMMANDS = ("synth", "preprocess", "train", "eval", "sweep", "ablate",
               "tsne", "report")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS")


def _cap_threads() -> None:
    """Honor SOMNIUM_THREADS (default: machine cores, i.e. leave BLAS be)."""
    raw = os.environ.get("SOMNIUM_THREADS")
    if raw is None or raw == "":
        return
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigValidation(
            f"SOMNIUM_THREADS: expected a positive integer, got {raw!r}")
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


# --- shared plumbing --------------------------------------------------------

def _load_cfg(args) -> dict:
    from . import config as cf
    cfg = cf.load_config(args.config) if args.config \
        else cf.validate_config({})
    if args.seed is not None:
        cfg = cf.apply_seed(cfg, args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _hash_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_tree(root) -> dict:
    """Content hash of every file under a directory, keyed by relative
    path."""
    root = Path(root)
    if root.is_file():
        return {root.name: _hash_file(root)}
    return {str(p.relative_to(root)): _hash_file(p)
            for p in sorted(root.rglob("*")) if p.is_file()}


def _write_run_info(out: Path, cfg: dict, args, inputs: dict) -> None:
    from . import config as cf
    (out / "config.json").write_text(cf.config_json(cfg) + "\n",
                                     encoding="utf-8")
    hashes = {}
    for name, path in inputs.items():
        if path is not None and Path(path).exists():
            hashes[name] = _hash_tree(path)
    doc = {"command": args.command, "seed": cfg["seed"],
           "argv": list(args.argv), "input_hashes": hashes}
    (out / "provenance.json").write_text(
        json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _stores_dir(args, cfg) -> Path:
    stores = getattr(args, "stores", None) or cfg["paths"]["stores"]
    if stores is None:
        raise ConfigValidation(
            "paths.stores: a segment-store directory is required "
            "(--stores flag or config)")
    return Path(stores)


def _plan_for_stores(stores, stages, seed: int):
    """Fold plan over the patients of the widest available store."""
    from . import evaluation as ev
    from .preprocess import load_store_dir
    candidates = ["ALL"] + [s for s in stages if s != "ALL"]
    batch = None
    for stage in candidates:
        try:
            batch = load_store_dir(stores, stage)
            break
        except MissingStore:
            continue
    if batch is None:
        raise MissingStore(f"no segment stores found in {stores}")
    ids = list(dict.fromkeys(batch.patient_ids))
    if batch.labels is None:
        raise ConfigValidation("stores carry no class labels; regenerate "
                               "them with the preprocess subcommand")
    first = {p: int(batch.labels[i])
             for i, p in reversed(list(enumerate(batch.patient_ids)))}
    labels = [first[p] for p in ids]
    return ev.make_folds(ids, labels, seed)


def _model_specs(cfg: dict) -> dict:
    from . import config as cf
    from . import evaluation as ev
    from . import smate as sm
    sub = cfg["eval"]["subsample"]
    specs = {}
    for name in cfg["eval"]["models"]:
        if name == "smate":
            spec = ev.ModelSpec("smate", cf.smate_config(cfg), sub)
        elif name == "smate-unsup":
            spec = ev.ModelSpec("smate",
                                cf.smate_config(cfg, label_fraction=0.0),
                                sub)
        elif name == "smate-ablated":
            spec = ev.ModelSpec(
                "smate", sm.ablate(cf.smate_config(cfg), "spatial"), sub)
        elif name == "xcm":
            spec = ev.ModelSpec("xcm", cf.xcm_config(cfg), sub)
        else:
            spec = ev.ModelSpec("hmm", cf.hmm_spec(cfg), sub)
        specs[name] = spec
    return specs


# --- subcommands ------------------------------------------------------------

def _cmd_synth(args) -> int:
    from . import config as cf
    from . import synth as sy
    cfg = _load_cfg(args)
    out = _out_dir(args)
    corpus = sy.generate(cf.synth_spec(cfg), out / "corpus")
    _write_run_info(out, cfg, args, {"config": args.config})
    print(f"wrote {len(corpus.entries)} patients to {out / 'corpus'}")
    return 0


def _cmd_preprocess(args) -> int:
    from . import config as cf
    from . import synth as sy
    from . import preprocess as pp
    from .edfio import parse_edf, parse_hypnogram
    cfg = _load_cfg(args)
    out = _out_dir(args)
    corpus_dir = args.corpus or cfg["paths"]["corpus"]
    if corpus_dir is None:
        raise ConfigValidation("paths.corpus: a corpus directory is "
                               "required (--corpus flag or config)")
    corpus = sy.load_corpus(corpus_dir)
    pcfg = cf.preprocess_config(cfg)
    per_stage: dict = {}
    stats_doc = {}
    for entry in corpus.entries:
        rec = parse_edf((corpus.root / entry.edf_path).read_bytes())
        hyp = parse_hypnogram(
            (corpus.root / entry.hypnogram_path).read_text(encoding="utf-8"))
        batches, stats = pp.preprocess_recording(rec, hyp,
                                                 label=entry.label,
                                                 config=pcfg)
        for stage, batch in batches.items():
            if batch is not None:
                per_stage.setdefault(stage, []).append(batch)
        stats_doc[entry.patient_id] = {
            "epochs_total": stats.epochs_total,
            "epochs_artifact": stats.epochs_artifact,
            "epochs_wake": stats.epochs_wake,
            "short_spans": stats.short_spans,
            "segments_per_stage": stats.segments_per_stage,
        }
    merged = {stage: pp.SegmentBatch.concatenate(parts)
              for stage, parts in per_stage.items()}
    pp.write_store_dir(out / "stores", merged)
    (out / "preprocess_stats.json").write_text(
        json.dumps(stats_doc, indent=1, sort_keys=True) + "\n",
        encoding="utf-8")
    _write_run_info(out, cfg, args,
                    {"config": args.config, "corpus": corpus_dir})
    sizes = {stage: merged[stage].n for stage in sorted(merged)}
    print(f"wrote stores {sizes} to {out / 'stores'}")
    return 0


def _cmd_train(args) -> int:
    from . import config as cf
    from . import evaluation as ev
    from . import report as rp
    from .preprocess import load_store_dir
    cfg = _load_cfg(args)
    out = _out_dir(args)
    stores = _stores_dir(args, cfg)
    batch = load_store_dir(stores, args.stage)
    plan = _plan_for_stores(stores, [args.stage], cfg["seed"])
    train, val, test = ev.fold_batches(batch, plan.folds[args.fold])
    if cfg["eval"]["subsample"] is not None:
        train = ev.subsample_batch(train, cfg["eval"]["subsample"])

    if args.model == "smate":
        from . import smate as sm
        model, history = sm.train(train, val, cf.smate_config(cfg))
        sm.fit_head(model, train)
        sm.save_model(model, str(out / "smate.ckpt"))
        rp.write_history_artifacts(out, history, sm.history_csv(history),
                                   ("L_R", "L_Reg", "composite",
                                    "val_composite"))
        preds, scores = sm.predict(model, test.values)
        true_labels = test.labels
    elif args.model == "xcm":
        from . import xcm as xc
        model, history = xc.xcm_train(train, val, cf.xcm_config(cfg))
        xc.save_model(model, str(out / "xcm.ckpt"))
        rp.write_history_artifacts(out, history, xc.history_csv(history),
                                   ("train_loss", "val_loss"))
        preds, scores = xc.predict(model, test.values)
        true_labels = test.labels
    else:
        import numpy as np
        from . import hmm as hm
        _, train_seqs, train_labels = ev.patient_sequences(train)
        _, test_seqs, test_labels = ev.patient_sequences(test)
        fit = hm.baum_welch(train_seqs, cf.hmm_spec(cfg))
        (out / "hmm.json").write_text(fit.model.to_json(), encoding="utf-8")
        emb_train = np.stack([hm.hmm_embed(fit.model, s)
                              for s in train_seqs])
        emb_test = np.stack([hm.hmm_embed(fit.model, s) for s in test_seqs])
        preds, scores = hm.prototype_classify(emb_train, train_labels,
                                              emb_test)
        true_labels = test_labels

    result = ev.metrics(true_labels, preds, scores)
    summary = {"model": args.model, "stage": args.stage, "fold": args.fold,
               "test_accuracy": result.accuracy,
               "test_macro_f1": result.macro_f1, "test_auc": result.auc}
    (out / "train_summary.json").write_text(
        json.dumps(summary, indent=1, sort_keys=True) + "\n",
        encoding="utf-8")
    _write_run_info(out, cfg, args,
                    {"config": args.config, "stores": stores})
    print(f"{args.model} on {args.stage} fold {args.fold}: "
          f"test accuracy {result.accuracy:.3f}")
    return 0


def _cmd_eval(args) -> int:
    from . import evaluation as ev
    from . import report as rp
    from .errors import DegenerateGroups
    cfg = _load_cfg(args)
    out = _out_dir(args)
    stores = _stores_dir(args, cfg)
    models = cfg["eval"]["models"]
    stages = cfg["eval"]["stages"]
    plan = _plan_for_stores(stores, stages, cfg["seed"])
    result = ev.run_matrix(models, stages, plan, stores, _model_specs(cfg))
    if len(models) > 1:
        for stage in stages:
            groups = {m: result.fold_accuracies(m, stage) for m in models}
            if any(len(v) < 2 for v in groups.values()):
                continue
            try:
                comparison = ev.compare_groups(groups, cfg["eval"]["alpha"])
            except DegenerateGroups as exc:
                comparison = {"degenerate": str(exc)}
            result.stat_tests.append({"stage": stage, **comparison})
    rp.write_eval_artifacts(out, result)
    _write_run_info(out, cfg, args,
                    {"config": args.config, "stores": stores})
    for model in models:
        for stage in stages:
            print(f"{model:14s} {stage:4s} "
                  f"accuracy {result.mean_accuracy(model, stage):.3f}")
    return 0


def _cmd_sweep(args) -> int:
    from . import config as cf
    from . import evaluation as ev
    from . import report as rp
    from .preprocess import load_store_dir
    cfg = _load_cfg(args)
    out = _out_dir(args)
    stores = _stores_dir(args, cfg)
    stage = cfg["eval"]["sweep_stage"]
    batch = load_store_dir(stores, stage)
    plan = _plan_for_stores(stores, [stage], cfg["seed"])
    rows = ev.label_fraction_sweep(batch, plan, cf.smate_config(cfg),
                                   cfg["eval"]["fractions"],
                                   subsample=cfg["eval"]["subsample"])
    rp.write_sweep_artifacts(out, rows)
    _write_run_info(out, cfg, args,
                    {"config": args.config, "stores": stores})
    for fraction, mean in ev.sweep_summary(rows).items():
        print(f"fraction {fraction:.1f}: accuracy {mean:.3f}")
    return 0


def _cmd_ablate(args) -> int:
    from . import config as cf
    from . import evaluation as ev
    from . import report as rp
    from . import smate as sm
    from .errors import DegenerateGroups, EmptyInput
    from .preprocess import load_store_dir
    cfg = _load_cfg(args)
    out = _out_dir(args)
    stores = _stores_dir(args, cfg)
    stage = cfg["eval"]["ablation_stage"]
    batch = load_store_dir(stores, stage)
    plan = _plan_for_stores(stores, [stage], cfg["seed"])
    sub = cfg["eval"]["subsample"]
    groups: dict = {"full": [], "no-spatial": []}
    for seed in cfg["eval"]["ablation_seeds"]:
        base = cf.smate_config(cfg, seed=seed)
        for name, mcfg in (("full", base),
                           ("no-spatial", sm.ablate(base, "spatial"))):
            cell = ev.run_cell(ev.ModelSpec("smate", mcfg, sub), batch,
                               plan.folds[0])
            groups[name].append(cell.accuracy)
    try:
        comparison = ev.compare_groups(groups, cfg["eval"]["alpha"])
    except (DegenerateGroups, EmptyInput) as exc:
        # identical accuracies everywhere, or a single seed: no F-test
        comparison = {"degenerate": str(exc)}
    rp.write_ablation_artifacts(out, groups, comparison)
    _write_run_info(out, cfg, args,
                    {"config": args.config, "stores": stores})
    for name, accs in groups.items():
        mean = sum(accs) / len(accs)
        print(f"{name:12s} mean accuracy {mean:.3f}")
    if "p" in comparison:
        flag = "significant" if comparison["significant"] \
            else "not significant"
        print(f"F={comparison['F']:.3f} p={comparison['p']:.4f} ({flag} at "
              f"alpha={cfg['eval']['alpha']})")
    return 0


def _cmd_tsne(args) -> int:
    from . import evaluation as ev
    from . import report as rp
    from .preprocess import load_store_dir
    cfg = _load_cfg(args)
    out = _out_dir(args)
    stores = _stores_dir(args, cfg)
    tcfg = cfg["eval"]["tsne"]
    batch = load_store_dir(stores, tcfg["stage"])
    if batch.n > tcfg["max_points"]:
        batch = ev.subsample_batch(batch, tcfg["max_points"])
    model_path = args.model_path or cfg["paths"]["model"]
    if model_path:
        from . import smate as sm
        points = sm.embed(sm.load_model(model_path), batch.values)
    else:
        from .features import segment_features
        points = segment_features(batch)
    coords, kl = ev.tsne(points, perplexity=tcfg["perplexity"],
                         iterations=tcfg["iterations"],
                         seed=cfg["seed"],
                         learning_rate=tcfg["learning_rate"])
    labels = [0] * batch.n if batch.labels is None \
        else [int(v) for v in batch.labels]
    rp.write_tsne_artifacts(out, coords, labels, kl)
    _write_run_info(out, cfg, args,
                    {"config": args.config, "stores": stores,
                     "model": model_path})
    print(f"embedded {batch.n} segments; final KL {kl[-1]:.4f}")
    return 0


def _cmd_report(args) -> int:
    """Re-render tables and figures from a saved report, no retraining."""
    from . import evaluation as ev
    from . import report as rp
    cfg = _load_cfg(args)
    src = Path(args.from_dir)
    report_path = src / "report.json"
    if not report_path.exists():
        raise MissingStore(f"no report.json in {src}")
    result = ev.report_from_json(report_path.read_text(encoding="utf-8"))
    out = Path(args.out) if args.out else src
    out.mkdir(parents=True, exist_ok=True)
    paths = rp.write_eval_artifacts(out, result)
    if out.resolve() != src.resolve():
        # in-place regeneration keeps the original run's config/provenance
        _write_run_info(out, cfg, args,
                        {"config": args.config, "report": report_path})
    print(f"regenerated {len(paths)} artifacts in {out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
    "tsne": _cmd_tsne,
    "report": _cmd_report,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="somnium",
        description="sleep-EEG classification pipeline")
    sub = parser.add_subparsers(dest="command")

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int,
                       help="override every seed in the configuration")
        p.add_argument("--out", required=out_required,
                       help="output directory (all artifacts land here)")

    common(sub.add_parser("synth", help="generate a synthetic corpus"))

    p = sub.add_parser("preprocess", help="corpus -> segment stores")
    common(p)
    p.add_argument("--corpus", help="corpus directory (from synth)")

    p = sub.add_parser("train", help="fit one model on one stage")
    common(p)
    p.add_argument("--stores", help="segment-store directory")
    p.add_argument("--model", choices=("smate", "xcm", "hmm"),
                   default="smate")
    p.add_argument("--stage", default="ALL")
    p.add_argument("--fold", type=int, default=0)

    for name, text in (("eval", "run the model x stage x fold matrix"),
                       ("sweep", "accuracy against visible-label fraction"),
                       ("ablate", "full encoder vs no-spatial encoder")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--stores", help="segment-store directory")

    p = sub.add_parser("tsne", help="2-D map of segment embeddings")
    common(p)
    p.add_argument("--stores", help="segment-store directory")
    p.add_argument("--model-path",
                   help="trained encoder checkpoint (default: raw "
                        "hand-crafted features)")

    p = sub.add_parser("report",
                       help="re-render artifacts from a saved report")
    common(p, out_required=False)
    p.add_argument("--from", dest="from_dir", required=True,
                   help="run directory holding report.json")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and not argv[0].startswith("-") and argv[0] not in SUBCOMMANDS:
        print(f"error: unknown subcommand '{argv[0]}' "
              f"(choose from {', '.join(SUBCOMMANDS)})", file=sys.stderr)
        return 2
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    args.argv = argv
    try:
        _cap_threads()
        return _COMMANDS[args.command](args)
    except ConfigValidation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SomniumError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
