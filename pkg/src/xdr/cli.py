"""Command-line entry point: ``xdr <command> [options]``.

Settings come from an optional TOML or JSON file (``--config``); explicit
flags override file values. Relative dataset paths are resolved against
``$XDR_DATA_DIR`` when they do not exist in the working directory. Every
report starts with a comment line echoing the configuration and seed, and no
report contains timestamps, so reruns produce identical bytes.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import synth
from .adversary import STAGES, TDAR, DomainData
from .base import TrainingDivergedError
from .cf_models import ItemPop, MatrixFactorization, TextCF
from .checkpoints import load_model, save_model
from .corpus import DatasetBundle, ReviewParseError, binarize, build_bundle, load_word_vectors, parse_reviews
from .evaluation import DEFAULT_K, mmd
from .gradcheck import SUITES, run_all
from .serialization import FormatError, dumps_json
from .tmn import TextMemoryNetwork, export_features, import_features

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("xdr")

MODELS = ("itempop", "mf", "tcf", "wtcf", "tmn")
COARSE_LR = (0.0001, 0.001, 0.01, 0.1)
COARSE_REG = (0.001, 0.01, 0.1, 1.0)
FINE_FACTORS = (0.2, 0.5, 1.0, 2.0, 5.0)
MAX_ITER = 200

# keys understood per model; anything else in the config is echoed but unused
MODEL_KEYS = {
    "mf": ("n_factors", "learning_rate", "reg", "n_negatives", "interaction", "batch_size",
           "max_iter", "eval_k", "patience"),
    "tmn": ("n_keys", "learning_rate", "reg", "n_negatives", "batch_size", "max_iter", "eval_k",
            "patience", "max_words"),
    "tdar": ("n_factors", "eta_s", "eta_t", "eta_plus", "eta_minus", "reg_s", "reg_t",
             "n_negatives", "batch_size", "adv_batch_size", "hidden", "interaction", "optimizer",
             "max_iter", "eval_k", "patience", "n_eval_rows"),
}


class CommandError(RuntimeError):
    """A command failed; the message names the failing operation."""


# --------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise CommandError(f"config: file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        cfg = json.loads(text)
    else:
        try:
            cfg = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise CommandError(f"config: cannot parse {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CommandError("config: top level must be a table/object")
    return cfg


def parse_k(value) -> tuple[int, ...]:
    if value is None:
        return DEFAULT_K
    if isinstance(value, str):
        value = [v for v in value.replace(" ", "").split(",") if v]
    ks = tuple(sorted({int(v) for v in value}))
    if not ks or ks[0] < 1:
        raise CommandError("config: k list must hold positive integers")
    return ks


def effective_config(args, file_cfg: dict, flag_names) -> dict:
    """File values overridden by every flag that was given explicitly."""
    cfg = dict(file_cfg)
    for name in flag_names:
        value = getattr(args, name, None)
        if value is not None:
            cfg[name] = value
    if "seed" not in cfg:
        cfg["seed"] = 0
    cfg["k"] = list(parse_k(cfg.get("k")))
    for key in ("learning_rate", "eta_s", "eta_t", "eta_plus", "reg", "reg_s", "reg_t"):
        if key in cfg and float(cfg[key]) < 0:
            raise CommandError(f"config: {key} must be non-negative")
    if "learning_rate" in cfg and float(cfg["learning_rate"]) <= 0:
        raise CommandError("config: learning_rate must be positive")
    if int(cfg.get("max_iter", MAX_ITER)) > MAX_ITER:
        raise CommandError(f"config: max_iter is capped at {MAX_ITER}")
    return cfg


def resolve_data(path) -> Path:
    if path is None:
        raise CommandError("a dataset path is required")
    p = Path(path)
    root = os.environ.get("XDR_DATA_DIR")
    if not p.exists() and not p.is_absolute() and root:
        p = Path(root) / p
    return p


def output_dir(args) -> Path:
    out = args.out
    if out is None:
        root = os.environ.get("XDR_DATA_DIR")
        if not root:
            raise CommandError("--out is required when XDR_DATA_DIR is unset")
        out = Path(root) / "runs" / args.command
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def echo_line(cfg: dict) -> str:
    return "# " + dumps_json({"config": cfg, "seed": cfg.get("seed")}) + "\n"


def write_csv(path: Path, cfg: dict, header, rows) -> None:
    buf = io.StringIO()
    buf.write(echo_line(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_json(path: Path, cfg: dict, payload: dict) -> None:
    path.write_text(dumps_json({"config": cfg, "seed": cfg.get("seed"), **payload}) + "\n",
                    encoding="utf-8")


def write_report(out: Path, stem: str, cfg: dict, report, **labels) -> None:
    (out / f"{stem}.csv").write_text(echo_line(cfg) + report.to_csv(**labels), encoding="utf-8")
    write_json(out / f"{stem}.json", cfg, json.loads(report.to_json(**labels)))


def write_trace(out: Path, cfg: dict, history: list[dict]) -> None:
    if not history:
        return
    keys = list(history[0])
    write_csv(out / "trace.csv", cfg, keys, ([h.get(k, "") for k in keys] for h in history))


def model_kwargs(kind: str, cfg: dict) -> dict:
    group = "mf" if kind in ("mf", "tcf", "wtcf") else kind
    kw = {k: cfg[k] for k in MODEL_KEYS[group] if k in cfg}
    if "rho" in cfg:
        kw["n_negatives"] = int(cfg["rho"])
    if "hidden" in kw:
        kw["hidden"] = tuple(kw["hidden"])
    kw["random_state"] = int(cfg["seed"])
    return kw


def build_model(kind: str, cfg: dict):
    if kind == "itempop":
        return ItemPop()
    kw = model_kwargs(kind, cfg)
    if kind == "mf":
        return MatrixFactorization(**kw)
    if kind in ("tcf", "wtcf"):
        return TextCF(weighting="wtcf" if kind == "wtcf" else "none", **kw)
    if kind == "tmn":
        return TextMemoryNetwork(**kw)
    raise CommandError(f"train: unknown model kind {kind!r}")


def load_bundle(path) -> DatasetBundle:
    return DatasetBundle.load(resolve_data(path))


def fit_single(kind: str, bundle: DatasetBundle, cfg: dict, features=None):
    model = build_model(kind, cfg)
    R = bundle.matrix("train")
    val = bundle.validation if len(bundle.validation) else None
    if kind == "itempop":
        return model.fit(R)
    if kind == "tmn":
        return model.fit(R, val, bundle.interactions.user_words,
                         bundle.interactions.item_words, bundle.word_vectors)
    if kind in ("tcf", "wtcf"):
        if features is None:
            raise CommandError(f"train: {kind} needs textual features; run `xdr train --model tmn` "
                               "and `xdr export-features` first, then pass --features")
        return model.fit(R, val, features.E, features.F)
    return model.fit(R, val)


# --------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    cfg = effective_config(args, load_config(args.config),
                           ("reviews", "vectors", "core", "keep_fraction", "seed"))
    reviews = cfg.get("reviews")
    if not reviews:
        raise CommandError("prepare: --reviews is required")
    reviews = [reviews] if isinstance(reviews, str) else list(reviews)
    records = []
    for path in reviews:
        with open(resolve_data(path), encoding="utf-8") as fh:
            records.extend(parse_reviews(fh))
    table = None
    if cfg.get("vectors"):
        table = load_word_vectors(resolve_data(cfg["vectors"]), cfg.get("vector_format", "auto"))
    core = int(cfg.get("core", 5))
    keep = float(cfg.get("keep_fraction", 1.0))
    echo = {k: (list(map(str, v)) if isinstance(v, list) else v) for k, v in cfg.items()}
    bundle = build_bundle(binarize(records), table, core=core, keep_fraction=keep,
                          seed=int(cfg["seed"]), config=echo)
    out = output_dir(args)
    bundle.save(out)
    stats = bundle.manifest["stats"]
    write_json(out / "stats.json", echo, {"stats": stats})
    write_csv(out / "stats.csv", echo, list(stats), [list(stats.values())])
    print(f"prepared {stats['users']} users, {stats['items']} items, "
          f"{stats['interactions']} interactions -> {out}")
    return 0


def _features_for(path, bundle):
    if path is None:
        return None
    return import_features(resolve_data(path), bundle.M, bundle.N)


def cmd_train(args) -> int:
    cfg = effective_config(args, load_config(args.config),
                           ("bundle", "model", "features", "rho", "k", "seed"))
    kind = cfg.get("model")
    if kind not in MODELS:
        raise CommandError(f"train: --model must be one of {', '.join(MODELS)}")
    bundle = load_bundle(cfg.get("bundle"))
    feats = _features_for(cfg.get("features"), bundle)
    model = fit_single(kind, bundle, cfg, feats)
    out = output_dir(args)
    save_model(out / "model.ckpt", kind, model, cfg, cfg["seed"])
    write_trace(out, cfg, getattr(model, "history_", []))
    if kind == "tmn":
        export_features(model.transform(), out / "features.bin")
    if len(bundle.validation):
        rep = model.evaluate(bundle.validation, exclude=bundle.train, k_list=cfg["k"])
        write_report(out, "metrics", cfg, rep, model=kind, dataset=str(cfg["bundle"]),
                     split="validation", seed=cfg["seed"])
        print(f"{kind}: validation F1@{cfg['k'][0]} = {rep.f1(cfg['k'][0]):.4f}")
    return 0


def cmd_train_tdar(args) -> int:
    cfg = effective_config(
        args, load_config(args.config),
        ("source", "target", "pretrained", "source_features", "target_features", "stage", "k", "seed"),
    )
    stage = cfg.get("stage", "full")
    if stage not in STAGES:
        raise CommandError(f"train-tdar: --stage must be one of {', '.join(STAGES)}")
    src = load_bundle(cfg.get("source"))
    tgt = load_bundle(cfg.get("target"))
    if not cfg.get("source_features") or not cfg.get("target_features"):
        raise CommandError("train-tdar: --source-features and --target-features are required")
    fs = _features_for(cfg["source_features"], src)
    ft = _features_for(cfg["target_features"], tgt)
    if fs.K1 != ft.K1:
        raise CommandError("train-tdar: source and target features differ in width")
    bank = None
    if cfg.get("pretrained"):
        pre, _ = load_model(resolve_data(cfg["pretrained"]))
        if not hasattr(pre, "bank_"):
            raise CommandError("train-tdar: the pretrained checkpoint is not a TCF model")
        bank = pre.bank_
    elif cfg.get("require_pretrained", stage == "full"):
        raise CommandError("train-tdar: --pretrained source checkpoint is required "
                           "(set require_pretrained = false to start from random embeddings)")
    model = TDAR(stage=stage, **model_kwargs("tdar", cfg))
    model.fit(DomainData.from_bundle(src, fs), DomainData.from_bundle(tgt, ft), bank)
    out = output_dir(args)
    save_model(out / "tdar.ckpt", "tdar", model, cfg, cfg["seed"])
    write_trace(out, cfg, model.history_)
    acc = model.classifier_accuracy()
    write_json(out / "accuracy.json", cfg, {"stage": stage, "final": acc,
                                             "trace": [{"iteration": h["iteration"],
                                                        "user_acc": h["user_acc"],
                                                        "item_acc": h["item_acc"]}
                                                       for h in model.history_]})
    print(f"tdar[{stage}]: classifier accuracy user={acc['user_acc']:.3f} item={acc['item_acc']:.3f}")
    if stage == "full" and len(tgt.validation):
        rep = model.evaluate(tgt.validation, exclude=tgt.train, k_list=cfg["k"])
        write_report(out, "metrics", cfg, rep, model="tdar", dataset=str(cfg["target"]),
                     split="validation", seed=cfg["seed"])
        print(f"tdar: target validation F1@{cfg['k'][0]} = {rep.f1(cfg['k'][0]):.4f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = effective_config(args, load_config(args.config), ("checkpoint", "bundle", "split", "k", "seed"))
    if not cfg.get("checkpoint"):
        raise CommandError("evaluate: --checkpoint is required")
    bundle = load_bundle(cfg.get("bundle"))
    model, header = load_model(resolve_data(cfg["checkpoint"]), bundle)
    if tuple(model.shape_) != (bundle.M, bundle.N):
        raise CommandError(f"evaluate: checkpoint shape {tuple(model.shape_)} does not match bundle "
                           f"{(bundle.M, bundle.N)}")
    split = cfg.get("split", "test")
    pairs = bundle.split_pairs(split)
    exclude = bundle.train if split != "train" else None
    rep = model.evaluate(pairs, exclude=exclude, k_list=cfg["k"],
                         candidate_policy=cfg.get("candidate_policy", "exclude_train"))
    out = output_dir(args)
    cfg = {**cfg, "trained_with": header.get("config", {}), "model_kind": header["kind"]}
    write_report(out, "metrics", cfg, rep, model=header["kind"], dataset=str(cfg["bundle"]),
                 split=split, seed=header.get("seed"))
    for k in cfg["k"]:
        print(f"{header['kind']} {split} k={k}: F1={rep.metrics[k]['f1']:.4f} "
              f"NDCG={rep.metrics[k]['ndcg']:.4f}")
    return 0


def coarse_grid() -> list[dict]:
    return [{"learning_rate": lr, "reg": reg} for lr in COARSE_LR for reg in COARSE_REG]


def fine_grid(best: dict) -> list[dict]:
    return [
        {"learning_rate": best["learning_rate"] * a, "reg": best["reg"] * b}
        for a in FINE_FACTORS for b in FINE_FACTORS
    ]


def _grid_trial(job):
    index, kind, bundle_path, features_path, cfg = job
    bundle = DatasetBundle.load(bundle_path)
    feats = import_features(features_path, bundle.M, bundle.N) if features_path else None
    try:
        model = fit_single(kind, bundle, cfg, feats)
        score = float(getattr(model, "best_score_", float("nan")))
        status = "ok"
    except TrainingDivergedError as exc:
        score, status = float("nan"), f"diverged: {exc}"
    return index, score, status


def run_grid(kind, bundle_path, features_path, cfg, points, workers=1):
    jobs = [(j, kind, str(bundle_path), features_path, {**cfg, **p}) for j, p in enumerate(points)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_grid_trial, jobs))
    else:
        results = [_grid_trial(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    return [{**points[j], "val_f1": s, "status": st} for j, s, st in results]


def _argbest(rows):
    scores = [r["val_f1"] if np.isfinite(r["val_f1"]) else -np.inf for r in rows]
    return rows[int(np.argmax(scores))]


def cmd_grid(args) -> int:
    cfg = effective_config(args, load_config(args.config), ("bundle", "model", "features", "rho", "k", "seed"))
    kind = cfg.get("model")
    if kind not in ("mf", "tcf", "wtcf", "tmn"):
        raise CommandError("grid: --model must be one of mf, tcf, wtcf, tmn")
    bundle_path = resolve_data(cfg.get("bundle"))
    features = str(resolve_data(cfg["features"])) if cfg.get("features") else None
    if kind in ("tcf", "wtcf") and features is None:
        raise CommandError(f"grid: {kind} needs --features")
    workers = int(args.workers or cfg.get("workers", 1))
    rows = [dict(r, phase="coarse") for r in run_grid(kind, bundle_path, features, cfg, coarse_grid(), workers)]
    best = _argbest(rows)
    if args.fine or cfg.get("fine"):
        fine = run_grid(kind, bundle_path, features, cfg, fine_grid(best), workers)
        rows += [dict(r, phase="fine") for r in fine]
        best = _argbest(rows)
    out = output_dir(args)
    write_csv(out / "grid.csv", cfg, ["phase", "learning_rate", "reg", "val_f1", "status"],
              ([r["phase"], r["learning_rate"], r["reg"], r["val_f1"], r["status"]] for r in rows))
    write_json(out / "best.json", cfg, {"best": best, "selection": "validation F1@2"})
    print(f"grid[{kind}]: {len(rows)} runs, best lr={best['learning_rate']} reg={best['reg']} "
          f"F1={best['val_f1']:.4f}")
    return 0


def scenario_from(cfg: dict) -> synth.Scenario:
    names = {f.name for f in fields(synth.Scenario)}
    values = dict(cfg.get("scenario", {}))
    values.update({k: v for k, v in cfg.items() if k in names})
    unknown = set(cfg.get("scenario", {})) - names
    if unknown:
        raise CommandError(f"synth: unknown scenario fields {sorted(unknown)}")
    return synth.Scenario(**values)


def cmd_synth(args) -> int:
    cfg = effective_config(args, load_config(args.config), ("seed",))
    sc = scenario_from(cfg)
    out = output_dir(args)
    paths = synth.write(out, sc, int(cfg["seed"]))
    echo = {"scenario": asdict(sc), "seed": cfg["seed"]}
    write_json(out / "scenario.json", echo, {"paths": {k: str(v) for k, v in paths.items()}})
    print(f"synthetic domains written to {out}")
    return 0


def cmd_mmd(args) -> int:
    cfg = effective_config(args, load_config(args.config), ("a", "b", "side", "seed"))
    if not cfg.get("a") or not cfg.get("b"):
        raise CommandError("mmd: --a and --b feature files are required")
    Ea, Fa = (lambda f: (f.E, f.F))(import_features(resolve_data(cfg["a"])))
    Eb, Fb = (lambda f: (f.E, f.F))(import_features(resolve_data(cfg["b"])))
    side = cfg.get("side", "both")
    result = {}
    try:
        if side in ("user", "both"):
            result["user"] = mmd(Ea, Eb)
        if side in ("item", "both"):
            result["item"] = mmd(Fa, Fb)
    except ValueError as exc:
        raise CommandError(f"mmd: {exc}") from exc
    if not result:
        raise CommandError("mmd: --side must be user, item or both")
    out = output_dir(args)
    write_json(out / "mmd.json", cfg, {"mmd": result, "estimator": "unbiased, RBF, median bandwidth"})
    for k, v in result.items():
        print(f"mmd[{k}] = {v:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = effective_config(args, load_config(args.config), ("module", "seed"))
    module = cfg.get("module", "all")
    suites = list(SUITES) if module == "all" else [module]
    for s in suites:
        if s not in SUITES:
            raise CommandError(f"gradcheck: unknown module {s!r}; choose from all, {', '.join(SUITES)}")
    results = run_all(int(cfg["seed"]), bool(args.inject_bug), suites)
    rows = [[r.suite, r.block, r.max_rel_error, r.tolerance, "pass" if r.passed else "FAIL"]
            for r in results]
    for row in rows:
        print(f"{row[0]:<11} {row[1]:<9} {row[2]:.3e}  {row[4]}")
    if args.out is not None:
        write_csv(output_dir(args) / "gradcheck.csv", {**cfg, "inject_bug": bool(args.inject_bug)},
                  ["suite", "block", "max_rel_error", "tolerance", "status"], rows)
    return 0 if all(r.passed for r in results) else 1


def cmd_export_features(args) -> int:
    cfg = effective_config(args, load_config(args.config), ("checkpoint", "bundle", "seed"))
    bundle = load_bundle(cfg.get("bundle"))
    if not cfg.get("checkpoint"):
        raise CommandError("export-features: --checkpoint is required")
    model, header = load_model(resolve_data(cfg["checkpoint"]), bundle)
    if header["kind"] != "tmn":
        raise CommandError("export-features: the checkpoint is not a TMN model")
    out = output_dir(args)
    feats = model.transform()
    path = export_features(feats, out / "features.bin")
    print(f"features ({bundle.M} users, {bundle.N} items, K1={feats.K1}) -> {path}")
    return 0


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON settings file")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="xdr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", parents=[common], help="raw reviews -> dataset bundle")
    s.add_argument("--reviews", nargs="+")
    s.add_argument("--vectors")
    s.add_argument("--core", type=int)
    s.add_argument("--keep-fraction", dest="keep_fraction", type=float)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", parents=[common], help="train one single-domain model")
    s.add_argument("--bundle")
    s.add_argument("--model", choices=MODELS)
    s.add_argument("--features")
    s.add_argument("--rho", type=int)
    s.add_argument("--k")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("train-tdar", parents=[common], help="train the dual-domain model")
    s.add_argument("--source")
    s.add_argument("--target")
    s.add_argument("--pretrained")
    s.add_argument("--source-features", dest="source_features")
    s.add_argument("--target-features", dest="target_features")
    s.add_argument("--stage", choices=STAGES)
    s.add_argument("--k")
    s.set_defaults(func=cmd_train_tdar)

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a split")
    s.add_argument("--checkpoint")
    s.add_argument("--bundle")
    s.add_argument("--split", choices=("train", "validation", "test"))
    s.add_argument("--k")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("grid", parents=[common], help="learning-rate x regularization grid search")
    s.add_argument("--bundle")
    s.add_argument("--model", choices=("mf", "tcf", "wtcf", "tmn"))
    s.add_argument("--features")
    s.add_argument("--rho", type=int)
    s.add_argument("--k")
    s.add_argument("--fine", action="store_true", help="refine around the coarse optimum")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("synth", parents=[common], help="paired synthetic domains")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("mmd", parents=[common], help="MMD between two feature files")
    s.add_argument("--a")
    s.add_argument("--b")
    s.add_argument("--side", choices=("user", "item", "both"))
    s.set_defaults(func=cmd_mmd)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--module")
    s.add_argument("--inject-bug", dest="inject_bug", action="store_true")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("export-features", parents=[common], help="TMN checkpoint -> feature file")
    s.add_argument("--checkpoint")
    s.add_argument("--bundle")
    s.set_defaults(func=cmd_export_features)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (ValueError, FileNotFoundError, FormatError, ReviewParseError,
            TrainingDivergedError, KeyError) as exc:
        print(f"error: {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
