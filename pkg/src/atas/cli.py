"""Command-line runner: train, eval, saddle, diagnose, probe-surface and compare.

Every run writes into its output directory the config it was given (verbatim
and canonical), a ``run.json`` with the package version and dataset
fingerprint, and the kind-specific artifacts. A failing run leaves a
``failure.json`` behind and the process exits nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackSpec, pgd_eval_spec
from .config import ConfigError, ExperimentConfig, default_config, load_config
from .data import Dataset, data_dir, load_mnist, parse_cifar_bin, parse_idx, synth_generate, write_idx
from .diagnostics import (SubsetSpec, class_balance, decile_subset, detect_co, grad_norm_profile,
                          loss_surface, train_on_subset)
from .models import build, load_checkpoint, load_into, save_checkpoint
from .saddle import (asgdbca_run, duality_gap, estimate_constants, make_bilinear, make_quadratic,
                     regret, regret_csv, sgdbca_run, solve_reference, summary_json,
                     regret_bound_step_sizes, SaddleRunConfig)
from .trainers import TRAINERS, TrainingAborted, evaluate_robust, eval_rng, make_state

LOWER_IS_BETTER = ("loss",)


class RunFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data


def load_dataset(cfg: ExperimentConfig, directory=None) -> Dataset:
    """Training set named by ``[data]``.

    Synthetic data is pushed through the IDX byte format and read back, so
    every source reaches the trainers as 8-bit MNIST-style pixels.
    """
    d = cfg["data"]
    src = d["source"]
    if src == "synth":
        ds = synth_generate(num_classes=d["num_classes"], per_class=d["per_class"],
                            image_size=d["image_size"], noise=d["noise"], seed=d["data_seed"])
        images = parse_idx(write_idx(ds.images[:, 0]))[:, None]
        labels = parse_idx(write_idx(ds.labels))
        ds = Dataset(images, labels, ds.num_classes)
    elif src == "mnist":
        root = data_dir(d["path"] or directory)
        if root is None:
            raise ConfigError("mnist source needs data.path, --data-dir or ATAS_DATA_DIR")
        ds = load_mnist(root, "train", num_classes=d["num_classes"])
    else:
        root = data_dir(d["path"] or directory)
        if root is None:
            raise ConfigError("cifar source needs data.path, --data-dir or ATAS_DATA_DIR")
        files = sorted(Path(root).glob("data_batch_*.bin"))
        if not files:
            raise FileNotFoundError(f"no data_batch_*.bin files in {root}")
        parts = [parse_cifar_bin(f.read_bytes()) for f in files]
        ds = Dataset(np.concatenate([p.images for p in parts]),
                     np.concatenate([p.labels for p in parts]), 10)
    if d["limit"] is not None:
        ds = ds.subset(np.arange(min(d["limit"], len(ds))))
    return ds


# ---------------------------------------------------------------------------
# run kinds


def _write(out: Path, name, text):
    (out / name).write_text(text)


def _model_for(cfg, ds):
    return build(cfg.model_config(ds.input_shape, ds.num_classes))


def run_train(cfg, out, directory=None):
    ds = load_dataset(cfg, directory)
    model = _model_for(cfg, ds)
    tc = cfg.train_config()
    try:
        hist = TRAINERS[tc.method](model, ds, tc)
    except TrainingAborted as e:
        _write(out, "metrics.csv", e.history.metrics_csv())
        raise RunFailed(str(e)) from e
    _write(out, "metrics.csv", hist.metrics_csv())
    _write(out, "timing.csv", hist.timing_csv())
    save_checkpoint(out / "model.ckpt", model.params)
    if hist.state is not None:
        hist.state.save(out / "state.bin")
    co = detect_co(hist, **_co_args(cfg)) if len(hist.records) > 1 else None
    return {"dataset": ds.fingerprint, "iterations": hist.iterations,
            "co_epoch": None if co is None else co.epoch}


def _co_args(cfg):
    g = cfg["diagnose"]
    return {"window": g["window"], "drop_thresh": g["drop_thresh"], "fgsm_floor": g["fgsm_floor"]}


def _checkpoint_model(cfg, ds, path, out):
    model = _model_for(cfg, ds)
    if path is None:
        # nothing to load: train first with the [train] settings
        hist = TRAINERS[cfg["train"]["method"]](model, ds, cfg.train_config())
        _write(out, "metrics.csv", hist.metrics_csv())
    else:
        load_into(model, load_checkpoint(path))
    return model


def run_eval(cfg, out, directory=None):
    ds = load_dataset(cfg, directory)
    model = _checkpoint_model(cfg, ds, cfg["eval"]["checkpoint"], out)
    k = min(cfg["eval"]["examples"], len(ds))
    rng = eval_rng(cfg.seed, 0)
    ids = np.sort(rng.permutation(len(ds))[:k])
    sub = ds.subset(ids)
    eps = cfg["train"]["epsilon"]
    rows = [("clean", evaluate_robust(model, sub, AttackSpec(0.0)))]
    rows.append(("fgsm", evaluate_robust(model, sub, AttackSpec(eps, alpha=eps))))
    for steps in (10, 50):
        rows.append((f"pgd{steps}", evaluate_robust(model, sub, pgd_eval_spec(eps, steps), rng=rng)))
    _write(out, "eval.csv", "attack,accuracy\n" + "".join(f"{a},{v!r}\n" for a, v in rows))
    return {"dataset": ds.fingerprint, "examples": k}


def make_problem(cfg):
    s = cfg["saddle"]
    if s["family"] == "quadratic":
        return make_quadratic(n=s["n"], d=s["d"], p=s["p"], epsilon=s["epsilon"], radius=s["radius"],
                              lam=s["lam"], mu=s["mu"], seed=s["problem_seed"])
    return make_bilinear(n=s["n"], d=s["d"], p=s["p"], epsilon=s["epsilon"], radius=s["radius"],
                         tail=s["family"] if s["family"] == "equal" else "pareto",
                         offset=s["offset"], seed=s["problem_seed"])


def run_saddle(cfg, out, directory=None):
    s = cfg["saddle"]
    problem = make_problem(cfg)
    const = estimate_constants(problem)
    eta_t, eta_x = regret_bound_step_sizes(const, s["T"], problem.d, problem.n, s["method"], s["beta"])
    rc = SaddleRunConfig(T=s["T"], eta_theta=s["eta_theta"] or eta_t, eta_x=s["eta_x"] or eta_x,
                         beta=s["beta"], seed=cfg.seed, checkpoints=s["checkpoints"])
    traj = (asgdbca_run if s["method"] == "asgdbca" else sgdbca_run)(problem, rc)
    R = regret(traj, problem, pair_next=s["pair"] == "next")
    ref = solve_reference(problem)
    gaps = {t: duality_gap(problem, th, xb, ref) for t, (th, xb) in traj.averages.items()}
    _write(out, "regret.csv", regret_csv(traj, R, gaps))
    _write(out, "summary.json", summary_json(problem, const, traj, R, s["beta"],
                                             {"eta_theta": rc.eta_theta, "eta_x": rc.eta_x,
                                              "reference_value": ref.value,
                                              "gaps": {str(t): g for t, g in gaps.items()}}))
    return {"final_regret": float(R[-1])}


def run_diagnose(cfg, out, directory=None):
    """Gradient-norm profile of a short run, then training on the chosen decile band."""
    ds = load_dataset(cfg, directory)
    g = cfg["diagnose"]
    tc = cfg.train_config()
    profile_cfg = cfg.with_overrides(train={"epochs": g["profile_epochs"]}).train_config()
    hist = TRAINERS[profile_cfg.method](_model_for(cfg, ds), ds, profile_cfg)
    prof = grad_norm_profile(hist.grad_norms)
    _write(out, "profile.csv", prof.to_csv(ds.labels))
    ids = decile_subset(prof, SubsetSpec(g["lo_decile"], g["hi_decile"]))
    budget = g["iteration_budget"] or -(-len(ds) // tc.batch_size) * tc.epochs
    model = _model_for(cfg, ds)
    try:
        sub = train_on_subset(model, ds, tc, ids, budget, state=make_state(tc, len(ds), ds.input_shape))
    except TrainingAborted as e:
        _write(out, "metrics.csv", e.history.metrics_csv())
        raise RunFailed(str(e)) from e
    _write(out, "metrics.csv", sub.metrics_csv())
    _write(out, "timing.csv", sub.timing_csv())
    co = detect_co(sub, **_co_args(cfg)) if len(sub.records) > 1 else None
    info = {"subset_size": int(ids.size),
            "class_balance": [float(v) for v in class_balance(ids, ds.labels, ds.num_classes)],
            "co": None if co is None else vars(co)}
    _write(out, "co.json", json.dumps(info, indent=2, sort_keys=True) + "\n")
    return {"dataset": ds.fingerprint, "subset_size": int(ids.size)}


def run_probe(cfg, out, directory=None):
    ds = load_dataset(cfg, directory)
    p = cfg["probe"]
    model = _checkpoint_model(cfg, ds, p["checkpoint"], out)
    rng = np.random.default_rng([cfg.seed, 11])
    ids = np.sort(rng.permutation(len(ds))[:min(p["examples"], len(ds))])
    grid = loss_surface(model, ds.images[ids], ds.labels[ids], cfg["train"]["epsilon"],
                        p["grid_n"], rng)
    _write(out, "surface.csv", grid.to_csv())
    return {"dataset": ds.fingerprint, "examples": int(ids.size)}


RUNNERS = {"train": run_train, "eval": run_eval, "saddle": run_saddle,
           "diagnose": run_diagnose, "probe-surface": run_probe}


def run(cfg: ExperimentConfig, out, data_directory=None) -> dict:
    """Execute ``cfg`` into directory ``out``; raises :class:`RunFailed` after recording the failure."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out, "config.ini", cfg.source_text)
    _write(out, "config.canonical.ini", cfg.serialize())
    info = {"version": __version__, "kind": cfg.kind, "seed": cfg.seed}
    try:
        info.update(RUNNERS[cfg.kind](cfg, out, data_directory))
    except Exception as e:
        fail = {"error": type(e).__name__, "message": str(e),
                "traceback": traceback.format_exc().splitlines()[-6:]}
        _write(out, "failure.json", json.dumps(fail, indent=2) + "\n")
        if isinstance(e, RunFailed):
            raise
        raise RunFailed(f"{cfg.kind} run failed: {type(e).__name__}: {e}") from e
    _write(out, "run.json", json.dumps(info, indent=2, sort_keys=True) + "\n")
    return info


# ---------------------------------------------------------------------------
# compare


def read_metrics(directory):
    path = Path(directory) / "metrics.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    with path.open() as f:
        rows = list(csv.DictReader(f))
    return rows


def compare(dir_a, dir_b, metric, tol=0.0) -> dict:
    """Per-epoch ``a - b`` deltas of ``metric`` and a verdict on the final epoch."""
    ra, rb = read_metrics(dir_a), read_metrics(dir_b)
    for rows, d in ((ra, dir_a), (rb, dir_b)):
        if not rows or metric not in rows[0]:
            raise KeyError(f"column {metric!r} missing from {Path(d) / 'metrics.csv'}")
    if len(ra) != len(rb):
        raise ValueError(f"runs differ in length: {len(ra)} vs {len(rb)} epochs")
    va = np.array([float(r[metric]) for r in ra])
    vb = np.array([float(r[metric]) for r in rb])
    delta = va - vb
    final = float(delta[-1])
    lower = any(k in metric for k in LOWER_IS_BETTER)
    if abs(final) <= tol:
        verdict = "tie"
    elif (final < 0) == lower:
        verdict = "a better"
    else:
        verdict = "b better"
    return {"metric": metric, "deltas": delta.tolist(), "final_delta": final, "verdict": verdict}


# ---------------------------------------------------------------------------
# argument handling


def build_parser():
    ap = argparse.ArgumentParser(prog="atas", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI experiment config (defaults if omitted)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--data-dir", help="dataset directory (else ATAS_DATA_DIR)")
    p = sub.add_parser("compare")
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    p.add_argument("--metric", default="pgd10_acc")
    p.add_argument("--tol", type=float, default=0.0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            res = compare(args.dir_a, args.dir_b, args.metric, args.tol)
            print(f"{res['metric']}: final delta (a - b) {res['final_delta']:+.6g} -> {res['verdict']}")
            print("per-epoch:", " ".join(f"{d:+.4f}" for d in res["deltas"]))
            return 0
        cfg = load_config(args.config) if args.config else default_config()
        over = {"experiment": {"kind": args.command}}
        if args.seed is not None:
            over["experiment"]["seed"] = args.seed
        cfg = cfg.with_overrides(**over)
        info = run(cfg, args.out, args.data_dir)
    except (ConfigError, KeyError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RunFailed as e:
        print(f"run failed: {e}", file=sys.stderr)
        return 1
    print(json.dumps(info, sort_keys=True))
    return 0
