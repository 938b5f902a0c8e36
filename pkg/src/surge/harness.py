"""Training loop and experiment orchestration.

Each training step follows the same order: forward (DPGC layers use the scale
from the previous step), loss, one backward pass, per-layer scale update from
this step's branch gradients, then the parameter update.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from surge import __version__, kernels
from surge.checkpoint import export_checkpoint
from surge.config import ExperimentConfig
from surge.data import gaussian_blobs, load_csv, stripes, train_test_split, two_moons
from surge.dpgc import DPGCLayer
from surge.models import (
    Model,
    beale_tensor,
    binarized_inner,
    build_classifier,
    build_toy_model,
    dist_to_opt,
    make_rng,
)
from surge.optim import Optimizer
from surge.tensor import NonFiniteError, Tape, softmax_cross_entropy

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step", "seed", "method", "loss", "dist_to_opt",
    "lambda_l1", "lambda_l2", "wb_norm_l1", "wb_norm_l2", "wa_norm_l1", "wa_norm_l2",
    "alpha_w_l1", "alpha_x_l1", "alpha_w_l2", "alpha_x_l2", "cos_w", "cos_x",
)


class TrainingDiverged(RuntimeError):
    def __init__(self, step, method=None, seed=None):
        self.step = step
        self.method = method
        self.seed = seed
        super().__init__(f"non-finite value at step {step} (method={method}, seed={seed})")


def cosine_or_none(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.dot(a, b) / (na * nb))


@dataclass
class RunResult:
    method: str
    seed: int
    rows: list
    final_loss: float
    final_dist: float | None = None
    test_accuracy: float | None = None
    lambdas: dict = field(default_factory=dict)        # layer slot -> per-step lambda
    act_grads: np.ndarray | None = None
    run_dir: str | None = None
    # layer slot -> per-step (lam_used, |g_b|, |g_a|, lam_next)
    ags_history: dict = field(default_factory=dict)

    @property
    def losses(self):
        return np.array([r["loss"] for r in self.rows])


# --------------------------------------------------------------------------
# data / model setup

def load_dataset(cfg: ExperimentConfig, seed: int):
    if cfg.data_path is not None:
        x, y = load_csv(cfg.data_path)
    elif cfg.dataset == "moons":
        x, y = two_moons(cfg.n_samples, cfg.data_noise, seed)
    elif cfg.dataset == "blobs":
        x, y = gaussian_blobs(cfg.n_samples, cfg.data_noise, seed)
    else:
        x, y = stripes(cfg.n_samples, cfg.data_noise, seed)
    return train_test_split(x, y, cfg.test_fraction, seed)


def build_model(cfg: ExperimentConfig, method: str, seed: int) -> Model:
    common = dict(eta=cfg.eta, eps=cfg.eps, scope=cfg.scope, fixed_lambda=cfg.fixed_lambda)
    if cfg.task == "beale":
        return build_toy_model(cfg.hidden_size, method, seed, input_dim=cfg.input_dim, **common)
    if cfg.task == "classifier":
        return build_classifier(cfg.model_kind, cfg.layer_sizes, method, seed,
                                surge_star=cfg.surge_star, **common)
    raise ValueError(f"task {cfg.task!r} does not train a model")


def accuracy(model: Model, x, y) -> float:
    logits = model.predict(x)
    return float(np.mean(np.argmax(logits, axis=1) == y))


# --------------------------------------------------------------------------
# metrics

def _metric_row(step, seed, method, loss, dist, model, parts):
    row = dict.fromkeys(METRIC_COLUMNS)
    row.update(step=step, seed=seed, method=method, loss=float(loss), dist_to_opt=dist)
    cos_w, cos_x = [], []
    for slot, layer in enumerate(model.quant_layers()[:2], start=1):
        inner = binarized_inner(layer)
        row[f"wb_norm_l{slot}"] = float(np.linalg.norm(inner.weight.data))
        row[f"alpha_w_l{slot}"] = float(inner.alpha_w.data)
        row[f"alpha_x_l{slot}"] = float(inner.alpha_x.data)
        if isinstance(layer, DPGCLayer):
            p = parts[id(layer)]
            row[f"lambda_l{slot}"] = p.lam
            row[f"wa_norm_l{slot}"] = float(np.linalg.norm(layer.aux_weight.data))
    for layer in model.dpgc_layers():
        p = parts[id(layer)]
        g_wb = p.g_wb
        if layer.surge_star:
            # 1x1 auxiliary kernels line up with the centre tap of the main kernels
            k = g_wb.shape[2] // 2
            g_wb = g_wb[:, :, k:k + 1, k:k + 1]
        cw = cosine_or_none(g_wb, p.g_wa)
        cx = cosine_or_none(p.g_b, p.g_a)
        if cw is not None:
            cos_w.append(cw)
        if cx is not None:
            cos_x.append(cx)
    row["cos_w"] = float(np.mean(cos_w)) if cos_w else None
    row["cos_x"] = float(np.mean(cos_x)) if cos_x else None
    return row


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def run_manifest(cfg: ExperimentConfig, method, seed, result: RunResult) -> dict:
    return {
        "config_digest": cfg.digest(),
        "config": cfg.to_dict(),
        "method": method,
        "seed": seed,
        "versions": {
            "surge": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "kernels": kernels.BACKEND,
        },
        "final_loss": result.final_loss,
        "final_dist_to_opt": result.final_dist,
        "test_accuracy": result.test_accuracy,
        "steps": cfg.steps,
    }


def run_dir_for(cfg: ExperimentConfig, method, seed) -> Path:
    safe = method.replace("+", "_")
    return Path(cfg.output_dir) / f"{safe}" / f"seed{seed}"


# --------------------------------------------------------------------------
# training

def run_training(cfg: ExperimentConfig, method: str, seed: int, out_dir=None, events=None,
                 write=True) -> RunResult:
    """Train one (method, seed) replica; optionally write metrics, manifest and checkpoint.

    ``events``, when a list, receives ``(phase, step)`` tuples in execution order.
    """
    model = build_model(cfg, method, seed)
    opt = Optimizer(cfg.optimizer, cfg.lr)
    params = model.parameters()
    dpgc = model.dpgc_layers()
    slot_of = {id(layer): s for s, layer in enumerate(model.quant_layers(), start=1)}
    log = events.append if events is not None else (lambda e: None)

    if cfg.task == "classifier":
        xtr, ytr, xte, yte = load_dataset(cfg, seed)
        batch_rng = make_rng(seed + 104_729)
        order, cursor = batch_rng.permutation(len(ytr)), 0

    rec_idx = None
    if cfg.record_grads_layer is not None:
        qidx = model.quant_layer_indices()
        if cfg.record_grads_layer > len(qidx):
            raise ValueError(f"record_grads_layer={cfg.record_grads_layer} but the model has {len(qidx)} binarizable layers")
        rec_idx = qidx[cfg.record_grads_layer - 1]
    recorded = []

    rows = []
    lambdas = {slot_of[id(layer)]: [] for layer in dpgc}
    loss_value, dist = float("nan"), None
    for step in range(1, cfg.steps + 1):
        try:
            tape = Tape()
            log(("forward", step))
            if cfg.task == "beale":
                out = model(tape=tape)
                log(("loss", step))
                loss = beale_tensor(out)
                dist = dist_to_opt(out.data)
            else:
                if cursor + cfg.batch_size > len(order):
                    order, cursor = batch_rng.permutation(len(ytr)), 0
                batch = order[cursor:cursor + cfg.batch_size]
                cursor += cfg.batch_size
                out = model(tape.constant(xtr[batch]), tape=tape)
                log(("loss", step))
                loss = softmax_cross_entropy(out, ytr[batch])
            loss_value = float(loss.data)
            log(("backward", step))
            grads = tape.backward(loss)
            parts = {id(layer): layer.backward_parts(grads) for layer in dpgc}
            if rec_idx is not None:
                recorded.append(grads[model.layer_inputs[rec_idx]].ravel().copy())
            if step % cfg.log_every == 0 or step == cfg.steps:
                rows.append(_metric_row(step, seed, method, loss_value, dist, model, parts))
            log(("ags", step))
            for layer in dpgc:
                lambdas[slot_of[id(layer)]].append(parts[id(layer)].lam)
                layer.update_lambda(parts[id(layer)])
            log(("update", step))
            opt.step(params, [grads[p] for p in params])
            model.clamp_scales()
            for p in params:
                if not np.all(np.isfinite(p.data)):
                    raise NonFiniteError("update")
        except NonFiniteError:
            raise TrainingDiverged(step, method, seed) from None
        except FloatingPointError:
            raise TrainingDiverged(step, method, seed) from None

    # final state: evaluate the trained model once more
    if cfg.task == "beale":
        final_out = model.predict()
        final_loss = float(beale_tensor(Tape().constant(final_out)).data)
        final_dist = dist_to_opt(final_out)
        test_acc = None
    else:
        logits = model.predict(xtr)
        tape = Tape()
        final_loss = float(softmax_cross_entropy(tape.constant(logits), ytr).data)
        final_dist = None
        test_acc = accuracy(model, xte, yte)
    if not np.isfinite(final_loss):
        raise TrainingDiverged(cfg.steps + 1, method, seed)

    result = RunResult(method, seed, rows, final_loss, final_dist, test_acc,
                       {k: np.array(v) for k, v in lambdas.items()},
                       np.concatenate(recorded) if recorded else None,
                       ags_history={slot_of[id(layer)]: np.array(layer.ags.history) for layer in dpgc})
    if write:
        d = Path(out_dir) if out_dir is not None else run_dir_for(cfg, method, seed)
        write_run(d, cfg, method, seed, result, model)
        result.run_dir = str(d)
    return result


def write_run(d: Path, cfg, method, seed, result: RunResult, model):
    try:
        d.mkdir(parents=True, exist_ok=True)
        (d / "metrics.csv").write_text(metrics_csv(result.rows))
        (d / "manifest.json").write_text(json.dumps(run_manifest(cfg, method, seed, result), indent=2, sort_keys=True) + "\n")
        if result.act_grads is not None:
            np.save(d / f"act_grads_l{cfg.record_grads_layer}.npy", result.act_grads)
        if cfg.write_checkpoint:
            export_checkpoint(model, d / "model.srge", strip=False)
    except OSError as exc:
        raise IOError(f"cannot write run artifacts to {d}: {exc}") from exc


# --------------------------------------------------------------------------
# multi-run orchestration

def _run_job(args):
    cfg, method, seed, write = args
    return run_training(cfg, method, seed, write=write)


def run_all(cfg: ExperimentConfig, methods=None, seeds=None, write=True):
    """Run every distinct (method, seed) pair; returns {(method, seed): RunResult}."""
    methods = list(dict.fromkeys(methods or cfg.methods))
    seeds = list(dict.fromkeys(seeds or cfg.seeds))
    jobs = [(cfg, m, s, write) for m in methods for s in seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    return {(r.method, r.seed): r for r in results}


def summarize(results: dict, methods, seeds) -> dict:
    """Pure reduction of completed runs into per-method medians and win counts."""
    methods = list(methods)
    seeds = sorted(seeds)
    missing = [f"{m}/seed{s}" for m in dict.fromkeys(methods) for s in seeds if (m, s) not in results]
    if missing:
        raise KeyError(f"missing runs: {', '.join(missing)}")
    entries = []
    for m in methods:
        runs = [results[(m, s)] for s in seeds]
        entry = {
            "method": m,
            "n_seeds": len(seeds),
            "median_final_loss": float(np.median([r.final_loss for r in runs])),
            "mean_final_loss": float(np.mean([r.final_loss for r in runs])),
        }
        dists = [r.final_dist for r in runs]
        entry["median_final_dist"] = None if None in dists else float(np.median(dists))
        accs = [r.test_accuracy for r in runs]
        entry["mean_test_accuracy"] = None if None in accs else float(np.mean(accs))
        entries.append(entry)
    unique = list(dict.fromkeys(methods))
    wins = {a: {b: sum(results[(a, s)].final_loss < results[(b, s)].final_loss for s in seeds)
                for b in unique if b != a} for a in unique}
    return {"seeds": seeds, "methods": entries, "pairwise_wins": wins}


def write_summary(summary: dict, out_dir, name="summary"):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        entries = summary["methods"]
        if entries:
            cols = list(entries[0].keys())
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(cols)
            for e in entries:
                w.writerow([_fmt(e[c]) for c in cols])
            (out / f"{name}.csv").write_text(buf.getvalue())
    except OSError as exc:
        raise IOError(f"cannot write summary to {out}: {exc}") from exc


def compare_methods(cfg: ExperimentConfig, write=True) -> dict:
    if len(cfg.methods) < 2:
        raise ValueError("compare_methods needs at least two methods")
    results = run_all(cfg, write=write)
    summary = summarize(results, cfg.methods, cfg.seeds)
    if write:
        write_summary(summary, cfg.output_dir)
    return summary


def trajectory_variance(losses) -> float:
    """Standard deviation of per-step loss changes."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size < 2:
        return 0.0
    return float(np.std(np.diff(losses)))


def noise_contrast(cfg: ExperimentConfig, write=True) -> dict:
    required = ["STE", "STE+Noise", "STE+SURGE"]
    methods = list(dict.fromkeys(required + [m for m in cfg.methods if m not in required]))
    results = run_all(cfg, methods, write=write)
    seeds = sorted(cfg.seeds)
    table = {}
    for m in methods:
        runs = [results[(m, s)] for s in seeds]
        table[m] = {
            "median_trajectory_variance": float(np.median([trajectory_variance(r.losses) for r in runs])),
            "median_final_loss": float(np.median([r.final_loss for r in runs])),
        }
    summary = {
        "seeds": seeds,
        "methods": [dict(method=m, **v) for m, v in table.items()],
        "noise_more_volatile_than_surge":
            table["STE+Noise"]["median_trajectory_variance"] > table["STE+SURGE"]["median_trajectory_variance"],
        "surge_beats_noise": table["STE+SURGE"]["median_final_loss"] < table["STE+Noise"]["median_final_loss"],
    }
    if write:
        write_summary(summary, cfg.output_dir, name="noise_contrast")
    return summary


def eta_sweep(cfg: ExperimentConfig, etas=(0.001, 0.005, 0.01, 0.05, 0.1),
              fixed_lambdas=(0.01, 0.05, 0.1, 0.5, 1.0), method="STE+SURGE", write=True) -> dict:
    """Adaptive scaling at several eta values against constant scales (no AGS)."""
    rows = []
    variants = [("eta", e, dict(eta=e, fixed_lambda=None)) for e in etas]
    variants += [("fixed_lambda", f, dict(fixed_lambda=f)) for f in fixed_lambdas]
    for kind, value, changes in variants:
        sub = cfg.replace(output_dir=str(Path(cfg.output_dir) / f"{kind}_{value}"), **changes)
        accs, losses, diverged = [], [], 0
        for seed in cfg.seeds:
            try:
                r = run_training(sub, method, seed, write=write)
            except TrainingDiverged:
                diverged += 1
                continue
            losses.append(r.final_loss)
            if r.test_accuracy is not None:
                accs.append(r.test_accuracy)
        rows.append({
            "variant": kind,
            "value": value,
            "n_runs": len(cfg.seeds),
            "n_diverged": diverged,
            "mean_test_accuracy": float(np.mean(accs)) if accs else None,
            "median_final_loss": float(np.median(losses)) if losses else None,
        })
    summary = {"method": method, "seeds": list(cfg.seeds), "methods": rows}
    if write:
        write_summary(summary, cfg.output_dir, name="eta_sweep")
    return summary


# --------------------------------------------------------------------------
# gradient distribution diagnostics

def histogram_from_values(values, edges=None, bins=50) -> dict:
    mags = np.abs(np.ravel(np.asarray(values, dtype=np.float64)))
    if mags.size == 0:
        raise ValueError("no gradient values recorded")
    zero_fraction = float(np.mean(mags == 0.0))
    if edges is None:
        top = float(mags.max())
        edges = np.array([0.0, 0.0]) if top == 0.0 else np.linspace(0.0, top, bins + 1)
    edges = np.asarray(edges, dtype=np.float64)
    if edges[-1] == edges[0]:
        counts = np.array([mags.size])
    else:
        counts, _ = np.histogram(mags, bins=edges)
    xs, n_at = np.unique(mags, return_counts=True)
    cdf = np.cumsum(n_at) / mags.size
    return {
        "n": int(mags.size),
        "zero_fraction": zero_fraction,
        "bin_edges": edges.tolist(),
        "counts": counts.tolist(),
        "cdf_x": xs.tolist(),
        "cdf": cdf.tolist(),
    }


def _find_runs(run_dir: Path, layer: int):
    name = f"act_grads_l{layer}.npy"
    if (run_dir / name).exists():
        return [run_dir]
    return sorted(p.parent for p in run_dir.rglob(name))


def gradient_histogram(run_dir, layer: int, bins=50) -> dict:
    """Magnitude histograms, CDFs and zero fractions of recorded activation gradients.

    ``run_dir`` is one run directory or a tree of them; runs are grouped by
    method and share bin edges.
    """
    run_dir = Path(run_dir)
    runs = _find_runs(run_dir, layer)
    if not runs:
        raise ValueError(f"no run under {run_dir} recorded activation gradients for layer {layer}")
    groups = {}
    for d in runs:
        manifest = json.loads((d / "manifest.json").read_text()) if (d / "manifest.json").exists() else {}
        method = manifest.get("method", d.name)
        groups.setdefault(method, []).append(np.load(d / f"act_grads_l{layer}.npy"))
    merged = {m: np.abs(np.concatenate(v)) for m, v in groups.items()}
    top = max(float(v.max()) for v in merged.values())
    edges = np.array([0.0, 0.0]) if top == 0.0 else np.linspace(0.0, top, bins + 1)
    return {"layer": layer, "methods": {m: histogram_from_values(v, edges) for m, v in sorted(merged.items())}}
