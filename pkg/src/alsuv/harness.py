"""Experiment orchestration: world, attacks, evaluation, diagnostics, files.

The attack only ever receives an ``AttackerView``; unseen encoders and the
true validation feature stay on the evaluation side of the boundary.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .attack import (
    AttackConfig,
    AttackOutcome,
    DegeneratePseudoTargetError,
    NoCandidatesError,
    alsuv_attack,
    finish_attack,
    optimize_latents,
)
from .config import ExperimentConfig, config_to_dict, sweep_point, validate_sweep
from .diagnostics import flatness, loss_surface_slice, seen_objective
from .metrics import EvalReport, evaluate_encoder, pseudo_target_analysis, unseen_average
from .numerics import DegenerateEmbeddingError, Mlp, cosine_similarity, mlp_forward
from .optimize import DivergedError
from .tables import write_csv
from .worldgen import UNSEEN, World, build_world, world_manifest

log = logging.getLogger(__name__)

ATTACK_FAILURES = (NoCandidatesError, DegeneratePseudoTargetError, DivergedError,
                   DegenerateEmbeddingError)
EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3


# -- knowledge boundary ------------------------------------------------------------


@dataclass(frozen=True)
class AttackerView:
    """Everything the attacker may touch for one identity."""

    generator: Mlp
    seen: Mlp
    validation: Mlp
    target: np.ndarray  # seen-encoder feature of the real image


def attacker_view(world: World, identity: int) -> AttackerView:
    ens = world.ensemble
    return AttackerView(world.generator, ens.seen, ens.validation,
                        world.targets[identity, ens.seen_index])


def run_attack(view: AttackerView, cfg: AttackConfig) -> AttackOutcome:
    return alsuv_attack(cfg, view.generator, view.seen, view.validation, view.target)


def identity_seed(master: int, identity: int) -> int:
    """Attack seed for one identity; independent streams per identity."""
    ss = np.random.SeedSequence(master, spawn_key=(4, identity))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def unseen_similarity(world: World, identity: int, image) -> float:
    ens = world.ensemble
    sims = [cosine_similarity(mlp_forward(ens.encoders[k], image), world.targets[identity, k])
            for k in ens.unseen_indices]
    return float(np.mean(sims))


# -- threading -----------------------------------------------------------------------


def resolve_threads(requested: int | None) -> int:
    """``--threads`` wins, then ``ALSUV_THREADS``, then 1; 0 means one per core."""
    if requested is None:
        env = os.environ.get("ALSUV_THREADS", "").strip()
        requested = int(env) if env else 1
    if requested < 0:
        raise ValueError("thread count must be >= 0")
    return requested or (os.cpu_count() or 1)


def _map(fn, items, threads: int) -> list:
    """Ordered map; results never depend on the worker count."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- single experiment ---------------------------------------------------------------


def _attack_task(world: World, cfg: ExperimentConfig, i: int) -> dict:
    acfg = cfg.attack.for_identity(identity_seed(cfg.seed, i))
    try:
        outcome = run_attack(attacker_view(world, i), acfg)
    except ATTACK_FAILURES as exc:
        log.warning("identity %d failed: %s", i, exc)
        return {"index": i, "status": "failed", "error": str(exc)}
    ens = world.ensemble
    seen_top1, selected, pseudo = pseudo_target_analysis(
        outcome, world.generator, ens.validation, world.targets[i, ens.validation_index])
    row = {
        "index": i,
        "status": "ok",
        "seed": acfg.seed,
        "selected_index": outcome.selected_index,
        "selected_rank": outcome.selected_rank,
        "k_top": outcome.k_top,
        "seen_similarity": float(outcome.seen_sims[outcome.selected_rank]),
        "unseen_similarity": unseen_similarity(world, i, outcome.x_star),
        "distance_seen_top1": seen_top1,
        "distance_selected": selected,
        "distance_pseudo_target": pseudo,
        "diverged": outcome.diverged,
        "_outcome": outcome,
    }
    if cfg.diagnostics.enabled:
        row["flatness"] = _flatness_pair(world, cfg, i, outcome, acfg.seed)
    return row


def _flatness_pair(world: World, cfg: ExperimentConfig, i: int, outcome: AttackOutcome,
                   seed: int) -> dict:
    """Curvature and unseen loss at the averaged winner and at its last iterate."""
    view = attacker_view(world, i)
    _, grad = seen_objective(view.generator, view.seen, view.target)
    d = cfg.diagnostics
    out = {}
    points = {"averaged": outcome.candidates[outcome.selected_rank],
              "final": outcome.final_iterates[outcome.selected_rank]}
    for name, z in points.items():
        stats = flatness(grad, z, probes=d.probes, seed=seed, iters=d.iters)
        x = mlp_forward(world.generator, z)
        out[name] = {**stats.to_dict(), "unseen_loss": 1.0 - unseen_similarity(world, i, x)}
    return out


def evaluate(world: World, cfg: ExperimentConfig, reconstructions: dict[int, np.ndarray],
             encoders=None) -> EvalReport:
    ens = world.ensemble
    indices = range(len(ens)) if encoders is None else encoders
    per_encoder = [
        evaluate_encoder(k, ens.roles[k], ens.encoders[k], world.identities, world.targets,
                         reconstructions, cfg.metrics.fars)
        for k in indices
    ]
    return EvalReport(per_encoder, unseen_average(per_encoder))


def _median(values) -> float:
    return float(np.median(values)) if len(values) else math.nan


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> dict:
    """Attack every configured identity and evaluate; returns the report dict.

    The report carries ``failed`` (identity indices) so callers can map a
    partial failure to a nonzero exit status.
    """
    t0 = time.perf_counter()
    world = build_world(cfg.world, cfg.seed)
    t_world = time.perf_counter()
    rows = _map(lambda i: _attack_task(world, cfg, i), range(cfg.n_attacked), threads)
    t_attack = time.perf_counter()
    ok = [r for r in rows if r["status"] == "ok"]
    failed = [r["index"] for r in rows if r["status"] != "ok"]
    reconstructions = {r["index"]: r["_outcome"].x_star for r in ok}
    report_eval = evaluate(world, cfg, reconstructions) if ok else EvalReport([])
    report_eval.pseudo_target_distances = {
        "seen_top1": _median([r["distance_seen_top1"] for r in ok]),
        "selected": _median([r["distance_selected"] for r in ok]),
        "pseudo_target": _median([r["distance_pseudo_target"] for r in ok]),
    }
    flat = {}
    if cfg.diagnostics.enabled and ok:
        for point in ("averaged", "final"):
            for key in ("trace", "top_eigenvalue", "unseen_loss"):
                flat[f"median_{key}_{point}"] = _median([r["flatness"][point][key] for r in ok])
    surfaces = {}
    if cfg.diagnostics.enabled:
        d = cfg.diagnostics
        for r in ok[: d.surfaces]:
            view = attacker_view(world, r["index"])
            loss, _ = seen_objective(view.generator, view.seen, view.target)
            surfaces[r["index"]] = loss_surface_slice(loss, r["_outcome"].z_star, seed=r["seed"],
                                                      radius=d.radius, resolution=d.resolution)
    t_end = time.perf_counter()
    return {
        "version": __version__,
        "config": config_to_dict(cfg),
        "world": {"digest": world.digest(), "roles": list(world.ensemble.roles),
                  "rho": world.ensemble.rho},
        "identities": [{k: v for k, v in r.items() if not k.startswith("_")} for r in rows],
        "failed": failed,
        "evaluation": report_eval.to_dict(),
        "flatness": flat,
        "_surfaces": surfaces,
        "_eval": report_eval,
        "_timings": {"world": t_world - t0, "attack": t_attack - t_world,
                     "evaluate": t_end - t_attack, "total": t_end - t0, "threads": threads},
    }


# -- ablation and sweeps ---------------------------------------------------------------


ABLATION_HEADER = ["seed", "world_hash", "n", "averaging", "validation", "k_top", "identities",
                   "failed", "mean_unseen_similarity", "median_unseen_similarity",
                   "stderr_unseen_similarity", "mean_seen_similarity", "unseen_sar",
                   "unseen_rank1"]


def _stderr(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(values.size))


def _ablation_identity(world: World, cfg: ExperimentConfig, seed: int, i: int) -> dict:
    """Every grid cell for one identity. Each ``n`` is optimized once and the
    averaging / validation switches reuse that batch."""
    view = attacker_view(world, i)
    ab = cfg.ablation
    cells = {}
    for n in ab.ns:
        acfg = cfg.attack.for_identity(identity_seed(seed, i), n=n, k_top=min(cfg.attack.k_top, n))
        try:
            batch = optimize_latents(acfg, view.generator, view.seen, view.target)
        except ATTACK_FAILURES:
            for av in ab.averaging:
                for va in ab.validation:
                    cells[n, av, va] = None
            continue
        for av in ab.averaging:
            for va in ab.validation:
                try:
                    o = finish_attack(batch, replace(acfg, averaging=av, validation=va),
                                      view.generator, view.seen, view.validation, view.target)
                except ATTACK_FAILURES:
                    cells[n, av, va] = None
                    continue
                cells[n, av, va] = (o.x_star, float(o.seen_sims[o.selected_rank]),
                                    unseen_similarity(world, i, o.x_star), o.k_top)
    return cells


def run_ablation(cfg: ExperimentConfig, threads: int = 1) -> list[dict]:
    """One row per (seed, n, averaging, validation) cell; worlds shared per seed."""
    rows = []
    seeds = cfg.ablation.seeds if cfg.ablation.seeds is not None else (cfg.seed,)
    for seed in seeds:
        world = build_world(cfg.world, seed)
        digest = world.digest()
        per_id = _map(lambda i: _ablation_identity(world, cfg, seed, i), range(cfg.n_attacked),
                      threads)
        unseen = [k for k, r in enumerate(world.ensemble.roles) if r == UNSEEN]
        for n in cfg.ablation.ns:
            for av in cfg.ablation.averaging:
                for va in cfg.ablation.validation:
                    got = {i: c[n, av, va] for i, c in enumerate(per_id) if c[n, av, va] is not None}
                    sims = [g[2] for g in got.values()]
                    row = {
                        "seed": seed, "world_hash": digest, "n": n, "averaging": av,
                        "validation": va, "k_top": min(cfg.attack.k_top, n),
                        "identities": len(got), "failed": cfg.n_attacked - len(got),
                        "mean_unseen_similarity": float(np.mean(sims)) if sims else math.nan,
                        "median_unseen_similarity": _median(sims),
                        "stderr_unseen_similarity": _stderr(sims),
                        "mean_seen_similarity": float(np.mean([g[1] for g in got.values()]))
                        if got else math.nan,
                        "unseen_sar": math.nan, "unseen_rank1": math.nan,
                    }
                    if got:
                        rep = evaluate(world, cfg, {i: g[0] for i, g in got.items()}, unseen)
                        row["unseen_sar"] = rep.unseen_average["sar"]
                        row["unseen_rank1"] = rep.unseen_average["rank1"]
                    rows.append(row)
    return rows


def run_sweep(cfg: ExperimentConfig, threads: int = 1) -> dict:
    """Per swept value, mean and standard error over identities of each metric."""
    validate_sweep(cfg)
    name = cfg.sweep.hyperparameter
    points = []
    failed = 0
    for value in cfg.sweep.values:
        wparams, aparams = sweep_point(cfg, value)
        world = build_world(wparams, cfg.seed)
        ens = world.ensemble

        def task(i, world=world, aparams=aparams, ens=ens):
            try:
                o = run_attack(attacker_view(world, i), aparams.for_identity(identity_seed(cfg.seed, i)))
            except ATTACK_FAILURES:
                return None
            val = cosine_similarity(mlp_forward(ens.validation, o.x_star),
                                    world.targets[i, ens.validation_index])
            return {"unseen_similarity": unseen_similarity(world, i, o.x_star),
                    "seen_similarity": float(o.seen_sims[o.selected_rank]),
                    "validation_similarity": val}

        results = [r for r in _map(task, range(cfg.n_attacked), threads) if r is not None]
        failed += cfg.n_attacked - len(results)
        points.append({
            "value": value,
            "metrics": {m: {"mean": float(np.mean([r[m] for r in results])) if results else math.nan,
                            "stderr": _stderr([r[m] for r in results])}
                        for m in cfg.sweep.metrics},
        })
    return {"hyperparameter": name, "points": points, "failed": failed}


PLOTS_HEADER = ["hyperparameter", "value", "metric", "mean", "stderr"]


def emit_plots_data(report: dict) -> list[tuple]:
    """Long-format rows (hyperparameter, value, metric, mean, stderr)."""
    sweep = report.get("sweep") if isinstance(report, dict) else None
    if not sweep or not sweep.get("points"):
        raise ValueError("report holds no sweep results")
    rows = []
    for point in sweep["points"]:
        for metric, stats in point["metrics"].items():
            rows.append((sweep["hyperparameter"], point["value"], metric, stats["mean"],
                         stats["stderr"]))
    return rows


# -- files ---------------------------------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def write_json(path, doc) -> None:
    text = json.dumps(_jsonable(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"
    Path(path).write_bytes(text.encode("utf-8"))


def public_report(report: dict) -> dict:
    return {k: v for k, v in report.items() if not k.startswith("_")}


IDENTITY_HEADER = ["identity", "status", "selected_index", "selected_rank", "k_top",
                   "seen_similarity", "unseen_similarity", "distance_seen_top1",
                   "distance_selected", "distance_pseudo_target", "diverged"]


def write_experiment(report: dict, out) -> list[Path]:
    """report.json, metrics.csv, identities.csv, flatness.csv, surface_<i>.csv, timings.json."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def path(name):
        written.append(out / name)
        return out / name

    write_json(path("report.json"), public_report(report))
    write_csv(path("metrics.csv"), ["encoder", "role", "metric", "value"], report["_eval"].rows())
    id_rows = [
        [r["index"], r["status"]] + [r.get(k) for k in IDENTITY_HEADER[2:-1]]
        + [len(r.get("diverged", []))]
        for r in report["identities"]
    ]
    write_csv(path("identities.csv"), IDENTITY_HEADER, id_rows)
    flat_rows = []
    for r in report["identities"]:
        for point, stats in sorted(r.get("flatness", {}).items()):
            flat_rows.append([r["index"], point, stats["top_eigenvalue"], stats["eigen_converged"],
                              stats["trace"], stats["trace_stderr"], stats["unseen_loss"]])
    if flat_rows:
        write_csv(path("flatness.csv"), ["identity", "point", "top_eigenvalue", "eigen_converged",
                                         "trace", "trace_stderr", "unseen_loss"], flat_rows)
    for i, surface in sorted(report["_surfaces"].items()):
        surface.to_csv(path(f"surface_{i}.csv"))
    write_json(out / "timings.json", report["_timings"])
    return written


def write_ablation(rows: list[dict], out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation.csv", ABLATION_HEADER, ([r[h] for h in ABLATION_HEADER] for r in rows))
    return out / "ablation.csv"


def write_sweep(cfg: ExperimentConfig, sweep: dict, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "sweep.json", {"version": __version__, "config": config_to_dict(cfg),
                                    "sweep": sweep})
    write_csv(out / "sweep.csv", PLOTS_HEADER, emit_plots_data({"sweep": sweep}))
    return out / "sweep.csv"


def write_world(world: World, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    doc = world_manifest(world, with_networks=True)
    doc["digest"] = world.digest()
    write_json(out / "world.json", doc)
    return out / "world.json"
