"""Config-driven experiment commands: mfpt, train, sweep and diagnose.

Every output CSV starts with a ``# config_hash=<hash>`` line, and per-run
row files also carry the hash as a column, so rows from different configs
cannot be mixed silently. Runs are independent and may execute in worker
processes; results are collected in submission order, so outputs do not
depend on the worker count.
"""
from __future__ import annotations

import csv
import json
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

import numpy as np

from . import __version__, data, diagnostics, langevin, nn
from . import training as tr
from .config import ConfigError, config_hash, dump, seeds_of, with_value

OUT_ENV = "RESET_OPT_OUT"
DEFAULT_OUT = "reset_opt_out"
SUMMARY_METRICS = ("best_val_loss", "test_acc", "rdvloss", "rdtacc", "n_resets")
RUN_COLUMNS = ("config_hash", "axis", "value", "r", "seed", "status", "best_iteration",
               "best_val_loss", "best_val_acc", "test_acc", "n_resets", "final_mem_frac",
               "rdvloss", "rdtacc", "error")
DIAG_COLUMNS = ("iteration", "cos_tc", "cos_tw", "cos_cw", "norm_c", "norm_w", "norm_gap",
                "trace_sigma", "trace_d", "cos_tc_train", "cos_tw_train", "cos_cw_train",
                "norm_gap_train")
MFPT_COLUMNS = ("gamma", "r_equiv", "D", "v", "L", "mfpt_mc", "mfpt_se", "mfpt_closed", "rel_gap", "censored")
OPT_COLUMNS = ("D", "v", "L", "peclet", "beneficial", "gamma_star", "mfpt_star",
               "mfpt_no_reset", "improvement_ratio", "interior")
# seeds for data generation, split and label noise are sub-streams of the run seed
_DATA_STREAM, _SPLIT_STREAM, _NOISE_STREAM = 11, 12, 13
_AXIS_KEYS = {"r": "reset.reset_probability", "B": "optimizer.batch_size", "tau": "noise.rate",
              "epsilon": "reset.perturbation_eps", "section_mask": "reset.sections"}


def fmt(value) -> str:
    """Lossless, locale-free text for a CSV cell; missing values are empty."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else repr(float(value))
    if isinstance(value, (list, tuple)):
        return "+".join(str(v) for v in value)
    return str(value)


def write_table(path, columns, rows, chash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(row.get(c)) for c in columns])


def read_table(path) -> tuple:
    """Return ``(config_hash, rows)`` from a table written by :func:`write_table`."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# config_hash="):
            raise ValueError(f"{path}: missing config_hash header")
        return first.strip().split("=", 1)[1], list(csv.DictReader(fh))


def output_dir(cfg: dict, override: Optional[str] = None) -> str:
    return override or cfg["output_dir"] or os.environ.get(OUT_ENV) or DEFAULT_OUT


# ---------------------------------------------------------------------------
# building blocks


def build_datasets(cfg: dict, seed: int) -> tuple:
    """``(train, val, test)`` for one run seed. Validation is clean."""
    d = cfg["data"]
    if d["source"] == "blobs":
        full = data.make_blobs(d["classes"], d["per_class"], d["dim"], d["separation"],
                               seed=[seed, _DATA_STREAM])
        test = None
    else:
        full = data.load_cifar_binary(d["paths"], d["classes"])
        test = data.load_cifar_binary(d["test_paths"], d["classes"]) if d["test_paths"] else None
    if d["limit"] is not None:
        full = full.subset(np.arange(min(d["limit"], len(full))))
    tr_idx, val_idx = data.split_indices(full, d["val_fraction"], seed=[seed, _SPLIT_STREAM])
    train, val = full.subset(tr_idx), full.subset(val_idx)
    if d["source"] == "cifar" and d["standardize"]:
        stats = data.channel_stats(train)
        train, val = data.apply_standardization(train, *stats), data.apply_standardization(val, *stats)
        test = None if test is None else data.apply_standardization(test, *stats)
    n = cfg["noise"]
    spec = data.NoiseSpec(n["kind"], float(n["rate"]), n["flip_map"])
    train = data.corrupt(train, spec, seed=[seed, _NOISE_STREAM])
    # the clean validation split doubles as the test set unless one is given
    return train, val, val if test is None else test


def build_network(cfg: dict, input_shape: tuple, num_classes: int) -> nn.NetworkSpec:
    net = cfg["network"]
    if net["preset"] == "fcn":
        return nn.fcn(input_shape, net["hidden"], num_classes, net["batch_norm"])
    if net["preset"] == "small_cnn":
        return nn.small_cnn(num_classes, net["batch_norm"], input_shape)
    if net["preset"] == "vcnn":
        return nn.vcnn(num_classes, input_shape)
    return nn.NetworkSpec.from_text(net["text"])


def reset_config(cfg: dict) -> tr.ResetConfig:
    r = cfg["reset"]
    return tr.ResetConfig(float(r["reset_probability"]), r["patience"], r["validation_interval"],
                          tuple(r["sections"]), float(r["perturbation_eps"]),
                          r["selection_metric"], r["fixed_checkpoint_iteration"],
                          r["arm_on_improvement"])


def optimizer_config(cfg: dict) -> tr.OptimizerConfig:
    o = cfg["optimizer"]
    return tr.OptimizerConfig(float(o["learning_rate"]), float(o["momentum"]), o["batch_size"],
                              o["total_iters"], o["loss"], o["lr_decay_step"],
                              float(o["lr_decay_factor"]), o["sampling"])


def _setup(cfg, seed):
    train_ds, val_ds, test_ds = build_datasets(cfg, seed)
    net = build_network(cfg, train_ds.features.shape[1:], train_ds.num_classes)
    return net, train_ds, val_ds, test_ds


def run_training(cfg: dict, seed: int) -> tr.TrainResult:
    """One seeded training run; configuration problems raise ``ConfigError``."""
    try:
        net, train_ds, val_ds, test_ds = _setup(cfg, seed)
        rcfg, opt = reset_config(cfg), optimizer_config(cfg)
    except (ValueError, nn.DimensionError) as exc:
        raise ConfigError(str(exc)) from exc
    with np.errstate(over="ignore", invalid="ignore"):
        return tr.train(net, train_ds, val_ds, test_ds, rcfg, opt, seed=seed)


def run_summary(result: tr.TrainResult) -> dict:
    row = result.best_row()
    final = result.metrics[-1].mem_frac if result.metrics else None
    return {"status": "diverged" if result.diverged else "ok",
            "best_iteration": result.best_iteration,
            "best_val_loss": row.val_loss if row else math.nan,
            "best_val_acc": row.val_acc if row else math.nan,
            "test_acc": row.test_acc if row else math.nan,
            "n_resets": result.n_resets, "final_mem_frac": final, "error": result.error}


def add_relative(summary: dict, baseline: Optional[dict]) -> dict:
    """Attach RDVLoss / RDTAcc against a matched-seed baseline summary."""
    out = dict(summary)
    ok = baseline is not None and summary["status"] == "ok" and baseline["status"] == "ok"
    out["rdvloss"] = tr.relative_difference(summary["best_val_loss"], baseline["best_val_loss"]) if ok else None
    out["rdtacc"] = tr.relative_difference(summary["test_acc"], baseline["test_acc"]) if ok else None
    return out


def aggregate(values) -> dict:
    """Mean, standard error and standard deviation (ddof=1) of present values."""
    vals = np.array([float(v) for v in values if v is not None and not
                     (isinstance(v, float) and math.isnan(v))], dtype=np.float64)
    n = int(vals.size)
    mean = float(vals.mean()) if n else math.nan
    sd = float(vals.std(ddof=1)) if n > 1 else math.nan
    se = sd / math.sqrt(n) if n > 1 else math.nan
    return {"n": n, "mean": mean, "se": se, "sd": sd}


def _parse_cell(text: str):
    return None if text == "" else float(text)


def aggregate_run_tables(paths, group_by=("axis", "value", "r")) -> tuple:
    """Recompute the aggregate rows from one or more per-run tables.

    All files and rows must carry the same config hash; otherwise
    ``ValueError`` is raised. Returns ``(config_hash, aggregate_rows)``.
    """
    chash, rows = None, []
    for path in paths:
        h, table = read_table(path)
        for row in table:
            if row["config_hash"] != h:
                raise ValueError(f"{path}: row hash {row['config_hash']} != file hash {h}")
        if chash is not None and h != chash:
            raise ValueError(f"refusing to mix runs from configs {chash} and {h}")
        chash = h
        rows.extend(table)
    groups: dict = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in group_by), []).append(row)
    out = []
    for key, members in groups.items():
        entry = dict(zip(group_by, key))
        entry.update(_aggregate_members(
            [{m: _parse_cell(r[m]) for m in SUMMARY_METRICS} | {"status": r["status"]}
             for r in members]))
        out.append(entry)
    return chash, out


def _aggregate_members(summaries) -> dict:
    ok = [s for s in summaries if s["status"] == "ok"]
    entry = {"n_runs": len(summaries), "n_failed": len(summaries) - len(ok)}
    for metric in SUMMARY_METRICS:
        agg = aggregate(s.get(metric) for s in ok)
        for stat in ("mean", "se", "sd"):
            entry[f"{metric}_{stat}"] = agg[stat]
    return entry


AGG_COLUMNS = ("n_runs", "n_failed") + tuple(
    f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "se", "sd"))


def _pool_map(fn, jobs, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


def _metadata(path, cfg: dict, chash: str, command: str, started: float, seeds, extra=None) -> None:
    meta = {"command": command, "config_hash": chash, "version": __version__,
            "seeds": list(seeds), "wall_time_s": round(time.time() - started, 3),
            "decisions": {"matched_seed_baseline": True, "validation_interval": cfg["reset"]["validation_interval"],
                          "clean_validation": True, "failed_runs_imputed": False,
                          "standardize_inputs": cfg["data"]["standardize"],
                          "diagnostics_mode": cfg["diagnostics"]["mode"]}}
    meta.update(extra or {})
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def _prepare(cfg: dict, out: str) -> str:
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.yaml"), "w") as fh:
        fh.write(dump(cfg))
    return config_hash(cfg)


# ---------------------------------------------------------------------------
# mfpt


def _mfpt_point(D, v, L, gamma, dt, n, bridge, max_time, seed):
    closed = langevin.mfpt_closed_form(D, v, L, gamma)
    # r_equiv = gamma * dt is the per-step reset probability; reported, not asserted equivalent
    row = {"gamma": gamma, "r_equiv": gamma * dt, "D": D, "v": v, "L": L, "mfpt_closed": closed}
    if n > 0 and math.isfinite(closed):
        lcfg = langevin.LangevinConfig(D, v, L, gamma, dt, max_time, bridge)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", langevin.StabilityWarning)
            res = langevin.mfpt_estimate(lcfg, n, seed)
        row.update(mfpt_mc=res.estimate, mfpt_se=res.std_error, rel_gap=res.relative_gap,
                   censored=res.censored)
    return row


def cmd_mfpt(cfg: dict, out: str, workers: int = 1, seed_base: Optional[int] = None) -> dict:
    started = time.time()
    chash = _prepare(cfg, out)
    lang = cfg["langevin"]
    base = seeds_of(cfg, seed_base)[0]
    points = [(float(D), float(v), float(L)) for D in lang["D"] for v in lang["v"] for L in lang["L"]]
    jobs = []
    for D, v, L in points:
        for g in lang["gammas"]:
            seed = int(np.random.default_rng([base, len(jobs)]).integers(2 ** 62))
            jobs.append((D, v, L, float(g), float(lang["dt"]),
                         lang["n_trajectories"], lang["bridge"], lang["max_time"], seed))
    rows = _pool_map(_mfpt_point, jobs, workers)
    write_table(os.path.join(out, "mfpt.csv"), MFPT_COLUMNS, rows, chash)
    optima = []
    for D, v, L in points:
        try:
            opt = langevin.optimal_reset_rate(D, v, L)
        except langevin.BracketError as exc:
            raise FloatingPointError(str(exc)) from exc
        optima.append({"D": D, "v": v, "L": L, "peclet": opt.peclet,
                       "beneficial": langevin.reset_beneficial(D, v, L), "gamma_star": opt.gamma,
                       "mfpt_star": opt.mfpt, "mfpt_no_reset": opt.mfpt_no_reset,
                       "improvement_ratio": opt.improvement_ratio, "interior": opt.interior})
    write_table(os.path.join(out, "mfpt_optimum.csv"), OPT_COLUMNS, optima, chash)
    _metadata(os.path.join(out, "metadata.json"), cfg, chash, "mfpt", started, [base])
    return {"rows": rows, "optima": optima, "config_hash": chash}


# ---------------------------------------------------------------------------
# train


def _train_job(cfg, seed):
    result = run_training(cfg, seed)
    return result, nn.dump_params(result.best_params)


def cmd_train(cfg: dict, out: str, workers: int = 1, seed_base: Optional[int] = None) -> dict:
    """Seeded runs at the configured ``r`` plus matched r=0 baselines when ``r > 0``."""
    started = time.time()
    chash = _prepare(cfg, out)
    seeds = seeds_of(cfg, seed_base)
    r = float(cfg["reset"]["reset_probability"])
    jobs = [(cfg, s) for s in seeds]
    base_cfg = with_value(cfg, "reset.reset_probability", 0.0)
    if r > 0:
        jobs += [(base_cfg, s) for s in seeds]
    results = _pool_map(_train_job, jobs, workers)
    runs, baselines = results[:len(seeds)], results[len(seeds):]
    rows = []
    for i, s in enumerate(seeds):
        result, snapshot = runs[i]
        result.write_csv(os.path.join(out, f"metrics_seed{s}.csv"), f"config_hash={chash}")
        if cfg["save_snapshots"]:
            with open(os.path.join(out, f"best_seed{s}.rsps"), "wb") as fh:
                fh.write(snapshot)
        base_summary = None
        if baselines:
            base = baselines[i][0]
            base.write_csv(os.path.join(out, f"baseline_metrics_seed{s}.csv"), f"config_hash={chash}")
            base_summary = run_summary(base)
            rows.append({"config_hash": chash, "axis": "r", "value": 0.0, "r": 0.0, "seed": s,
                         **add_relative(base_summary, base_summary)})
        rows.append({"config_hash": chash, "axis": "r", "value": r, "r": r, "seed": s,
                     **add_relative(run_summary(result), base_summary)})
    write_table(os.path.join(out, "runs.csv"), RUN_COLUMNS, rows, chash)
    _, agg = aggregate_run_tables([os.path.join(out, "runs.csv")])
    write_table(os.path.join(out, "summary.csv"), ("axis", "value", "r") + AGG_COLUMNS, agg, chash)
    failed = sum(row["status"] != "ok" for row in rows)
    _metadata(os.path.join(out, "metadata.json"), cfg, chash, "train", started, seeds,
              {"failed_runs": failed})
    return {"runs": rows, "summary": agg, "config_hash": chash, "failed": failed}


# ---------------------------------------------------------------------------
# sweep


def _section_value(value) -> list:
    if isinstance(value, str):
        value = ["former", "latter"] if value in ("both", "all") else value.split("+")
    if not isinstance(value, list) or not value or set(value) - {"former", "latter"}:
        raise ConfigError(f"sweep.values: bad section mask {value!r}")
    return list(value)


def _sweep_plan(cfg: dict) -> tuple:
    sweep = cfg["sweep"]
    axis, values = sweep["axis"], list(sweep["values"])
    if axis == "r":
        if sweep["r_values"] is not None:
            raise ConfigError("sweep.r_values: not allowed when the axis is r itself")
        if not any(float(v) == 0.0 for v in values):
            raise ConfigError("sweep.values: the r axis needs the r=0 baseline point")
        return axis, [(v, float(v)) for v in values]
    r_values = sweep["r_values"]
    if r_values is None:
        r_values = [0.0, cfg["reset"]["reset_probability"]]
    r_values = [float(x) for x in r_values]
    if 0.0 not in r_values:
        raise ConfigError("sweep.r_values: missing the r=0 baseline point")
    if not any(x > 0 for x in r_values):
        raise ConfigError("sweep.r_values: needs at least one r > 0")
    if axis == "section_mask":
        values = [_section_value(v) for v in values]
    return axis, [(v, r) for v in values for r in dict.fromkeys(r_values)]


def _point_config(cfg: dict, axis: str, value, r: float, offset_base=None) -> dict:
    c = with_value(cfg, "reset.reset_probability", r)
    if axis == "checkpoint_offset":
        if r > 0:
            it = int(offset_base + int(value))
            c = with_value(c, "reset.fixed_checkpoint_iteration",
                           min(max(it, 1), cfg["optimizer"]["total_iters"]))
        return c
    if r == 0 and axis in ("epsilon", "section_mask"):
        return c  # perturbation and mask are inert without resets
    if axis != "r":
        c = with_value(c, _AXIS_KEYS[axis], value)
    return c


def _run_unique(job_cfgs: list, workers: int) -> list:
    """Run each distinct (config, seed) once and fan results back out."""
    keys, unique = [], {}
    for c, s in job_cfgs:
        k = (config_hash(c), s)
        keys.append(k)
        unique.setdefault(k, (c, s))
    order = list(unique)
    results = _pool_map(_summary_job, [unique[k] for k in order], workers)
    lookup = dict(zip(order, results))
    return [lookup[k] for k in keys]


def _summary_job(cfg, seed):
    return run_summary(run_training(cfg, seed))


def cmd_sweep(cfg: dict, out: str, workers: int = 1, seed_base: Optional[int] = None) -> dict:
    """One aggregate row per (axis value, r); RDVLoss against r=0 at the same point."""
    started = time.time()
    chash = _prepare(cfg, out)
    seeds = seeds_of(cfg, seed_base)
    axis, plan = _sweep_plan(cfg)
    if axis == "checkpoint_offset":
        base_cfg = with_value(cfg, "reset.reset_probability", 0.0)
        base = _run_unique([(base_cfg, s) for s in seeds], workers)
        t_m = {s: b["best_iteration"] for s, b in zip(seeds, base)}
        jobs = [(_point_config(cfg, axis, v, r, t_m[s]), s) for v, r in plan for s in seeds]
    else:
        jobs = [(_point_config(cfg, axis, v, r), s) for v, r in plan for s in seeds]
    summaries = _run_unique(jobs, workers)
    by_point = {}
    for (v, r), s, summ in zip([p for p in plan for _ in seeds], seeds * len(plan), summaries):
        by_point[(fmt(v), r, s)] = summ
    zero = next((v for v, r in plan if r == 0.0), None)
    rows = []
    for v, r in plan:
        for s in seeds:
            baseline_key = (fmt(zero if axis == "r" else v), 0.0, s)
            rows.append({"config_hash": chash, "axis": axis, "value": v, "r": r, "seed": s,
                         **add_relative(by_point[(fmt(v), r, s)], by_point[baseline_key])})
    runs_path = os.path.join(out, "sweep_runs.csv")
    write_table(runs_path, RUN_COLUMNS, rows, chash)
    _, agg = aggregate_run_tables([runs_path])
    write_table(os.path.join(out, "sweep.csv"), ("axis", "value", "r") + AGG_COLUMNS, agg, chash)
    failed = sum(row["status"] != "ok" for row in rows)
    _metadata(os.path.join(out, "metadata.json"), cfg, chash, "sweep", started, seeds,
              {"axis": axis, "failed_runs": failed})
    return {"runs": rows, "summary": agg, "config_hash": chash, "failed": failed}


def min_rdvloss(summary_rows, value) -> float:
    """Smallest mean RDVLoss over ``r > 0`` at one axis value."""
    vals = [float(row["rdvloss_mean"]) for row in summary_rows
            if row["value"] == fmt(value) and float(row["r"]) > 0 and row["rdvloss_mean"] not in ("", None)]
    return min(vals) if vals else math.nan


# ---------------------------------------------------------------------------
# diagnose


def _diagnose_job(cfg, seed):
    net, train_ds, val_ds, test_ds = _setup(cfg, seed)
    dcfg, opt = cfg["diagnostics"], optimizer_config(cfg)
    rows = []

    # "both": base columns hold the canonical eval-mode values, *_train the train-mode ones
    main_mode = "eval" if dcfg["mode"] == "both" else dcfg["mode"]

    def record(state, row):
        if row.iteration % dcfg["interval"]:
            return
        dec = diagnostics.decompose_dataset_gradient(net, state.params, train_ds, opt.loss,
                                                     mode=main_mode)
        entry = {"iteration": row.iteration, "cos_tc": dec.cos_tc, "cos_tw": dec.cos_tw,
                 "cos_cw": dec.cos_cw, "norm_c": dec.norm_correct, "norm_w": dec.norm_wrong,
                 "norm_gap": dec.norm_gap}
        if dcfg["mode"] == "both":
            alt = diagnostics.decompose_dataset_gradient(net, state.params, train_ds, opt.loss,
                                                         mode="train")
            entry.update(cos_tc_train=alt.cos_tc, cos_tw_train=alt.cos_tw,
                         cos_cw_train=alt.cos_cw, norm_gap_train=alt.norm_gap)
        if dcfg["diffusion_samples"] > 0:
            est = diagnostics.estimate_diffusion(
                net, state.params, train_ds, opt.loss, opt.lr_at(row.iteration), opt.batch_size,
                dcfg["diffusion_samples"], seed=[seed, row.iteration], mode=main_mode)
            entry.update(trace_sigma=est.trace_sigma, trace_d=est.trace_d)
        rows.append(entry)

    with np.errstate(over="ignore", invalid="ignore"):
        result = tr.train(net, train_ds, val_ds, test_ds, reset_config(cfg), opt, seed=seed,
                          callback=record)
    return rows, result.diverged, result.error


def smooth_rows(rows, window: int, grid_size=None) -> list:
    """Log-window smoothing of every diagnostics column (missing values skipped)."""
    if not rows:
        return []
    it = np.array([r["iteration"] for r in rows], dtype=np.float64)
    grid = None
    cols = {}
    for c in DIAG_COLUMNS[1:]:
        vals = np.array([diagnostics.nan_if_none(r.get(c)) for r in rows])
        keep = ~np.isnan(vals)
        if keep.sum() == 0:
            cols[c] = None
            continue
        g, s = diagnostics.log_window_smooth(it[keep], vals[keep], window, grid_size or len(it))
        grid = g if grid is None else grid
        cols[c] = (g, s)
    if grid is None:
        return [{"iteration": r["iteration"]} for r in rows]
    out = []
    for i, x in enumerate(grid):
        entry = {"iteration": x}
        for c, gs in cols.items():
            entry[c] = None if gs is None else float(np.interp(x, gs[0], gs[1]))
        out.append(entry)
    return out


def cmd_diagnose(cfg: dict, out: str, workers: int = 1, seed_base: Optional[int] = None) -> dict:
    """Train while recording drift and diffusion diagnostics.

    With ``diagnostics.batch_norm_pair`` each seed runs twice (network.batch_norm on and
    off) and the files are suffixed ``_bn`` / ``_nobn``.
    """
    started = time.time()
    chash = _prepare(cfg, out)
    if cfg["diagnostics"]["interval"] % cfg["reset"]["validation_interval"]:
        raise ConfigError("diagnostics.interval: must be a multiple of reset.validation_interval")
    seeds = seeds_of(cfg, seed_base)
    variants = [("", cfg)]
    if cfg["diagnostics"]["batch_norm_pair"]:
        variants = [("_bn", with_value(cfg, "network.batch_norm", True)),
                    ("_nobn", with_value(cfg, "network.batch_norm", False))]
    jobs = [(c, s) for _, c in variants for s in seeds]
    results = _pool_map(_diagnose_job, jobs, workers)
    summary = []
    for (tag, c), s, (rows, diverged, error) in zip(
            [v for v in variants for _ in seeds], seeds * len(variants), results):
        write_table(os.path.join(out, f"diagnostics{tag}_seed{s}.csv"), DIAG_COLUMNS, rows, chash)
        smooth = smooth_rows(rows, cfg["diagnostics"]["window"], cfg["diagnostics"]["grid_size"])
        write_table(os.path.join(out, f"diagnostics{tag}_smoothed_seed{s}.csv"), DIAG_COLUMNS,
                    smooth, chash)
        cw = [abs(r["cos_cw"]) for r in rows if r["cos_cw"] is not None]
        cw_train = [abs(r["cos_cw_train"]) for r in rows if r.get("cos_cw_train") is not None]
        tw = [r["cos_tw"] for r in rows if r["cos_tw"] is not None]
        summary.append({"config_hash": chash, "variant": tag.lstrip("_") or "base", "seed": s,
                        "batch_norm": c["network"]["batch_norm"],
                        "status": "diverged" if diverged else "ok",
                        "mean_abs_cos_cw": float(np.mean(cw)) if cw else None,
                        "mean_abs_cos_cw_train": float(np.mean(cw_train)) if cw_train else None,
                        "mean_cos_tw": float(np.mean(tw)) if tw else None,
                        "records": len(rows), "error": error})
    write_table(os.path.join(out, "diagnose_summary.csv"),
                ("config_hash", "variant", "seed", "batch_norm", "status", "mean_abs_cos_cw",
                 "mean_abs_cos_cw_train", "mean_cos_tw", "records", "error"), summary, chash)
    failed = sum(row["status"] != "ok" for row in summary)
    _metadata(os.path.join(out, "metadata.json"), cfg, chash, "diagnose", started, seeds,
              {"failed_runs": failed})
    return {"summary": summary, "config_hash": chash, "failed": failed}
