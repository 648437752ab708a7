"""Experiment driver: estimator-quality benchmarks, influence-schedule
dumps, kernel audits, and toy training runs.

All runs are driven by a single JSON config document and write deterministic
CSV artifacts: identical (config, seed, threads) produce byte-identical
files.  Per-row wall-clock times go to a separate timings.csv that is
excluded from the determinism guarantee.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import math
import sys
import time  # noqa: F401  (wall-clock rows)
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, RsmLabError
from .estimators import psi_la_first_order, psi_la_zeroth_order
from .flow_schedules import (
    FlowSpec,
    NoiseSpec,
    TimeGrid,
    ddim_kernel,
    dpmpp_kernel,
    euler_rf_kernel,
    kernel_schedule,
)
from .metrics import pairwise_w2
from .mixture_oracle import (
    GaussianMixture,
    LinearReward,
    TiltedPair,
    grid_tilt_weights,
    marginal_at,
    psi_star,
    sample,
    tilt,
    toy_reference,
    toy_reward,
)
from .rsm_objective import MethodName, influence_h, method_config, schedule_rows
from .sampler import CountingScoreField, OracleScoreField, RolloutPlan, rollout
from .training import (
    NetScoreField,
    ScoreNet,
    TrainConfig,
    pretrain,
    rsm_finetune,
    sample_terminal,
)

RESULT_COLUMNS = (
    "experiment_id",
    "method",
    "estimator",
    "i",
    "t",
    "j",
    "K",
    "n_samples",
    "seed",
    "nfe",
    "rmse",
    "bias_norm",
    "var_trace",
)

SCHEDULE_COLUMNS = (
    "method",
    "step",
    "t",
    "gamma",
    "c1",
    "c2",
    "h",
    "w",
    "omega",
    "sigma",
    "delta",
)


# ------------------------------------------------------------------ config


def _check_keys(block: dict, required: set, optional: set, where: str) -> None:
    keys = set(block)
    missing = required - keys
    unknown = keys - required - optional
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _parse_mixture(block) -> GaussianMixture:
    if block == "toy":
        return toy_reference()
    _check_keys(block, {"weights", "means", "component_var"}, set(), "mixture")
    return GaussianMixture(
        weights=block["weights"], means=block["means"], component_var=block["component_var"]
    )


def _parse_reward(block) -> LinearReward:
    if block == "toy":
        return toy_reward()
    _check_keys(block, {"slope"}, {"intercept"}, "reward")
    return LinearReward(slope=block["slope"], intercept=block.get("intercept", 0.0))


def _parse_flow(block) -> FlowSpec:
    _check_keys(block, {"kind"}, {"beta", "sigma"}, "flow")
    if block["kind"] == "vp":
        return FlowSpec(kind="vp", vp_beta=tuple(block.get("beta", (0.1, 20.0))))
    if block["kind"] == "rf":
        return FlowSpec(kind="rf")
    if block["kind"] == "ve":
        return FlowSpec(kind="ve", ve_sigma=tuple(block.get("sigma", (0.01, 50.0))))
    raise ConfigError(f"unknown flow kind {block['kind']!r}")


def _parse_noise(block) -> NoiseSpec:
    _check_keys(block, {"rule"}, {"a"}, "noise")
    return NoiseSpec(rule=block["rule"], a=block.get("a", 0.0))


def load_config(path: str | Path) -> dict:
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise ConfigError("config must be an object with a 'kind' key")
    return cfg


# --------------------------------------------------------------- CSV utils


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_csv(path: Path, columns, rows) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def emit_svg(
    path: Path,
    series: list[tuple[str, np.ndarray, np.ndarray]],
    title: str,
    xlabel: str,
    ylabel: str,
    logy: bool = False,
) -> None:
    """Minimal multi-series line chart; no plotting dependency."""
    width, height, pad = 640, 420, 56
    xs_all = np.concatenate([np.asarray(s[1], dtype=float) for s in series])
    ys_all = np.concatenate([np.asarray(s[2], dtype=float) for s in series])
    if logy:
        ys_all = np.log10(np.maximum(ys_all, 1e-300))
    x_lo, x_hi = float(xs_all.min()), float(xs_all.max())
    y_lo, y_hi = float(ys_all.min()), float(ys_all.max())
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def px(x):
        return pad + (x - x_lo) / x_span * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y_lo) / y_span * (height - 2 * pad)

    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2:.0f}" y="24" text-anchor="middle" font-size="15">{title}</text>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" stroke="black"/>',
        f'<text x="{width/2:.0f}" y="{height-14}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="16" y="{height/2:.0f}" font-size="12" transform="rotate(-90 16 {height/2:.0f})" text-anchor="middle">{ylabel}</text>',
    ]
    for k in range(5):
        xv = x_lo + k * x_span / 4
        yv = y_lo + k * y_span / 4
        parts.append(
            f'<text x="{px(xv):.1f}" y="{height-pad+16}" text-anchor="middle" font-size="10">{xv:.3g}</text>'
        )
        label = 10**yv if logy else yv
        parts.append(
            f'<text x="{pad-6}" y="{py(yv):.1f}" text-anchor="end" font-size="10">{label:.3g}</text>'
        )
    for n, (label, xs, ys) in enumerate(series):
        ys = np.asarray(ys, dtype=float)
        if logy:
            ys = np.log10(np.maximum(ys, 1e-300))
        pts = " ".join(f"{px(float(x)):.2f},{py(float(y)):.2f}" for x, y in zip(xs, ys))
        color = palette[n % len(palette)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"/>')
        parts.append(
            f'<text x="{width-pad+4}" y="{pad+14*n+10}" font-size="11" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


# ------------------------------------------------------------- rmse bench


def _bench_cell(args):
    (cell_idx, entry, i, cfg, seed) = args
    flow = _parse_flow(cfg["flow"])
    grid = TimeGrid.uniform(cfg["grid"]["n_steps"])
    noise = _parse_noise(cfg["noise"])
    ref = _parse_mixture(cfg["mixture"])
    reward = _parse_reward(cfg["reward"])
    alpha = cfg.get("alpha", 1.0)
    pair = TiltedPair.build(ref, reward, alpha, validate=False)

    lookahead = 0 if entry["lookahead"] == "terminal" else i - 1
    k_width = int(entry["k"])
    widths = np.ones(grid.n_steps + 1, dtype=np.int64)
    widths[i] = k_width
    mask = np.ones(grid.n_steps + 1, dtype=bool)
    if entry.get("localization", "all") == "branch_only":
        mask[:] = False
        mask[i] = True
    field = CountingScoreField(OracleScoreField(mixture=ref, flow=flow, grid=grid))
    plan = RolloutPlan.build(
        flow=flow,
        grid=grid,
        noise=noise,
        family=cfg.get("family", "ddim"),
        stochastic_mask=mask,
        branch_widths=widths,
        lookahead=lookahead,
    )
    t_i = float(grid.times[i])
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, cell_idx)))
    points = sample(marginal_at(ref, flow, t_i), int(cfg["n_eval_points"]), rng)
    n_trials = int(cfg["n_trials"])

    started = time.perf_counter_ns()
    errors = np.empty((len(points), n_trials, 2))
    for p, x in enumerate(points):
        target = psi_star(pair, flow, t_i, x)
        for m in range(n_trials):
            tree = rollout(
                x, i, plan, field, rng_seed=(seed * 1_000_003 + cell_idx) * 65_537 + p * 1009 + m,
                reward=reward,
            )
            if entry["estimator"] == "zo":
                est = psi_la_zeroth_order(tree, i, alpha, entry.get("stats_mode", "raw"))
            else:
                est = psi_la_first_order(tree, i, reward, alpha)
            errors[p, m] = est.value - target
    wall_ns = time.perf_counter_ns() - started

    rmse = float(np.sqrt(np.mean(np.sum(errors**2, axis=-1))))
    bias = errors.mean(axis=1)  # (P, 2)
    bias_norm = float(np.sqrt(np.mean(np.sum(bias**2, axis=-1))))
    centered = errors - bias[:, None, :]
    var_trace = float(np.mean(np.sum(centered**2, axis=-1)))
    row = {
        "experiment_id": cfg.get("id", "rmse_bench"),
        "method": entry["name"],
        "estimator": entry["estimator"],
        "i": i,
        "t": t_i,
        "j": lookahead,
        "K": k_width,
        "n_samples": n_trials,
        "seed": seed,
        "nfe": field.nfe,
        "rmse": rmse,
        "bias_norm": bias_norm,
        "var_trace": var_trace,
    }
    return cell_idx, row, wall_ns


def run_rmse_bench(cfg: dict, out_dir: Path, seed: int, threads: int = 1) -> list[dict]:
    _check_keys(
        cfg,
        {"kind", "mixture", "reward", "flow", "grid", "noise", "estimators", "eval_steps",
         "n_eval_points", "n_trials"},
        {"alpha", "family", "id"},
        "rmse_bench",
    )
    for entry in cfg["estimators"]:
        _check_keys(
            entry,
            {"name", "estimator", "lookahead", "k"},
            {"stats_mode", "localization"},
            f"estimator {entry.get('name', '?')}",
        )
        if entry["estimator"] not in ("zo", "fo"):
            raise ConfigError(f"unknown estimator {entry['estimator']!r}")
        if entry["lookahead"] not in ("terminal", "one_step"):
            raise ConfigError(f"unknown lookahead {entry['lookahead']!r}")
    cells = []
    idx = 0
    for entry in cfg["estimators"]:
        for i in cfg["eval_steps"]:
            cells.append((idx, entry, int(i), cfg, seed))
            idx += 1
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_bench_cell, cells))
    else:
        results = [_bench_cell(c) for c in cells]
    results.sort(key=lambda r: r[0])
    rows = [r[1] for r in results]
    write_csv(out_dir / "results.csv", RESULT_COLUMNS, rows)
    write_csv(
        out_dir / "timings.csv",
        ("cell", "wall_ns"),
        [{"cell": r[0], "wall_ns": r[2]} for r in results],
    )
    return rows


# ---------------------------------------------------------- schedule dump


def run_schedule_dump(cfg: dict, out_dir: Path, seed: int) -> list[dict]:
    _check_keys(
        cfg,
        {"kind", "flow", "grid", "noise", "methods", "alpha"},
        {"family", "reward_value", "svg", "id", "d", "sqdf_gamma_base", "resdb_wr_over_wf"},
        "schedule_dump",
    )
    flow = _parse_flow(cfg["flow"])
    grid = TimeGrid.uniform(cfg["grid"]["n_steps"])
    noise = _parse_noise(cfg["noise"])
    family = cfg.get("family", "euler_rf" if flow.kind.value == "rf" else "ddim")
    n = grid.n_steps
    steps = range(1, n) if flow.kind.value == "rf" else range(1, n + 1)
    kernels = kernel_schedule(flow, grid, noise, family, steps=steps)
    rows = []
    notes: dict = {}
    per_method: dict[str, list] = {}
    for name in cfg["methods"]:
        mc = method_config(
            MethodName(name),
            kernels,
            grid,
            alpha=cfg["alpha"],
            flow=flow,
            d=cfg.get("d", 2),
            sqdf_gamma_base=cfg.get("sqdf_gamma_base", 0.9),
            resdb_wr_over_wf=cfg.get("resdb_wr_over_wf", 1.0),
        )
        mrows = schedule_rows(mc, kernels, reward_value=cfg.get("reward_value", 1.0))
        rows.extend(mrows)
        per_method[name] = mrows

    def crossing(a: str, b: str) -> Optional[int]:
        if a not in per_method or b not in per_method:
            return None
        ha = {r["step"]: r["h"] for r in per_method[a]}
        hb = {r["step"]: r["h"] for r in per_method[b]}
        common = sorted(set(ha) & set(hb))
        diffs = [ha[s] - hb[s] for s in common]
        for s, d0, d1 in zip(common[1:], diffs, diffs[1:]):
            if d0 == 0 or (d0 < 0) != (d1 < 0):
                return int(s)
        return None

    notes["tempflow_vs_ppo_crossover_step"] = crossing("tempflow_grpo", "ppo_grpo")
    notes["reinforce_vs_pcpo_flow_crossover_step"] = crossing(
        "reinforce_kl", "pcpo_reweight_flow"
    )
    rows.sort(key=lambda r: (r["method"], r["step"]))
    write_csv(out_dir / "schedules.csv", SCHEDULE_COLUMNS, rows)
    (out_dir / "schedule_notes.json").write_text(json.dumps(notes, indent=2, sort_keys=True) + "\n")
    if cfg.get("svg", True) and rows:
        series = []
        for name, mrows in per_method.items():
            if mrows:
                series.append(
                    (name, [r["t"] for r in mrows], [max(r["h"], 1e-12) for r in mrows])
                )
        emit_svg(
            out_dir / "schedules.svg",
            series,
            title="influence schedule h(t)",
            xlabel="t",
            ylabel="h",
            logy=True,
        )
    return rows


# ------------------------------------------------------------ kernel audit


def run_kernel_audit(cfg: dict, out_dir: Path, seed: int) -> dict:
    _check_keys(
        cfg,
        {"kind"},
        {"n_instances", "inject_omega_fault", "id"},
        "kernel_audit",
    )
    n = int(cfg.get("n_instances", 1000))
    fault = cfg.get("inject_omega_fault")
    fault = float(fault) if fault is not None else None
    rng = np.random.default_rng(seed)
    checks: dict[str, dict] = {}

    worst_equiv = 0.0
    worst_identity = 0.0
    for _ in range(n):
        x = rng.standard_normal(2) * 3
        s = rng.standard_normal(2)
        abar_im1 = rng.uniform(0.1, 0.999)
        abar_i = rng.uniform(0.05, abar_im1 * 0.999)
        sigma = rng.uniform(0.0, math.sqrt(1.0 - abar_im1) * 0.99)
        kd = ddim_kernel(abar_i, abar_im1, sigma)
        omega = kd.omega * (fault if fault is not None else 1.0)
        eps_hat = -math.sqrt(1.0 - abar_i) * s
        direct = (
            math.sqrt(abar_im1) * (x - math.sqrt(1.0 - abar_i) * eps_hat) / math.sqrt(abar_i)
            + math.sqrt(1.0 - abar_im1 - sigma**2) * eps_hat
        )
        mean = kd.kappa * x + omega * s
        worst_equiv = max(worst_equiv, float(np.max(np.abs(mean - direct) / np.maximum(np.abs(direct), 1e-9))))

        kp = dpmpp_kernel(abar_i, abar_im1)
        a_i, b_i = math.sqrt(abar_i), math.sqrt(1 - abar_i)
        a_p, b_p = math.sqrt(abar_im1), math.sqrt(1 - abar_im1)
        h = math.log(a_p / b_p) - math.log(a_i / b_i)
        direct = (b_p / b_i) * math.exp(-h) * x + a_p * (1 - math.exp(-2 * h)) * (
            (x + b_i**2 * s) / a_i
        )
        mean = kp.kappa * x + kp.omega * (fault if fault is not None else 1.0) * s
        worst_equiv = max(worst_equiv, float(np.max(np.abs(mean - direct) / np.maximum(np.abs(direct), 1e-9))))

        t = rng.uniform(0.05, 0.95)
        dt = rng.uniform(0.01, t)
        st = rng.uniform(0.05, 2.0)
        ke = euler_rf_kernel(t, dt, st)
        v = -x / (1 - t) - (t / (1 - t)) * s
        direct = x - dt * v + 0.5 * ke.sigma**2 * s
        mean = ke.kappa * x + ke.omega * (fault if fault is not None else 1.0) * s
        worst_equiv = max(worst_equiv, float(np.max(np.abs(mean - direct) / np.maximum(np.abs(direct), 1e-9))))

        # delta and w identities
        if sigma > 0:
            worst_identity = max(
                worst_identity, abs(kd.w * kd.sigma - kd.omega * kd.delta)
            )
        worst_identity = max(worst_identity, abs(ke.w * ke.sigma - ke.omega * ke.delta))
        s_a, s_b = rng.standard_normal((2, 2))
        eps_diff = -math.sqrt(1 - abar_i) * (s_a - s_b)
        worst_identity = max(
            worst_identity, float(np.max(np.abs(-kd.delta * eps_diff - (s_a - s_b))))
        )
        v_diff = -(t / (1 - t)) * (s_a - s_b)
        worst_identity = max(
            worst_identity, float(np.max(np.abs(-ke.delta * v_diff - (s_a - s_b))))
        )

    checks["kernel_equivalence"] = {"worst_rel_err": worst_equiv, "tol": 1e-10,
                                    "ok": worst_equiv < 1e-10}
    checks["delta_w_identities"] = {"worst_abs_err": worst_identity, "tol": 1e-12,
                                    "ok": worst_identity < 1e-12}

    ref = toy_reference()
    reward = toy_reward()
    closed = tilt(ref, reward, 1.0).weights
    numeric = grid_tilt_weights(ref, reward, 1.0)
    tilt_err = float(np.max(np.abs(closed - numeric) / np.maximum(closed, 1e-12)))
    checks["tilt_vs_grid_integration"] = {"worst_rel_err": tilt_err, "tol": 1e-6,
                                          "ok": tilt_err < 1e-6}

    report = {"n_instances": n, "inject_omega_fault": fault, "checks": checks,
              "ok": all(c["ok"] for c in checks.values())}
    (out_dir / "audit_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for name, c in checks.items():
        print(f"[{'PASS' if c['ok'] else 'FAIL'}] {name}: {c}")
    return report


# ------------------------------------------------------------------ train


def run_train(cfg: dict, out_dir: Path, seed: int) -> dict:
    _check_keys(
        cfg,
        {"kind", "mixture", "reward", "flow", "grid", "noise", "alpha", "method", "finetune"},
        {"family", "pretrain", "id", "w2_gate"},
        "train",
    )
    flow = _parse_flow(cfg["flow"])
    grid = TimeGrid.uniform(cfg["grid"]["n_steps"])
    noise = _parse_noise(cfg["noise"])
    ref = _parse_mixture(cfg["mixture"])
    reward = _parse_reward(cfg["reward"])
    alpha = float(cfg["alpha"])
    plan = RolloutPlan.build(flow=flow, grid=grid, noise=noise, family=cfg.get("family", "ddim"))

    pre = cfg.get("pretrain", {})
    _check_keys(pre, set(), {"iters", "batch", "lr", "checkpoint", "n_train_times"}, "pretrain")
    if "checkpoint" in pre:
        net_ref = ScoreNet.from_json(Path(pre["checkpoint"]).read_text())
        losses = []
    else:
        pcfg = TrainConfig(
            batch=pre.get("batch", 4096),
            iters=pre.get("iters", 2000),
            lr=pre.get("lr", 1e-3),
            n_train_times=pre.get("n_train_times", 500),
            seed=seed,
        )
        net_ref, losses = pretrain(ScoreNet(seed=seed), ref, flow, pcfg)
    (out_dir / "reference_checkpoint.json").write_text(net_ref.to_json())
    if losses:
        write_csv(
            out_dir / "pretrain_loss.csv",
            ("iter", "loss"),
            [{"iter": n, "loss": v} for n, v in enumerate(losses)],
        )

    gate = None
    if cfg.get("w2_gate"):
        nf = NetScoreField(net=net_ref, flow=flow, grid=grid)
        x0 = sample_terminal(nf, plan, 10_000, seed=seed + 1)
        exact = sample(ref, 10_000, np.random.default_rng(seed + 2))
        gate = pairwise_w2(x0, exact, max_points=int(cfg["w2_gate"].get("max_points", 4096)))

    ft = cfg["finetune"]
    _check_keys(
        ft,
        {"iters"},
        {"batch", "group_size", "lr", "updates_per_batch", "stats_mode", "fo_current_state"},
        "finetune",
    )
    kernels = plan.kernels
    if ft.get("fo_current_state"):
        from .rsm_objective import custom_config

        gamma = np.full(grid.n_steps + 1, np.nan)
        c1 = np.full(grid.n_steps + 1, np.nan)
        for i in range(1, grid.n_steps + 1):
            k = kernels[i]
            if k is not None and k.sigma > 0:
                gamma[i] = 1.0
                c1[i] = 0.5 * alpha * k.omega**2 / k.sigma**2
        mc = custom_config(grid, alpha, "cs_first_order", "current", gamma, c1)
    else:
        mc = method_config(MethodName(cfg["method"]), kernels, grid, alpha=alpha, flow=flow)
    tcfg = TrainConfig(
        batch=ft.get("batch", 256),
        iters=ft["iters"],
        lr=ft.get("lr", 1e-3),
        group_size=ft.get("group_size", 1),
        updates_per_batch=ft.get("updates_per_batch", 1),
        stats_mode=ft.get("stats_mode", "centered"),
        seed=seed,
    )
    net = net_ref.copy()
    net, metrics = rsm_finetune(net_ref, net, reward, mc, plan, tcfg)
    write_csv(
        out_dir / "metrics.csv",
        ("epoch", "reward_mean", "reward_se", "kl_proxy", "drift", "clip_fraction"),
        metrics,
    )
    (out_dir / "checkpoint.json").write_text(net.to_json())
    summary = {
        "final_reward": metrics[-1]["reward_mean"] if metrics else None,
        "w2_gate": gate,
        "method": cfg["method"],
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# -------------------------------------------------------------------- main


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rsmlab", description="estimator lab driver")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("bench", "schedules", "train", "audit"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        expected = {
            "bench": "rmse_bench",
            "schedules": "schedule_dump",
            "train": "train",
            "audit": "kernel_audit",
        }[args.command]
        if cfg.get("kind") != expected:
            raise ConfigError(f"config kind {cfg.get('kind')!r} does not match {expected!r}")
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "bench":
            run_rmse_bench(cfg, out_dir, args.seed, threads=args.threads)
        elif args.command == "schedules":
            run_schedule_dump(cfg, out_dir, args.seed)
        elif args.command == "train":
            run_train(cfg, out_dir, args.seed)
        else:
            report = run_kernel_audit(cfg, out_dir, args.seed)
            if not report["ok"]:
                return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RsmLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
