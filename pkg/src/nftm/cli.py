"""Experiment driver CLI.

Subcommands: ca, heat-global, heat-var, inpaint, bench, gradcheck. Each run
takes an optional strict JSON config (unknown keys are rejected), merges CLI
overrides, writes a resolved-config copy, metrics as JSON-lines, and image
artifacts into --out-dir. Exit codes: 0 success, 1 runtime failure, 2 invalid
config; failures emit a one-line JSON error record on stderr.

Environment: NFTM_BACKEND selects the kernel backend (auto/numba/numpy),
NFTM_THREADS caps kernel parallelism (0 = auto).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import ca as ca_mod
from . import dataio, heat, inpaint, kernels
from .autodiff import no_grad
from .gradcheck import battery

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


CA_DEFAULTS = {
    "rule": 110,  # 0..255 or "life"
    "width": 101,
    "horizon": 100,
    "extra_horizon": 200,
    "hidden": [16, 16],
    "lr": 1e-2,
    "epochs": 500,
    "n_states": 64,
    "teacher_horizon": 8,
    "train_width": 32,
    "eval_states": 100,
    "seed": 0,
}

CA_LIFE_OVERRIDES = {"hidden": [32, 32], "epochs": 4000}

HEAT_GLOBAL_DEFAULTS = {
    "alpha": 0.15,
    "H": 64,
    "W": 64,
    "n_sequences": 32,
    "T": 10,
    "phase_a_epochs": 1200,
    "lr": 1e-2,
    "beta": 1.0,
    "gamma": 0.0,
    "lam_alpha": 1e-6,
    "lam_s": 1e-4,
    "fix_sigma": False,
    "seed": 0,
}

HEAT_VAR_DEFAULTS = {
    "H": 64,
    "W": 64,
    "n_sequences": 32,
    "T": 10,
    "phase_a_epochs": 3000,
    "phase_b_epochs": 60,
    "rollout_T": 10,
    "lr": 1e-2,
    "beta": 1.0,
    "gamma": 0.0,
    "lam_alpha": 1e-6,
    "lam_s": 1e-4,
    "lam_tv_alpha": 1e-4,
    "hidden": [64, 64],
    "include_u": False,
    "eval_T": 50,
    "seed": 0,
}

INPAINT_DEFAULTS = {
    "n_train": 2000,
    "n_test": 200,
    "H": 32,
    "W": 32,
    "cifar_path": None,
    "mask_fraction": 0.35,
    "mask_kind": "mix",
    "epochs": 30,
    "batch_size": 8,
    "images_per_epoch": 512,
    "k_eval": 30,
    "k_train_max": 20,
    "k_start": 4,
    "k_step": 2,
    "k_every": 5,
    "lr": 3e-4,
    "channels": 48,
    "layers": 4,
    "beta0": 0.5,
    "beta_final": 0.3,
    "lam_tv": 0.02,
    "lam_contract": 0.01,
    "clip0": 0.5,
    "clip_decay": 0.95,
    "per_step_loss": False,
    "filmstrips": 4,
    "guard_check_images": 32,
    "seed": 0,
}

BENCH_DEFAULTS = {
    "sizes": [64**2, 128**2, 256**2],
    "steps": 50,
    "alpha": 0.1,
    "compare_backends": True,
    "seed": 0,
}

GRADCHECK_DEFAULTS = {"trials": 20, "eps": 1e-5, "seed": 0}

DEFAULTS = {
    "ca": CA_DEFAULTS,
    "heat-global": HEAT_GLOBAL_DEFAULTS,
    "heat-var": HEAT_VAR_DEFAULTS,
    "inpaint": INPAINT_DEFAULTS,
    "bench": BENCH_DEFAULTS,
    "gradcheck": GRADCHECK_DEFAULTS,
}


def resolve_config(task: str, config_path, overrides: dict) -> tuple:
    """Defaults <- config file <- CLI flags, rejecting unknown config keys."""
    cfg = copy.deepcopy(DEFAULTS[task])
    user_keys = set()
    if config_path:
        try:
            loaded = dataio.load_config(config_path)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config root must be a JSON object, got {type(loaded).__name__}")
        # emitted resolved configs round-trip: their metadata keys are accepted
        if "task" in loaded and loaded["task"] != task:
            raise ConfigError(f"config is for task {loaded['task']!r}, not {task!r}")
        loaded = {k: v for k, v in loaded.items() if k not in ("task", "kernel_backend")}
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for task {task!r}: {unknown}")
        cfg.update(loaded)
        user_keys |= set(loaded)
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = v
            user_keys.add(k)
    return cfg, user_keys


def _write_resolved(cfg: dict, task: str, out_dir: str) -> None:
    resolved = dict(cfg)
    resolved["task"] = task
    resolved["kernel_backend"] = kernels.get_backend()
    dataio.write_json(resolved, os.path.join(out_dir, "resolved_config.json"))


# ---------------------------------------------------------------------------
# task runners
# ---------------------------------------------------------------------------

def run_ca(cfg: dict, out_dir: str, user_keys: set) -> None:
    rule_sel = cfg["rule"]
    is_life = isinstance(rule_sel, str) and rule_sel in ("life", "gol")
    if is_life:
        for k, v in CA_LIFE_OVERRIDES.items():
            if k not in user_keys:
                cfg[k] = v
    tc = ca_mod.CaTrainConfig(
        hidden=tuple(cfg["hidden"]),
        lr=cfg["lr"],
        epochs=cfg["epochs"],
        n_states=cfg["n_states"],
        horizon=cfg["teacher_horizon"],
        width=cfg["train_width"],
        seed=cfg["seed"],
    )
    records = []
    if is_life:
        res = ca_mod.train_ca_controller("life", tc)
        records.append(
            {"record": "train", "converged": res.converged, "epochs_run": res.epochs_run,
             "final_loss": res.final_loss}
        )
        rng = np.random.default_rng(cfg["seed"] + 1)
        matches = 0
        n_eval = cfg["eval_states"]
        with no_grad():
            for _ in range(n_eval):
                s = (rng.random(tc.grid) < 0.5).astype(np.float64)
                tr = ca_mod.nftm_ca_rollout(res.controller, s, 1)
                matches += int(np.array_equal(tr.fields[-1].array[0], ca_mod.gol_step_exact(s)))
        records.append({"record": "eval", "states": n_eval, "exact_matches": matches})
        demo = (rng.random(tc.grid) < 0.5).astype(np.float64)
        with no_grad():
            tr = ca_mod.nftm_ca_rollout(res.controller, demo, 8)
        for t, frame in enumerate(ca_mod.trace_to_array(tr)):
            dataio.write_pgm(frame, os.path.join(out_dir, f"life_step{t:02d}.pgm"), (0.0, 1.0))
        log.info("life: %d/%d held-out states exact", matches, n_eval)
    else:
        rule = ca_mod.rule_truth_table(int(rule_sel))
        res = ca_mod.train_ca_controller(int(rule_sel), tc)
        table_match = res.table == rule
        rng = np.random.default_rng(cfg["seed"] + 1)
        f0 = (rng.random(cfg["width"]) < 0.5).astype(np.float64)
        exact = ca_mod.ca1d_rollout_exact(f0, rule, cfg["extra_horizon"])
        with no_grad():
            tr = ca_mod.nftm_ca_rollout(res.controller, f0, cfg["extra_horizon"])
        learned = ca_mod.trace_to_array(tr)
        match_h = bool(np.array_equal(learned[: cfg["horizon"] + 1], exact[: cfg["horizon"] + 1]))
        match_extra = bool(np.array_equal(learned, exact))
        dataio.write_pgm(exact[: cfg["horizon"] + 1], os.path.join(out_dir, "trace_exact.pgm"), (0.0, 1.0))
        dataio.write_pgm(learned[: cfg["horizon"] + 1], os.path.join(out_dir, "trace_learned.pgm"), (0.0, 1.0))
        records += [
            {"record": "train", "converged": res.converged, "epochs_run": res.epochs_run,
             "final_loss": res.final_loss, "table_match": bool(table_match)},
            {"record": "rollout", "steps": cfg["horizon"], "match": match_h},
            {"record": "rollout", "steps": cfg["extra_horizon"], "match": match_extra},
        ]
        log.info("rule %s: table_match=%s rollout_match(%d)=%s rollout_match(%d)=%s",
                 rule_sel, table_match, cfg["horizon"], match_h, cfg["extra_horizon"], match_extra)
    dataio.write_metrics(records, os.path.join(out_dir, "metrics.jsonl"))


def _pde_cfg(cfg: dict) -> heat.PdeTrainConfig:
    return heat.PdeTrainConfig(
        beta=cfg["beta"],
        gamma=cfg["gamma"],
        lam_alpha=cfg["lam_alpha"],
        lam_s=cfg["lam_s"],
        lam_tv_alpha=cfg.get("lam_tv_alpha", 1e-4),
        phase_a_epochs=cfg["phase_a_epochs"],
        phase_b_epochs=cfg.get("phase_b_epochs", 0),
        rollout_T=cfg.get("rollout_T", 10),
        lr=cfg["lr"],
        hidden=tuple(cfg.get("hidden", (64, 64))),
        seed=cfg["seed"],
        fix_sigma=cfg.get("fix_sigma", False),
        include_u=cfg.get("include_u", False),
    )


def run_heat_global(cfg: dict, out_dir: str, user_keys: set) -> None:
    pc = _pde_cfg(cfg)
    dataset = heat.gen_heat_dataset(cfg["alpha"], cfg["n_sequences"], cfg["H"], cfg["W"], cfg["T"], cfg["seed"])
    model = heat.GlobalAlphaModel(pc)
    history = heat.train_phase_a(dataset, model, pc)
    a_hat = model.alpha_map()
    err = abs(a_hat - cfg["alpha"])
    log.info("alpha_true=%.4f alpha_hat=%.6f abs_err=%.2e", cfg["alpha"], a_hat, err)
    dataio.write_metrics(
        [
            {"record": "alpha", "alpha_true": cfg["alpha"], "alpha_hat": a_hat, "abs_err": err,
             "final_loss": history[-1]},
        ],
        os.path.join(out_dir, "metrics.jsonl"),
    )


def run_heat_var(cfg: dict, out_dir: str, user_keys: set) -> None:
    pc = _pde_cfg(cfg)
    H, W = cfg["H"], cfg["W"]
    alpha_true = heat.make_variable_alpha(H, W)
    dataset = heat.gen_heat_dataset(alpha_true, cfg["n_sequences"], H, W, cfg["T"], cfg["seed"])
    model = heat.SpatialAlphaModel(H, W, pc)
    heat.train_phase_a(dataset, model, pc)
    if pc.phase_b_epochs > 0 and not pc.include_u:
        heat.train_phase_b(dataset, model, pc)
    a_hat = model.alpha_map()
    stats = heat.eval_alpha(a_hat, alpha_true)

    eval_trace = heat.gen_heat_dataset(alpha_true, 1, H, W, cfg["eval_T"], cfg["seed"] + 777)[0]
    psnrs = heat.rollout_psnr(model, eval_trace[0], cfg["eval_T"], eval_trace)

    for name, arr in (("alpha_true", alpha_true), ("alpha_hat", a_hat), ("alpha_abs_err", np.abs(a_hat - alpha_true))):
        dataio.write_pgm(arr, os.path.join(out_dir, f"{name}.pgm"))
        np.savetxt(os.path.join(out_dir, f"{name}.csv"), arr, delimiter=",")
    records = [{"record": "alpha", "mae": stats["mae"], "max_abs_err": stats["max_abs_err"]}]
    records += [{"record": "psnr", "step": t + 1, "psnr": v} for t, v in enumerate(psnrs)]
    records.append({"record": "psnr_summary", "mean_psnr": float(np.mean(psnrs)), "final_psnr": psnrs[-1]})
    dataio.write_metrics(records, os.path.join(out_dir, "metrics.jsonl"))
    log.info("variable alpha: mae=%.4f mean_psnr=%.2f dB final=%.2f dB",
             stats["mae"], float(np.mean(psnrs)), psnrs[-1])


def _inpaint_dataset(cfg: dict):
    n_total = cfg["n_train"] + cfg["n_test"]
    if cfg["cifar_path"]:
        pairs = dataio.load_cifar10(cfg["cifar_path"], limit=n_total)
        if len(pairs) < n_total:
            raise ValueError(
                f"{cfg['cifar_path']} holds {len(pairs)} records, need {n_total}"
            )
        images = np.stack([img for _lbl, img in pairs])
    else:
        images = dataio.gen_synthetic_images(n_total, cfg["H"], cfg["W"], cfg["seed"] + 17)
    rng = np.random.default_rng(cfg["seed"] + 29)
    spec = inpaint.MaskSpec(fraction=cfg["mask_fraction"], kind=cfg["mask_kind"], seed=cfg["seed"])
    data = [(images[i], inpaint.make_mask(spec, images.shape[2], images.shape[3], rng)) for i in range(n_total)]
    return data[: cfg["n_train"]], data[cfg["n_train"] :]


def _inpaint_cfg(cfg: dict) -> inpaint.InpaintConfig:
    return inpaint.InpaintConfig(
        lam_tv=cfg["lam_tv"],
        lam_tv_energy=cfg["lam_tv"],
        lam_contract=cfg["lam_contract"],
        k_train_max=cfg["k_train_max"],
        k_eval=cfg["k_eval"],
        beta0=cfg["beta0"],
        beta_final=cfg["beta_final"],
        clip0=cfg["clip0"],
        clip_decay=cfg["clip_decay"],
        lr=cfg["lr"],
        channels=cfg["channels"],
        layers=cfg["layers"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        images_per_epoch=cfg["images_per_epoch"],
        k_start=cfg["k_start"],
        k_step=cfg["k_step"],
        k_every=cfg["k_every"],
        per_step_loss=cfg["per_step_loss"],
        seed=cfg["seed"],
    )


def run_inpaint(cfg: dict, out_dir: str, user_keys: set) -> None:
    train_set, test_set = _inpaint_dataset(cfg)
    icfg = _inpaint_cfg(cfg)
    controller, history = inpaint.train_inpaint(train_set, icfg)
    result = inpaint.eval_rollout(
        controller, test_set, icfg.k_eval, "off", icfg, frame_images=cfg["filmstrips"]
    )
    sub = test_set[: cfg["guard_check_images"]]
    guard = inpaint.eval_rollout(controller, sub, icfg.k_eval, "on", icfg, collect_energy=True)
    energies = guard["energies"]  # (steps+1, n_images)
    violations = int((np.diff(energies, axis=0) > 1e-9).sum())

    mean_psnr = result["mean_psnr"]
    records = [{"record": "train_epoch", **h} for h in history]
    records += [
        {"record": "psnr", "step": t, "mean_psnr": v} for t, v in enumerate(mean_psnr)
    ]
    records.append(
        {
            "record": "summary",
            "psnr_step1": mean_psnr[1],
            "psnr_step20": mean_psnr[min(20, len(mean_psnr) - 1)],
            "psnr_final": mean_psnr[-1],
            "gain_db": mean_psnr[-1] - mean_psnr[1],
            "guard_energy_violations": violations,
        }
    )
    dataio.write_metrics(records, os.path.join(out_dir, "metrics.jsonl"))
    for i, strip in enumerate(result.get("filmstrips", [])):
        stepshots = strip["steps"][:: max(1, len(strip["steps"]) // 6)]
        panels = [strip["gt"], strip["init"], *stepshots]
        dataio.write_ppm(np.concatenate(panels, axis=2), os.path.join(out_dir, f"filmstrip_{i}.ppm"), (-1.0, 1.0))
    log.info(
        "inpaint: step1=%.2f dB final=%.2f dB gain=%.2f dB, guard violations=%d",
        mean_psnr[1], mean_psnr[-1], mean_psnr[-1] - mean_psnr[1], violations,
    )


def run_bench(cfg: dict, out_dir: str, user_keys: set) -> None:
    backends = list(kernels.available_backends()) if cfg["compare_backends"] else None
    out = bench_mod.bench_scaling(
        cfg["sizes"], steps=cfg["steps"], alpha=cfg["alpha"], seed=cfg["seed"], backends=backends
    )
    records = [dict(r, record="timing") for r in out["records"]]
    for backend, fit in out["fits"].items():
        if fit:
            records.append(
                {
                    "record": "fit",
                    "backend": backend,
                    "slope_s_per_cell": fit["slope_s_per_cell"],
                    "intercept_s": fit["intercept_s"],
                    **{f"ratio_{k}": v for k, v in fit["ratios"].items()},
                }
            )
    dataio.write_metrics(records, os.path.join(out_dir, "metrics.jsonl"))
    for r in out["records"]:
        log.info("bench %s n=%d: %.3g s/step", r["backend"], r["n"], r["mean_step_s"])


def run_gradcheck(cfg: dict, out_dir: str, user_keys: set) -> None:
    res = battery(trials=cfg["trials"], seed=cfg["seed"], eps=cfg["eps"])
    records = [
        {"record": "gradcheck", "op": k, "max_rel_err": float(v), "pass": bool(v <= 1e-4)}
        for k, v in sorted(res.items())
    ]
    dataio.write_metrics(records, os.path.join(out_dir, "metrics.jsonl"))
    worst = max(res.values())
    log.info("gradcheck: %d ops, worst max_rel_err %.3e", len(res), worst)
    if worst > 1e-4:
        bad = {k: float(v) for k, v in res.items() if v > 1e-4}
        raise RuntimeError(f"gradient check failed for {bad}")


RUNNERS = {
    "ca": run_ca,
    "heat-global": run_heat_global,
    "heat-var": run_heat_var,
    "inpaint": run_inpaint,
    "bench": run_bench,
    "gradcheck": run_gradcheck,
}


# ---------------------------------------------------------------------------
# argument parsing and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nftm", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="task", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config file (strict keys)")
        sp.add_argument("--out-dir", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="RNG seed override")

    sp = sub.add_parser("ca", help="learned cellular automaton vs the exact oracle")
    common(sp)
    sp.add_argument("--rule", default=None, help="elementary rule number or 'life'")

    sp = sub.add_parser("heat-global", help="global diffusion coefficient recovery")
    common(sp)
    sp.add_argument("--alpha", type=float, default=None, help="true coefficient")

    sp = sub.add_parser("heat-var", help="spatially varying coefficient recovery")
    common(sp)

    sp = sub.add_parser("inpaint", help="guarded iterative inpainting")
    common(sp)
    sp.add_argument("--cifar-path", default=None, help="CIFAR-10 binary batch file")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--n-train", type=int, default=None)
    sp.add_argument("--n-test", type=int, default=None)

    sp = sub.add_parser("bench", help="per-step cost scaling across field sizes")
    common(sp)
    sp.add_argument("--sizes", default=None, help="comma-separated site counts")
    sp.add_argument("--steps", type=int, default=None)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(sp)
    sp.add_argument("--trials", type=int, default=None)
    return p


def _overrides(task: str, args: argparse.Namespace) -> dict:
    ov = {"seed": args.seed}
    if task == "ca" and args.rule is not None:
        ov["rule"] = args.rule if args.rule in ("life", "gol") else int(args.rule)
    if task == "heat-global":
        ov["alpha"] = args.alpha
    if task == "inpaint":
        ov["cifar_path"] = args.cifar_path
        ov["epochs"] = args.epochs
        ov["n_train"] = args.n_train
        ov["n_test"] = args.n_test
    if task == "bench":
        ov["sizes"] = [int(s) for s in args.sizes.split(",")] if args.sizes else None
        ov["steps"] = args.steps
    if task == "gradcheck":
        ov["trials"] = args.trials
    return ov


def _emit_error(task: str, exc: Exception) -> None:
    rec = {"task": task, "error_type": type(exc).__name__, "error": str(exc)}
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    task = args.task
    try:
        cfg, user_keys = resolve_config(task, args.config, _overrides(task, args))
    except ConfigError as e:
        _emit_error(task, e)
        return 2
    try:
        os.makedirs(args.out_dir, exist_ok=True)
        _write_resolved(cfg, task, args.out_dir)
        RUNNERS[task](cfg, args.out_dir, user_keys)
    except Exception as e:  # runtime failure -> exit 1 with a machine-readable record
        _emit_error(task, e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
