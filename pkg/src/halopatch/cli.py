"""Command-line harness: dataset generation, staged training, evaluation,
sweeps, ablations, audits, and physical diagnostics.

Subcommands: gen-data, train, evaluate, sweep, ablate, audit, diagnose.
Every results file embeds the config echo and content hashes of its inputs;
reruns with identical inputs are byte-identical. Exit codes: 0 success,
2 usage, 3 config, 4 missing dependency, 5 numeric failure.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import config as cfgmod
from .bench import SurrogateHost, generate_dataset, load_dataset, save_dataset
from .config import ConfigError, DependencyError, file_hash, write_csv, write_results
from .correctors import (
    GlobalCorrector,
    LocalRefiner,
    train_global,
    train_local_ar,
    train_local_patch,
)
from .diagnostics import DiagnosticsReport, ke_spectrum
from .rollout import (
    Components,
    RolloutConfig,
    active_set_bitmask,
    budget_sweep,
    evaluation_runs,
    hybrid_step,
    run_global_only_rollout,
    run_raw_rollout,
    run_rollout,
    uv_relative_l2,
)
from .routing import RiskConfig, make_policy, policy_static_mask
from .stats import AuditReport, bootstrap_ci, median_of_ratios

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DEPENDENCY = 4
EXIT_NUMERIC = 5

GLOBAL_CKPT = "global.ckpt"
PATCH_CKPT = "local_patch.ckpt"
AR_CKPT = "local_ar.ckpt"


def _workers():
    return max(1, int(os.environ.get("HALOPATCH_WORKERS", "1")))


def _require(path, what):
    if not os.path.exists(path):
        raise DependencyError(f"{what} not found: {path}")
    return path


def _load_data(args):
    _require(os.path.join(args.data, "manifest.txt"), "dataset manifest")
    return load_dataset(args.data)


def _split(cfg, trajs):
    train = trajs[: cfg["data"]["train_n"]]
    test = [trajs[i] for i in cfg["data"]["test_indices"]]
    return train, test


def _load_system(cfg, args, need=("global", "local")):
    trajs = _load_data(args)
    host = SurrogateHost(cfgmod.host_config(cfg), cfgmod.solver_config(cfg))
    part = cfgmod.partition(cfg)
    hashes = {"dataset_manifest": file_hash(os.path.join(args.data, "manifest.txt"))}
    g = ref = None
    if "global" in need:
        path = _require(os.path.join(args.ckpt, GLOBAL_CKPT), "global corrector checkpoint")
        g = GlobalCorrector.load(path)
        hashes[GLOBAL_CKPT] = file_hash(path)
    if "local" in need:
        path = _require(os.path.join(args.ckpt, AR_CKPT), "local refiner checkpoint")
        ref = LocalRefiner.load(path)
        hashes[AR_CKPT] = file_hash(path)
    return trajs, host, part, g, ref, hashes


def cmd_gen_data(args):
    cfg = cfgmod.parse_config(args.config, args.seed)
    trajs = generate_dataset(
        cfgmod.solver_config(cfg), cfg["data"]["n_traj"], cfg["data"]["n_frames"]
    )
    save_dataset(args.out, trajs)
    print(f"wrote {len(trajs)} trajectories to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = cfgmod.parse_config(args.config, args.seed)
    trajs = _load_data(args)
    train, _ = _split(cfg, trajs)
    host = SurrogateHost(cfgmod.host_config(cfg), cfgmod.solver_config(cfg))
    part = cfgmod.partition(cfg)
    os.makedirs(args.out, exist_ok=True)
    data_hash = file_hash(os.path.join(args.data, "manifest.txt"))
    resume = args.resume

    if args.stage == "global":
        gc = cfg["global"]
        g, history = train_global(
            train, host, cfgmod.global_train_config(cfg),
            width=gc["width"], n_spectral=gc["n_spectral"], modes=gc["modes"],
            state_path=os.path.join(args.out, "global.state"), resume=resume,
        )
        out = os.path.join(args.out, GLOBAL_CKPT)
        g.save(out, extra={"stage": "global", "dataset_manifest_sha256": data_hash,
                           "steps": len(history)})
        _write_log(args.out, "global", history, resume)
    elif args.stage == "local-patch":
        gpath = _require(os.path.join(args.out, GLOBAL_CKPT),
                         "global corrector checkpoint (train stage 'global' first)")
        g = GlobalCorrector.load(gpath)
        lo = cfg["local"]
        ref, history = train_local_patch(
            train, host, g, cfgmod.patch_train_config(cfg), part,
            width=lo["width"], depth=lo["depth"],
            state_path=os.path.join(args.out, "local_patch.state"), resume=resume,
        )
        out = os.path.join(args.out, PATCH_CKPT)
        ref.save(out, extra={"stage": "local-patch", "dataset_manifest_sha256": data_hash,
                             "upstream_sha256": file_hash(gpath), "steps": len(history)})
        _write_log(args.out, "local_patch", history, resume)
    elif args.stage == "local-ar":
        gpath = _require(os.path.join(args.out, GLOBAL_CKPT),
                         "global corrector checkpoint (train stage 'global' first)")
        ppath = _require(os.path.join(args.out, PATCH_CKPT),
                         "patch checkpoint (train stage 'local-patch' first)")
        g = GlobalCorrector.load(gpath)
        ref0 = LocalRefiner.load(ppath)
        ref, history = train_local_ar(
            train, host, g, ref0, cfgmod.ar_train_config(cfg), part,
            state_path=os.path.join(args.out, "local_ar.state"), resume=resume,
        )
        out = os.path.join(args.out, AR_CKPT)
        ref.save(out, extra={"stage": "local-ar", "dataset_manifest_sha256": data_hash,
                             "upstream_sha256": file_hash(gpath),
                             "init_sha256": file_hash(ppath), "steps": len(history)})
        _write_log(args.out, "local_ar", history, resume)
    else:
        raise ConfigError(f"unknown training stage {args.stage!r}")
    print(f"wrote {out}")
    return EXIT_OK


def _write_log(outdir, stage, history, append=False):
    mode = "a" if append else "w"
    with open(os.path.join(outdir, f"{stage}_metrics.log"), mode) as fh:
        if history:
            fh.write("\n".join(history) + "\n")


def _evaluate_core(cfg, trajs, host, part, g, ref):
    """Per-run raw/global-only/hybrid losses over the evaluation grid."""
    _, test = _split(cfg, trajs)
    ev = cfg["evaluate"]
    comps = Components(host=host, corrector=g, refiner=ref, partition=part)
    k = int(round(ev["budget_fraction"] * part.n_blocks))
    rcfg = RolloutConfig(
        horizon=ev["horizon"], budget=k, policy=ev["policy"], hann_on=ev["hann"],
        seed=cfg["experiment"]["seed"], lambda_ke=ev["lambda_ke"],
    )
    runs = evaluation_runs(test, ev["t0_pool"])

    def one(run):
        ti, t0 = run
        raw = run_raw_rollout(test[ti], t0, ev["horizon"], host)
        glob = run_global_only_rollout(test[ti], t0, ev["horizon"], host, g)
        hyb = run_rollout(test[ti], t0, rcfg, comps)
        return raw, glob, hyb

    if _workers() > 1:
        with ThreadPoolExecutor(max_workers=_workers()) as pool:
            results = list(pool.map(one, runs))
    else:
        results = [one(r) for r in runs]
    out = {
        "runs": [{"traj": int(ti), "t0": int(t0)} for ti, t0 in runs],
        "raw": [r.run_loss for r, _, _ in results],
        "glob": [gl.run_loss for _, gl, _ in results],
        "hyb": [h.run_loss for _, _, h in results],
        "per_step_hyb": [h.per_step_loss for _, _, h in results],
        "selected_bitmasks": [
            [active_set_bitmask(s, part.n_blocks) for s in h.active_sets]
            for _, _, h in results
        ],
    }
    return out, results, comps, rcfg


def cmd_evaluate(args):
    cfg = cfgmod.parse_config(args.config, args.seed)
    trajs, host, part, g, ref, hashes = _load_system(cfg, args)
    core, results, comps, rcfg = _evaluate_core(cfg, trajs, host, part, g, ref)
    raw = np.asarray(core["raw"])
    glob = np.asarray(core["glob"])
    hyb = np.asarray(core["hyb"])
    n_boot = cfg["evaluate"]["n_boot"]
    seed = cfg["experiment"]["seed"]
    audit = AuditReport(l_raw=raw, l_glob=glob, l_hyb=hyb)
    report = {
        "config": cfg,
        "input_hashes": hashes,
        "per_run": core,
        "ratios": {
            "raw": 1.0,
            "glob_median_of_ratios": median_of_ratios(glob, raw),
            "hyb_median_of_ratios": median_of_ratios(hyb, raw),
            "glob_ci": bootstrap_ci(glob / raw, n_boot=n_boot, seed=seed),
            "hyb_ci": bootstrap_ci(hyb / raw, n_boot=n_boot, seed=seed),
        },
        "audit": audit.summary(n_boot=n_boot, seed=seed),
    }
    _, test = _split(cfg, trajs)
    report["diagnostics"] = _diagnostics_block(cfg, test, results)
    out = os.path.join(args.out, "results.json")
    write_results(out, report)
    _write_spectrum_csv(args.out, cfg, test, results)
    print(f"wrote {out}")
    return EXIT_OK


def _diagnostics_block(cfg, test, results):
    ev = cfg["evaluate"]
    rows = []
    for (raw_r, glob_r, hyb_r), (ti, t0) in zip(
        results, evaluation_runs(test, ev["t0_pool"])
    ):
        truth = test[ti].frames[t0 + ev["horizon"]]
        initial = test[ti].frames[t0]
        rep = DiagnosticsReport.from_field(truth, initial=initial)
        rows.append({"traj": int(ti), "t0": int(t0), "truth": rep.as_dict()})
    return rows


def _write_spectrum_csv(outdir, cfg, test, results):
    ev = cfg["evaluate"]
    ti, t0 = 0, ev["t0_pool"][0]
    truth = test[ti].frames[t0 + ev["horizon"]]
    spec = ke_spectrum(truth)
    write_csv(
        os.path.join(outdir, "ke_spectrum_truth.csv"),
        ["shell", "energy"],
        [(k, float(e)) for k, e in enumerate(spec)],
    )


def cmd_sweep(args):
    cfg = cfgmod.parse_config(args.config, args.seed)
    if args.axis == "budget":
        trajs, host, part, g, ref, hashes = _load_system(cfg, args)
        _, test = _split(cfg, trajs)
        ev = cfg["evaluate"]
        comps = Components(host=host, corrector=g, refiner=ref, partition=part)
        rcfg = RolloutConfig(
            horizon=ev["horizon"], policy=ev["policy"], hann_on=ev["hann"],
            seed=cfg["experiment"]["seed"], lambda_ke=ev["lambda_ke"],
        )
        table = budget_sweep(
            test, ev["t0_pool"], cfg["sweep"]["budget_grid"], comps, rcfg,
            n_boot=ev["n_boot"],
        )
        report = {"config": cfg, "input_hashes": hashes, "axis": "budget", "table": table}
        rows = [(r["budget_fraction"], r["k"], r["median_ratio"], r["ci_lo"], r["ci_hi"])
                for r in table["rows"]]
        write_csv(os.path.join(args.out, "budget_sweep.csv"),
                  ["budget_fraction", "k", "median_ratio", "ci_lo", "ci_hi"], rows)
    elif args.axis == "lambda_ke":
        trajs, host, part, g, ref, hashes = _load_system(cfg, args)
        rows = []
        for lam in cfg["sweep"]["lambda_grid"]:
            sub = json.loads(json.dumps(cfg))
            sub["evaluate"]["lambda_ke"] = float(lam)
            core, _, _, _ = _evaluate_core(sub, trajs, host, part, g, ref)
            rows.append({
                "lambda_ke": float(lam),
                "median_ratio": median_of_ratios(core["hyb"], core["raw"]),
            })
        report = {"config": cfg, "input_hashes": hashes, "axis": "lambda_ke", "table": rows}
        write_csv(os.path.join(args.out, "lambda_sweep.csv"),
                  ["lambda_ke", "median_ratio"],
                  [(r["lambda_ke"], r["median_ratio"]) for r in rows])
    elif args.axis == "data_size":
        report = _data_size_sweep(cfg, args)
    else:
        raise ConfigError(f"unknown sweep axis {args.axis!r}")
    out = os.path.join(args.out, f"sweep_{args.axis}.json")
    write_results(out, report)
    print(f"wrote {out}")
    return EXIT_OK


def _data_size_sweep(cfg, args):
    """Retrain both stages from scratch at each training-set size."""
    trajs = _load_data(args)
    train_full, test = _split(cfg, trajs)
    host = SurrogateHost(cfgmod.host_config(cfg), cfgmod.solver_config(cfg))
    part = cfgmod.partition(cfg)
    ev = cfg["evaluate"]
    rows = []
    for n in cfg["sweep"]["data_sizes"]:
        if n > len(train_full):
            raise ConfigError(f"data size {n} exceeds available training trajectories")
        sub = train_full[:n]
        g, _ = train_global(sub, host, cfgmod.global_train_config(cfg))
        ref0, _ = train_local_patch(sub, host, g, cfgmod.patch_train_config(cfg), part)
        ref, _ = train_local_ar(sub, host, g, ref0, cfgmod.ar_train_config(cfg), part)
        comps = Components(host=host, corrector=g, refiner=ref, partition=part)
        rcfg = RolloutConfig(
            horizon=ev["horizon"], policy=ev["policy"], hann_on=ev["hann"],
            seed=cfg["experiment"]["seed"], lambda_ke=ev["lambda_ke"],
        )
        runs = evaluation_runs(test, ev["t0_pool"])
        raw = np.array([run_raw_rollout(test[ti], t0, ev["horizon"], host).run_loss
                        for ti, t0 in runs])
        hyb = np.array([run_rollout(test[ti], t0, rcfg, comps).run_loss
                        for ti, t0 in runs])
        rows.append({"n_train": int(n), "median_ratio": median_of_ratios(hyb, raw)})
    return {"config": cfg, "axis": "data_size", "table": rows}


def cmd_ablate(args):
    cfg = cfgmod.parse_config(args.config, args.seed)
    trajs, host, part, g, ref, hashes = _load_system(cfg, args)
    _, test = _split(cfg, trajs)
    train, _ = _split(cfg, trajs)
    ev = cfg["evaluate"]
    comps = Components(host=host, corrector=g, refiner=ref, partition=part)
    runs = evaluation_runs(test, ev["t0_pool"])
    seed = cfg["experiment"]["seed"]
    k = int(round(ev["budget_fraction"] * part.n_blocks))

    def run_all(rcfg, static_scores=None):
        losses = []
        for ti, t0 in runs:
            if static_scores is not None:
                score_fn = make_policy("static", partition=part, static_scores=static_scores)
                z = test[ti].frames[t0]
                per = []
                for i in range(rcfg.horizon):
                    truth = test[ti].frames[t0 + 1 + i]
                    z, _ = hybrid_step(z, comps, rcfg.resolve_budget(part.n_blocks),
                                       score_fn, hann_on=rcfg.hann_on, step=i, truth=truth)
                    per.append(uv_relative_l2(z, truth))
                losses.append(float(np.mean(per)))
            else:
                losses.append(run_rollout(test[ti], t0, rcfg, comps).run_loss)
        return np.asarray(losses)

    base_cfg = RolloutConfig(horizon=ev["horizon"], budget=k, policy="innovation_keg",
                             hann_on=True, seed=seed, lambda_ke=ev["lambda_ke"])
    raw = np.array([run_raw_rollout(test[ti], t0, ev["horizon"], host).run_loss
                    for ti, t0 in runs])
    base = run_all(base_cfg)

    which = args.which
    if which == "hann_off":
        variant = run_all(RolloutConfig(horizon=ev["horizon"], budget=k,
                                        policy="innovation_keg", hann_on=False,
                                        seed=seed, lambda_ke=ev["lambda_ke"]))
        label = "hann_off"
    elif which == "static_mask":
        static_scores = policy_static_mask(
            train, host, g, RiskConfig(lambda_ke=ev["lambda_ke"]), part,
            t0_pool=cfg["local"]["ar_t0_pool"],
        )
        variant = run_all(base_cfg, static_scores=static_scores)
        label = "static_mask"
    elif which.startswith("policy="):
        name = which.split("=", 1)[1]
        if name == "oracle" and args.no_truth:
            raise ConfigError("oracle policy requires ground truth; rerun without --no-truth")
        variant = run_all(RolloutConfig(horizon=ev["horizon"], budget=k, policy=name,
                                        hann_on=ev["hann"], seed=seed,
                                        lambda_ke=ev["lambda_ke"]))
        label = f"policy_{name}"
    else:
        raise ConfigError(f"unknown ablation {which!r}")

    report = {
        "config": cfg,
        "input_hashes": hashes,
        "ablation": label,
        "baseline_median_of_ratios": median_of_ratios(base, raw),
        "variant_median_of_ratios": median_of_ratios(variant, raw),
        "ratio_to_baseline": median_of_ratios(variant, base),
        "per_run": {
            "raw": [float(x) for x in raw],
            "baseline": [float(x) for x in base],
            "variant": [float(x) for x in variant],
        },
    }
    out = os.path.join(args.out, f"ablate_{label}.json")
    write_results(out, report)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_audit(args):
    with open(args.results) as fh:
        res = json.load(fh)
    per = res.get("per_run", res)
    raw = np.asarray(per["raw"])
    glob = np.asarray(per["glob"])
    hyb = np.asarray(per["hyb"])
    audit = AuditReport(l_raw=raw, l_glob=glob, l_hyb=hyb)
    seed = res.get("config", {}).get("experiment", {}).get("seed", 0)
    report = {
        "source_results": args.results,
        "source_sha256": file_hash(args.results),
        "audit": audit.summary(seed=seed),
        "per_run": {
            "A": [float(x) for x in audit.a],
            "J_loc": [float(x) for x in audit.j_loc],
            "total": [float(x) for x in audit.total],
        },
    }
    out = os.path.join(args.out, "audit.json")
    write_results(out, report)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_diagnose(args):
    cfg = cfgmod.parse_config(args.config, args.seed)
    trajs, host, part, g, ref, hashes = _load_system(cfg, args)
    _, test = _split(cfg, trajs)
    ev = cfg["evaluate"]
    comps = Components(host=host, corrector=g, refiner=ref, partition=part)
    rcfg = RolloutConfig(horizon=ev["horizon"], policy=ev["policy"], hann_on=ev["hann"],
                         seed=cfg["experiment"]["seed"], lambda_ke=ev["lambda_ke"],
                         keep_fields=True)
    ti, t0 = 0, ev["t0_pool"][0]
    res = run_rollout(test[ti], t0, rcfg, comps)
    truth_final = test[ti].frames[t0 + ev["horizon"]]
    initial = test[ti].frames[t0]
    rows = {
        "truth": DiagnosticsReport.from_field(truth_final, initial=initial).as_dict(),
        "hybrid": DiagnosticsReport.from_field(res.fields[-1], initial=initial).as_dict(),
    }
    spec_truth = ke_spectrum(truth_final)
    spec_hyb = ke_spectrum(res.fields[-1])
    write_csv(os.path.join(args.out, "ke_spectrum.csv"),
              ["shell", "truth", "hybrid"],
              [(kk, float(a), float(b)) for kk, (a, b) in
               enumerate(zip(spec_truth, spec_hyb))])
    report = {"config": cfg, "input_hashes": hashes, "diagnostics": rows}
    out = os.path.join(args.out, "diagnose.json")
    write_results(out, report)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(
        prog="halopatch",
        description="Frozen-forecaster rollout correction: train, route, audit.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True, ckpt=False):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override [experiment] seed")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="checkpoint directory")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p, data=False)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=["global", "local-patch", "local-ar"])
    p.add_argument("--resume", action="store_true",
                   help="continue from the stage's saved training state")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate raw/global/hybrid on the test split")
    common(p, ckpt=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="budget / lambda_ke / data-size sweeps")
    p.add_argument("--axis", required=True, choices=["budget", "lambda_ke", "data_size"])
    common(p, ckpt=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablate", help="hann_off, static_mask, or policy=<name>")
    p.add_argument("--which", required=True)
    p.add_argument("--no-truth", action="store_true",
                   help="declare that ground truth is unavailable at evaluation")
    common(p, ckpt=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("audit", help="stage-wise audit from an existing results file")
    p.add_argument("--results", required=True, help="results.json from evaluate")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_audit)

    p = sub.add_parser("diagnose", help="physical diagnostics for one rollout")
    common(p, ckpt=True)
    p.set_defaults(fn=cmd_diagnose)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (FloatingPointError, ValueError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
