"""Command-line interface: ``ogtt-design <command> [options]``.

Times are given in whole minutes on the command line and converted to hours
internally.  Exit codes: 0 success, 2 bad input or configuration, 3
estimation failure (integration, sampler, too many excluded replicates),
4 contract violation.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, RunManifest
from .design import CONVENTIONAL, EARLY_ONLY, FULL, PROPOSED, Design
from .design_compare import compare_with_growth
from .design_search import search
from .distributions import NoiseModel, simulate_data
from .errors import ContractViolation, InputError, OGTTError
from .glucose_model import DIABETIC, HEALTHY, OSCILLATING, PARAM_NAMES, PatientParams
from .inference import fit_data
from .seeding import RngStream
from .utility import (curve_matrix, estimate_U, extend_estimate, load_samples, save_samples,
                      store_path)
from .validation import (EXTREME_PATIENT, RandomDesignConfig, random_design_study, read_cohort,
                         robustness_check, surrogate_study, synthetic_cohort, write_cohort)

log = logging.getLogger("ogtt_design")

NAMED_PATIENTS = {"healthy": HEALTHY, "diabetic": DIABETIC, "oscillating": OSCILLATING,
                  "extreme": EXTREME_PATIENT}
NAMED_DESIGNS = {"conventional": CONVENTIONAL, "proposed": PROPOSED, "full": FULL,
                 "early": EARLY_ONLY}


def parse_design(text: str) -> Design:
    return NAMED_DESIGNS[text] if text in NAMED_DESIGNS else Design.parse(text)


def parse_params(text: str) -> PatientParams:
    if text in NAMED_PATIENTS:
        return NAMED_PATIENTS[text]
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise InputError(f"cannot parse parameters {text!r}") from exc
    if len(vals) != 4:
        raise InputError("parameters are theta0,theta1,theta2,g0")
    return PatientParams(*vals)


def parse_int_list(text: str) -> tuple[int, ...]:
    """``"2,3"`` or ``"2-4"``."""
    try:
        if "-" in text:
            lo, hi = (int(v) for v in text.split("-"))
            return tuple(range(lo, hi + 1))
        return tuple(int(v) for v in text.split(",") if v)
    except ValueError as exc:
        raise InputError(f"cannot parse integer list {text!r}") from exc


def read_measurements(path) -> tuple[np.ndarray, np.ndarray]:
    """CSV with columns time_minutes, glucose_mg_dl; returns (hours, mg/dl)."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"time_minutes", "glucose_mg_dl"} <= set(reader.fieldnames):
                raise InputError(f"{path}: need columns time_minutes, glucose_mg_dl")
            rows = [(float(r["time_minutes"]), float(r["glucose_mg_dl"])) for r in reader]
    except (OSError, ValueError, TypeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise InputError(f"{path}: no measurements")
    t, y = np.array(rows).T
    return t / 60.0, y


def write_measurements(path, minutes, glucose) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_minutes", "glucose_mg_dl"])
        for m, g in zip(minutes, glucose):
            w.writerow([int(m), repr(float(g))])


def _write_json(path: Path, obj, cfg: ExperimentConfig) -> Path:
    path.write_text(json.dumps(dict(obj, config_hash=cfg.config_hash(), config=cfg.to_dict()), indent=2))
    return path


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args, cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    params = parse_params(args.params)
    design = parse_design(args.design)
    sigma = cfg.sigma if args.sigma is None else args.sigma
    rng = RngStream(cfg.seed, "simulate").generator(design.key(), list(params.as_tuple()))
    y = simulate_data(params, design.times, NoiseModel(sigma), cfg.consts, rng)
    path = Path(args.output) if args.output else out / "measurements.csv"
    write_measurements(path, design.minutes, y)
    manifest.outputs.append(str(path))
    print(json.dumps({"params": params.to_dict(), "design": list(design.minutes), "sigma": sigma,
                      "output": str(path)}))


def cmd_fit(args, cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    t, y = read_measurements(args.data)
    setup = cfg.setup()
    problem = setup.problem(t, y)
    stream = RngStream(cfg.seed, "fit")
    post, chain = fit_data(problem, stream.generator("chain"), args.draws, setup.thinning_stride,
                           keep_chain=True)
    p_draws = out / "posterior_draws.csv"
    with p_draws.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["draw", *PARAM_NAMES, "log_posterior"])
        for i, (d, lp) in enumerate(zip(post.draws, post.log_post)):
            w.writerow([i, *d.tolist(), float(lp)])
    outputs = [p_draws]
    if args.chain:
        p_chain = out / "chain.csv"
        full = problem.unpack(chain.chain)
        with p_chain.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", *PARAM_NAMES, "log_posterior"])
            for i, (d, lp) in enumerate(zip(full, chain.log_density)):
                w.writerow([i, *d.tolist(), float(lp)])
        outputs.append(p_chain)
    minutes = np.arange(0, int(round(cfg.horizon * 60)) + 1)
    curves = curve_matrix(post.draws, cfg.consts, minutes / 60.0)
    noisy = curves + cfg.sigma * stream.generator("predictive").standard_normal(curves.shape)
    qs = (0.025, 0.5, 0.975)
    cq = np.quantile(curves, qs, axis=0)
    pq = np.quantile(noisy, qs, axis=0)
    p_pred = out / "predictive_quantiles.csv"
    with p_pred.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_minutes", "curve_q025", "curve_q50", "curve_q975",
                    "pred_q025", "pred_q50", "pred_q975"])
        for i, m in enumerate(minutes):
            w.writerow([int(m), *cq[:, i].tolist(), *pq[:, i].tolist()])
    outputs.append(p_pred)
    summary = {"n_data": int(len(y)), "n_draws": len(post), "burn_in": post.burn_in,
               "raw_chain_length": post.raw_chain_length, "thinning_stride": post.thinning_stride,
               "acceptance_rate": post.acceptance_rate, "n_failed": post.n_failed,
               "start": post.start_point.to_dict(),
               "posterior_mean": post.mean().to_dict(),
               "posterior_sd": dict(zip(PARAM_NAMES, post.draws.std(axis=0, ddof=1).tolist()))}
    outputs.append(_write_json(out / "fit_summary.json", summary, cfg))
    manifest.outputs += [str(p) for p in outputs]
    print(json.dumps(summary["posterior_mean"]))


def cmd_estimate(args, cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    design = parse_design(args.design)
    prior = cfg.design_prior()
    stream = RngStream(cfg.seed, "estimate")
    path = store_path(out, design)
    if path.exists():
        est = load_samples(path)
        if est.T2 != cfg.T2:
            raise ContractViolation(f"{path} was built with T2={est.T2}, config has T2={cfg.T2}")
        est = extend_estimate(est, max(0, cfg.T1 - est.n_attempted), stream, prior, cfg.T2, args.workers)
    else:
        est = estimate_U(design, prior, cfg.T1, cfg.T2, stream, cfg.setup(), args.workers)
    save_samples(est, path, {"config_hash": cfg.config_hash()})
    manifest.sample_stores.append(str(path))
    p = _write_json(out / f"estimate_{design.key().replace(',', '-')}.json", est.summary(), cfg)
    manifest.outputs.append(str(p))
    print(json.dumps(est.summary()))


def cmd_compare(args, cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    a, b = parse_design(args.design_a), parse_design(args.design_b)
    r = compare_with_growth(a, b, cfg.design_prior(), cfg.alpha, cfg.T1_initial, cfg.T1_max,
                            cfg.growth, cfg.T2, RngStream(cfg.seed, "compare"), cfg.setup(),
                            args.workers)
    for tag, est in (("a", r.estimate_a), ("b", r.estimate_b)):
        path = out / f"compare_{tag}_{est.design.key().replace(',', '-')}.jsonl"
        save_samples(est, path, {"config_hash": cfg.config_hash()})
        manifest.sample_stores.append(str(path))
    p = _write_json(out / "compare.json", r.to_dict(), cfg)
    manifest.outputs.append(str(p))
    print(json.dumps(r.to_dict()))


def cmd_search(args, cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    report = search(cfg.design_prior(), cfg.search_config(), cfg.setup(), args.workers,
                    cfg.config_hash())
    p = _write_json(out / "search_report.json", report.to_dict(), cfg)
    table = report.summary_table()
    p_txt = out / "search_summary.txt"
    p_txt.write_text(table + "\n")
    manifest.outputs += [str(p), str(p_txt)]
    print(table)


def cmd_validate_random(args, cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    vc = RandomDesignConfig(sizes=args.sizes, designs_per_size=args.trials, T2=cfg.T2,
                            proposed=parse_design(args.proposed), grid=cfg.grid, seed=cfg.seed,
                            replicates=args.replicates)
    report = random_design_study(vc, cfg.setup())
    paths = report.write(out, cfg.config_hash())
    manifest.outputs += [str(p) for p in paths]
    print(json.dumps(report.to_dict()["sizes"]))


def cmd_validate_surrogate(args, cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    setup = cfg.setup()
    if args.cohort:
        cohort = read_cohort(args.cohort)
    else:
        cohort = synthetic_cohort(args.patients, setup, RngStream(cfg.seed, "cohort"))
        path = out / "synthetic_cohort.csv"
        write_cohort(cohort, path)
        manifest.outputs.append(str(path))
    report = surrogate_study(cohort, parse_design(args.first), parse_design(args.second), setup,
                             RngStream(cfg.seed, "surrogate"), cfg.T2)
    manifest.outputs += [str(p) for p in report.write(out, cfg.config_hash())]
    print(json.dumps({"fraction_second_better": report.fraction_second_better}))


def cmd_validate_robust(args, cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    res = []
    for text in args.designs:
        r = robustness_check(RngStream(cfg.seed, "validate-robust"), parse_design(text),
                             parse_params(args.params), cfg.setup(), cfg.T2)
        manifest.outputs += [str(p) for p in r.write(out, cfg.config_hash())]
        res.append(r.to_dict())
    print(json.dumps([{k: d[k] for k in ("design", "coverage", "posterior_ise", "prior_predictive_ise")}
                      for d in res]))


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "estimate": cmd_estimate,
            "compare": cmd_compare, "search": cmd_search, "validate-random": cmd_validate_random,
            "validate-surrogate": cmd_validate_surrogate, "validate-robust": cmd_validate_robust}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--workers", type=int, default=1, help="worker processes for replicates")
    common.add_argument("--sigma", type=float, help="measurement noise sd, mg/dl")
    common.add_argument("--T2", type=int, help="posterior draws per replicate")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ogtt-design", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate measurements for one patient")
    s.add_argument("--params", default="healthy",
                   help="theta0,theta1,theta2,g0 or one of " + ", ".join(NAMED_PATIENTS))
    s.add_argument("--design", default="conventional", help="minutes, e.g. 0,60,120, or a design name")
    s.add_argument("--output", help="CSV path (default <out>/measurements.csv)")

    s = sub.add_parser("fit", parents=[common], help="posterior sample for measured data")
    s.add_argument("data", help="CSV with time_minutes, glucose_mg_dl")
    s.add_argument("--draws", type=int, default=100)
    s.add_argument("--chain", action="store_true", help="also dump the raw chain")

    s = sub.add_parser("estimate", parents=[common], help="expected utility of one design")
    s.add_argument("--design", default="proposed")
    s.add_argument("--T1", type=int)

    s = sub.add_parser("compare", parents=[common], help="z-test between two designs")
    s.add_argument("--design-a", default="proposed")
    s.add_argument("--design-b", default="conventional")
    s.add_argument("--alpha", type=float)
    s.add_argument("--T1-initial", type=int)
    s.add_argument("--T1-max", type=int)
    s.add_argument("--growth", type=float)

    s = sub.add_parser("search", parents=[common], help="grid search for the best design")
    s.add_argument("--grid", help="candidate minutes, e.g. 30,60,90,120")
    s.add_argument("--k-range", help="measurement counts, e.g. 3-6 or 2,3")
    s.add_argument("--alpha", type=float)
    s.add_argument("--T1-initial", type=int)
    s.add_argument("--T1-max", type=int)
    s.add_argument("--growth", type=float)
    s.add_argument("--prefilter", action="store_true", default=None)
    s.add_argument("--design-prior", help="JSON list of design-prior patients")

    s = sub.add_parser("validate-random", parents=[common], help="proposed vs random designs")
    s.add_argument("--trials", type=int, default=100, help="trials per size")
    s.add_argument("--sizes", type=parse_int_list, default=(4, 5, 6))
    s.add_argument("--proposed", default="proposed")
    s.add_argument("--replicates", type=int, default=2, help="data sets per arm and trial")

    s = sub.add_parser("validate-surrogate", parents=[common], help="surrogate utility on dense data")
    s.add_argument("--cohort", help="cohort CSV (patient_id, time_minutes, glucose_mg_dl)")
    s.add_argument("--patients", type=int, default=17, help="synthetic cohort size")
    s.add_argument("--first", default="conventional")
    s.add_argument("--second", default="proposed")

    s = sub.add_parser("validate-robust", parents=[common], help="fit an extreme patient")
    s.add_argument("--params", default="extreme")
    s.add_argument("--designs", nargs="+", default=["proposed", "early"])
    return p


def _config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    g = lambda name: getattr(args, name, None)  # noqa: E731
    return cfg.replace(
        seed=args.seed, out_dir=args.out, sigma=args.sigma, T1=g("T1"), T2=g("T2"),
        alpha=g("alpha"), T1_initial=g("T1_initial"), T1_max=g("T1_max"), growth=g("growth"),
        grid=None if g("grid") is None else parse_int_list(g("grid")),
        k_range=None if g("k_range") is None else parse_int_list(g("k_range")),
        prefilter=g("prefilter"), design_prior_path=g("design_prior"))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_from_args(args)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(args.command, cfg)
        COMMANDS[args.command](args, cfg, out, manifest)
        manifest.write(out)
    except OGTTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
