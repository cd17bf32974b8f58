"""Config-driven command line: analyze, simulate, oracle, validate.

All commands read a JSON config, write JSON (plus flat CSV where tabular)
into an output directory, and embed a provenance block sufficient to
reproduce the run. Seeds are mandatory; nothing defaults to the wall clock.
Exit codes: 0 success, 2 validation error, 3 estimation failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import pandas as pd

from . import __version__
from .data import EffectScale, SummaryConfig, TrialDataError, load_trial
from .estimators import EstimatorSpec, assemble_effects
from .inference import InferenceSpec, estimate_with_intervals
from .integrate import IntegrationPlan
from .nuisance import Misspecification
from .sim import (
    FiniteDgp,
    LinearGaussianDgp,
    oracle_effects,
    oracle_truth,
    run_scenario,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ESTIMATION = 3


class ConfigError(ValueError):
    pass


def _load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _require(config: dict, *keys):
    missing = [k for k in keys if k not in config]
    if missing:
        raise ConfigError(f"config is missing required keys: {missing}")


def _estimator_spec(entry: dict, seed: int) -> EstimatorSpec:
    plan = IntegrationPlan(
        method=entry.get("integration", "mc"),
        draws=int(entry.get("draws", 4000)),
        nodes=int(entry.get("nodes", 64)),
        seed=seed,
        antithetic=bool(entry.get("antithetic", True)),
    )
    return EstimatorSpec(
        family=entry.get("family", "eif1"),
        backend=entry.get("backend", "parametric"),
        stabilized=bool(entry.get("stabilized", False)),
        folds=int(entry.get("folds", 5)),
        integration=plan,
        seed=seed,
    )


def _summary_config(config: dict) -> SummaryConfig:
    entry = config.get("summary", {})
    return SummaryConfig(
        mediator_summary=entry.get("mediator_summary", "own_loo"),
        covariate_summary=entry.get("covariate_summary", "own_loo"),
        include_n=bool(entry.get("include_n", True)),
    )


def _inference_spec(config: dict, seed: int) -> InferenceSpec:
    entry = config.get("inference", {}) or {}
    return InferenceSpec(
        method=entry.get("method", "auto"),
        b=int(entry.get("b", 1000)),
        seed=seed,
        level=float(entry.get("level", 0.95)),
    )


def _dgp_from(entry: dict):
    kind = entry.get("kind")
    params = {k: v for k, v in entry.items() if k != "kind"}
    for key in ("size_pmf", "v_pmf", "mix_pmf"):
        if key in params and params[key] is not None:
            params[key] = {_coerce_key(k): v for k, v in params[key].items()}
    if kind == "linear_gaussian":
        return LinearGaussianDgp(**params)
    if kind == "finite":
        return FiniteDgp(**params)
    raise ConfigError(f"unknown dgp kind {kind!r}")


def _coerce_key(key):
    try:
        return int(key)
    except (TypeError, ValueError):
        return float(key)


def _misspec_from(entry: dict | None) -> Misspecification | None:
    if not entry:
        return None
    return Misspecification(
        outcome_omit_mediator=bool(entry.get("outcome_omit_mediator", False)),
        mediator_omit_treatment=bool(entry.get("mediator_omit_treatment", False)),
        force_rho=entry.get("force_rho"),
        propensity_intercept_only=bool(entry.get("propensity_intercept_only", False)),
    )


def _write_json(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _error_payload(kind: str, exc: Exception) -> dict:
    return {"error": {"type": kind, "message": str(exc)}}


def _provenance(config: dict, seed: int, extra: dict | None = None) -> dict:
    block = {"config": config, "seed": seed, "crtmed_version": __version__}
    if extra:
        block.update(extra)
    return block


def cmd_analyze(config: dict, seed: int, out: Path, threads: int) -> int:
    _require(config, "input", "pi", "estimators")
    trial = load_trial(
        config["input"],
        schema=config.get("schema"),
        pi=float(config["pi"]),
        mediator_support=config.get("mediator_support"),
    )
    scale = EffectScale(config.get("scale", "difference"))
    cfg = _summary_config(config)
    inf = _inference_spec(config, seed)
    report: dict = {"estimators": {}, "provenance": _provenance(config, seed)}
    rows = []
    for entry in config["estimators"]:
        spec = _estimator_spec(entry, seed)
        res, intervals = estimate_with_intervals(
            trial, spec, inf, scale, cfg=cfg, threads=threads
        )
        effects = assemble_effects(res.points, scale)
        report["estimators"][spec.label] = {
            "points": res.points.as_dict(),
            "effects": effects.as_dict(),
            "intervals": {k: v.as_dict() for k, v in intervals.items()},
            "diagnostics": res.diagnostics,
        }
        for name, interval in intervals.items():
            rows.append(
                {
                    "estimator": spec.label,
                    "quantity": name,
                    "point": interval.point,
                    "lower": interval.lower,
                    "upper": interval.upper,
                    "se": interval.se,
                }
            )
    _write_json(out / "report.json", report)
    pd.DataFrame(rows).to_csv(out / "effects.csv", index=False)
    return EXIT_OK


def cmd_simulate(config: dict, seed: int, out: Path, threads: int) -> int:
    del threads  # replicates run serially; inner estimators are vectorized
    _require(config, "dgp", "k", "replicates", "estimators")
    dgp = _dgp_from(config["dgp"])
    specs = [_estimator_spec(entry, seed) for entry in config["estimators"]]
    inference = None
    if config.get("inference"):
        inference = _inference_spec(config, seed)
    results = run_scenario(
        dgp,
        k=int(config["k"]),
        replicates=int(config["replicates"]),
        estimators=specs,
        misspec=_misspec_from(config.get("misspec")),
        inference=inference,
        scale=EffectScale(config.get("scale", "difference")),
        seed=seed,
        cfg=_summary_config(config),
    )
    payload = {
        "results": [asdict(r) for r in results],
        "provenance": _provenance(config, seed),
    }
    _write_json(out / "scenario.json", payload)
    pd.DataFrame([asdict(r) for r in results]).to_csv(out / "scenario.csv", index=False)
    return EXIT_OK


def cmd_oracle(config: dict, seed: int, out: Path, threads: int) -> int:
    del threads
    _require(config, "dgp")
    dgp = _dgp_from(config["dgp"])
    truth = oracle_truth(
        dgp,
        method=config.get("method", "auto"),
        draws=int(config.get("draws", 10**6)),
        seed=seed,
        tol=config.get("tol"),
    )
    payload = {
        "theta_c": {f"({a},{s})": val for (a, s), val in truth.theta_c.items()},
        "theta_i": {f"({a},{s})": val for (a, s), val in truth.theta_i.items()},
        "tau_c": truth.tau_c,
        "tau_i": truth.tau_i,
        "effects": oracle_effects(truth, EffectScale(config.get("scale", "difference"))),
        "method": truth.method,
        "mc_se": truth.se,
        "provenance": _provenance(config, seed),
    }
    _write_json(out / "oracle.json", payload)
    return EXIT_OK


def cmd_validate(config: dict, seed: int, out: Path, threads: int) -> int:
    del threads
    _require(config, "input")
    trial = load_trial(
        config["input"],
        schema=config.get("schema"),
        pi=float(config.get("pi", 0.5)),
        mediator_support=config.get("mediator_support"),
    )
    sizes = trial.sizes
    payload = {
        "clusters": trial.k,
        "individuals": int(sizes.sum()),
        "size_min": int(sizes.min()),
        "size_max": int(sizes.max()),
        "mean_size": trial.nbar,
        "treated_clusters": trial.n_treated,
        "control_clusters": trial.k - trial.n_treated,
        "provenance": _provenance(config, seed),
    }
    _write_json(out / "validate.json", payload)
    return EXIT_OK


COMMANDS = {
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "oracle": cmd_oracle,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crtmed",
        description="Mediation effect estimation for cluster-randomized trials.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="path to a JSON config")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--out", default=None, help="output directory (overrides config)")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker threads for bootstrap replicates (falls back to CRTM_THREADS)",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args.config)
        seed = args.seed if args.seed is not None else config.get("seed")
        if seed is None:
            raise ConfigError("a seed is required (config 'seed' or --seed)")
        out = Path(args.out or config.get("out") or ".")
        threads = args.threads
        if threads is None:
            threads = int(os.environ.get("CRTM_THREADS", "1"))
    except ConfigError as exc:
        json.dump(_error_payload("config", exc), sys.stderr, sort_keys=True)
        sys.stderr.write("\n")
        return EXIT_VALIDATION
    try:
        return COMMANDS[args.command](config, int(seed), out, threads)
    except (TrialDataError, ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        json.dump(_error_payload("validation", exc), sys.stderr, sort_keys=True)
        sys.stderr.write("\n")
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - estimation failures exit 3
        json.dump(_error_payload("estimation", exc), sys.stderr, sort_keys=True)
        sys.stderr.write("\n")
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
