"""Command-line interface: ``cre {discover,estimate,sensitivity,pipeline,simulate}``.

Every report file carries a ``config`` block with the resolved parameters and
seed that produced it.  Reports leave out worker counts and intermediate file
paths, so running the subcommands on the pipeline's intermediate files
reproduces the pipeline's reports byte for byte.  ``manifest.json`` records
the full invocation, the artifacts written and, on failure, an error record.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._random import resolve_threads
from .data import Dataset, SplitIndices, dumps, load_dataset, rules_from_json, rules_to_json, split_sample
from .errors import AlignmentError, CREError, DomainError, SchemaError
from .pipeline import DiscoveryConfig, InferenceConfig, discover, estimate, parse_method, usable_rules
from .pseudo import Method, load_external_pseudo
from .selection import SelectionParams
from .sensitivity import SensitivityConfig, sensitivity_intervals
from .simulation import (
    Confounding,
    DgpSpec,
    run_discovery_experiment,
    run_estimation_experiment,
    write_discovery_metrics,
    write_estimation_metrics,
)
from .trees import EnsembleParams

log = logging.getLogger("cre")

DEFAULT_LAMBDAS = "1.01,1.02,1.03,1.04,1.05"


# ---------------------------------------------------------------- parsing

def _floats(text: str) -> list[float]:
    vals = [v.strip() for v in str(text).split(",") if v.strip()]
    try:
        return [float(v) for v in vals]
    except ValueError:
        raise DomainError(f"expected comma-separated numbers, got {text!r}") from None


def _add_data_args(p, need_split_files: bool = False):
    p.add_argument("--input", required=True, help="CSV with outcome, treatment and covariate columns")
    p.add_argument("--outcome", default="y", help="outcome column name (default: y)")
    p.add_argument("--treatment", default="z", help="treatment column name (default: z)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: available cores)")
    p.add_argument("--out", required=True, help="output directory")
    if need_split_files:
        p.add_argument("--split", required=True, help="split.json written by discover/pipeline")
        p.add_argument("--rules", required=True, help="selection_report.json (or a JSON list of rules)")


def _add_discovery_args(p):
    p.add_argument("--ratio", type=float, default=0.25, help="discovery share of the sample (default 0.25)")
    p.add_argument("--method", default="impute-diff", help="discovery-step effect estimates "
                   "(ipw, sipw, or, impute-diff, external)")
    p.add_argument("--external", default=None, help="CSV column of external effect estimates, full-sample row order")
    p.add_argument("--threshold", type=float, default=0.8, help="stability selection cut-off")
    p.add_argument("--qmax", type=int, default=20, help="LASSO entrants counted per subsample")
    p.add_argument("--subsamples", type=int, default=50, help="number of half-samples")
    p.add_argument("--trees", type=int, default=200, help="trees in each ensemble")
    p.add_argument("--max-depth", type=int, default=3)
    p.add_argument("--min-leaf", type=int, default=20)
    p.add_argument("--min-support", type=float, default=0.02)


def _add_inference_args(p):
    p.add_argument("--inference-method", default="sipw", help="inference-step pseudo-outcomes")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--hc", default=None, choices=["HC0", "HC3"], help="sandwich flavour (default by N)")
    p.add_argument("--plain-sandwich", action="store_true",
                   help="ignore estimation of the propensity in the IPW/SIPW variance")


def _add_sensitivity_args(p, grid_default):
    p.add_argument("--lambda-grid", default=grid_default, help="comma-separated Lambda values >= 1")
    p.add_argument("--bootstraps", type=int, default=1000)
    p.add_argument("--propensity-columns", default=None,
                   help="comma-separated covariate names for the sensitivity propensity model (default: all)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cre", description="Causal rule ensemble: discover and estimate "
                                 "heterogeneous treatment effects as interpretable decision rules.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("discover", help="split the sample and select causal rules on the discovery share")
    _add_data_args(p)
    _add_discovery_args(p)
    p = sub.add_parser("estimate", help="estimate rule effects on the inference share")
    _add_data_args(p, need_split_files=True)
    _add_inference_args(p)
    p.add_argument("--external", default=None)
    p = sub.add_parser("sensitivity", help="sensitivity intervals for rule effects")
    _add_data_args(p, need_split_files=True)
    _add_sensitivity_args(p, DEFAULT_LAMBDAS)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--clip", type=float, default=0.01)
    p = sub.add_parser("pipeline", help="discover, estimate and (with --lambda-grid) sensitivity")
    _add_data_args(p)
    _add_discovery_args(p)
    _add_inference_args(p)
    _add_sensitivity_args(p, None)

    p = sub.add_parser("simulate", help="Monte Carlo experiments on the synthetic designs")
    p.add_argument("--experiment", choices=["discovery", "estimation"], default="discovery")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--k-grid", default="0.1,0.5,1.0,2.0", help="effect sizes (discovery experiment)")
    p.add_argument("--k", type=float, default=1.0, help="effect size (estimation experiment)")
    p.add_argument("--ratios", default="0.25,0.5", help="discovery shares (estimation experiment)")
    p.add_argument("--oracle-rules", action="store_true", help="skip discovery, use the true rules")
    p.add_argument("--replicates", type=int, default=10)
    p.add_argument("--n-rules", type=int, default=2, choices=[2, 4])
    p.add_argument("--modifiers", default="x1-x3", choices=["x1-x3", "x8-x10"])
    p.add_argument("--correlation", type=float, default=0.0)
    p.add_argument("--confounding", default="linear", choices=[c.value for c in Confounding])
    p.add_argument("--method", default="impute-diff")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--qmax", type=int, default=20)
    p.add_argument("--subsamples", type=int, default=50)
    p.add_argument("--trees", type=int, default=200)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True)
    return ap


# ---------------------------------------------------------------- helpers

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _require_paths(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise DomainError(f"file not found: {p}")


def _data_config(args) -> dict:
    return {"input_sha256": _sha256(args.input), "outcome": args.outcome, "treatment": args.treatment}


def _discovery_config(args) -> DiscoveryConfig:
    ens = EnsembleParams(n_trees_forest=args.trees, n_trees_boost=args.trees, max_depth=args.max_depth,
                         min_leaf=args.min_leaf)
    sel = SelectionParams(threshold=args.threshold, n_subsamples=args.subsamples, q_max=args.qmax)
    return DiscoveryConfig(method=parse_method(args.method).value, ensemble=ens, selection=sel,
                           min_support=args.min_support)


def _inference_config(args) -> InferenceConfig:
    return InferenceConfig(method=parse_method(args.inference_method).value, hc_flavor=args.hc, alpha=args.alpha,
                           propensity_adjusted=not args.plain_sandwich)


def _sensitivity_config(args, grid: str) -> SensitivityConfig:
    return SensitivityConfig(lambda_values=tuple(_floats(grid)), n_bootstrap=args.bootstraps,
                             alpha=args.alpha, seed=args.seed)


def _propensity_columns(args, d: Dataset):
    if not args.propensity_columns:
        return None
    return [d.column_index(c.strip()) for c in args.propensity_columns.split(",") if c.strip()]


def _external(path, d: Dataset, rows):
    if path is None:
        return None
    return load_external_pseudo(path, d).subset(rows)


def _write(out: Path, name: str, text: str, written: list):
    path = out / name
    path.write_text(text, encoding="utf-8")
    written.append(name)
    return path


def _load_rules(path, names):
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(obj, dict):
        obj = obj.get("selected_rules", obj.get("rules"))
    if not isinstance(obj, list):
        raise SchemaError(f"{path}: expected a list of rules or a selection report")
    return rules_from_json(obj, names)


def _load_split(path, d: Dataset) -> SplitIndices:
    split = SplitIndices.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
    every = np.concatenate([split.discovery, split.inference])
    if every.size != d.n or np.unique(every).size != d.n or every.min() < 0 or every.max() >= d.n:
        raise AlignmentError(f"{path}: split indices do not partition the {d.n} rows of the input")
    return split


# ---------------------------------------------------------------- text tables

def _fmt(v) -> str:
    return f"{v:.3f}"


def inference_table(report: dict) -> str:
    """Estimate with confidence interval per rule."""
    rows = report["inference"]["coefficients"]
    width = max([len("Rule")] + [len(r["label"]) for r in rows])
    level = int(round(100 * (1 - report["inference"]["alpha"])))
    lines = [f"{'Rule':<{width}}  {'Estimate':>9}  " + f"{level}% CI".rjust(20)]
    for r in rows:
        ci = f"({_fmt(r['ci_lower'])}, {_fmt(r['ci_upper'])})"
        lines.append(f"{r['label']:<{width}}  {_fmt(r['estimate']):>9}  {ci:>20}")
    w = report["inference"]["wald"]
    if w["df"]:
        lines.append(f"Wald: T = {w['stat']:.3f}, df = {w['df']}, critical = {w['critical']:.3f}, "
                     f"reject = {w['reject']}")
    for note in report["inference"]["notes"]:
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


def sensitivity_table(report: dict) -> str:
    """One row per rule, one column per Lambda."""
    rules = report["sensitivity"]["rules"]
    lams = [iv["lambda"] for iv in rules[0]["intervals"]]
    width = max([len("Rule")] + [len(r["label"]) for r in rules])
    head = f"{'Rule':<{width}}" + "".join("  " + f"Lambda={l:g}".rjust(18) for l in lams)
    lines = [head]
    for r in rules:
        cells = "".join("  " + f"[{_fmt(iv['lower'])}, {_fmt(iv['upper'])}]".rjust(18) for iv in r["intervals"])
        lines.append(f"{r['label']:<{width}}{cells}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- steps

def _step_discover(args, d: Dataset, out: Path, written: list, split: SplitIndices | None = None):
    if not (0.0 < args.ratio < 1.0):
        raise DomainError("--ratio must lie in (0, 1)")
    config = _discovery_config(args)
    if parse_method(config.method) is Method.EXTERNAL and args.external is None:
        raise DomainError("--method external requires --external")
    split = split or split_sample(d, args.ratio, seed=args.seed)
    _write(out, "split.json", dumps(split.to_json()), written)
    d_disc = d.subset(split.discovery)
    res = discover(d_disc, config, seed=args.seed, threads=args.threads,
                   external=_external(args.external, d, split.discovery))
    base = {"data": _data_config(args), "seed": args.seed, "split_ratio": split.ratio, "discovery": config.to_json()}
    names = d.column_names
    cand = {"config": base, "n_candidates": len(res.candidates), "rules": rules_to_json(res.candidates, names)}
    _write(out, "candidate_rules.json", dumps(cand), written)
    sel = {"config": base, "rules": res.selection_report(), "selected_rules": rules_to_json(res.selected, names),
           "dropped": [{"label": r.label, "reason": why} for r, why in res.rule_matrix.dropped]}
    _write(out, "selection_report.json", dumps(sel), written)
    return split, list(res.selected)


def _step_estimate(args, d: Dataset, split: SplitIndices, rules, out: Path, written: list):
    config = _inference_config(args)
    if parse_method(config.method) is Method.EXTERNAL and args.external is None:
        raise DomainError("--inference-method external requires --external")
    d_inf = d.subset(split.inference)
    res = estimate(d_inf, rules, config, seed=args.seed, external=_external(args.external, d, split.inference))
    report = {"config": {"data": _data_config(args), "seed": args.seed, "split_ratio": split.ratio,
                         "inference": {k: v for k, v in config.to_json().items() if k != "ensemble"},
                         "rules": [r.label for r in rules]},
              "inference": res.inference.to_json(),
              "dropped": [{"label": r.label, "reason": why} for r, why in res.dropped]}
    _write(out, "inference_report.json", dumps(report), written)
    _write(out, "inference_report.txt", inference_table(report), written)
    return res


def _step_sensitivity(args, d: Dataset, split: SplitIndices, rules, grid: str, out: Path, written: list):
    config = _sensitivity_config(args, grid)
    d_inf = d.subset(split.inference)
    rules, _ = usable_rules(rules, d_inf)
    cols = _propensity_columns(args, d)
    clip = getattr(args, "clip", 0.01)
    res = sensitivity_intervals(d_inf, rules, config, propensity_columns=cols, clip=clip, threads=args.threads)
    report = {"config": {"data": _data_config(args), "seed": args.seed, "split_ratio": split.ratio,
                         "sensitivity": config.to_json(), "clip": clip,
                         "propensity_columns": None if cols is None else [d.column_names[c] for c in cols],
                         "rules": [r.label for r in rules]},
              "sensitivity": res.to_json()}
    _write(out, "sensitivity_report.json", dumps(report), written)
    _write(out, "sensitivity_report.txt", sensitivity_table(report), written)
    return res


def _load(args) -> Dataset:
    _require_paths(args.input, getattr(args, "split", None), getattr(args, "rules", None),
                   getattr(args, "external", None))
    return load_dataset(args.input, args.outcome, args.treatment)


def cmd_discover(args, out, written):
    d = _load(args)
    _step_discover(args, d, out, written)


def cmd_estimate(args, out, written):
    d = _load(args)
    split = _load_split(args.split, d)
    _step_estimate(args, d, split, _load_rules(args.rules, d.column_names), out, written)


def cmd_sensitivity(args, out, written):
    if not _floats(args.lambda_grid):
        raise DomainError("the Lambda grid is empty")
    d = _load(args)
    split = _load_split(args.split, d)
    _step_sensitivity(args, d, split, _load_rules(args.rules, d.column_names), args.lambda_grid, out, written)


def cmd_pipeline(args, out, written):
    if args.lambda_grid is not None and not _floats(args.lambda_grid):
        raise DomainError("the Lambda grid is empty")
    d = _load(args)
    split, rules = _step_discover(args, d, out, written)
    _step_estimate(args, d, split, rules, out, written)
    if args.lambda_grid is not None:
        _step_sensitivity(args, d, split, rules, args.lambda_grid, out, written)


def cmd_simulate(args, out, written):
    method = parse_method(args.method)
    if method is Method.EXTERNAL:
        raise DomainError("simulate cannot use external estimates")
    ens = EnsembleParams(n_trees_forest=args.trees, n_trees_boost=args.trees)
    sel = SelectionParams(threshold=args.threshold, n_subsamples=args.subsamples, q_max=args.qmax)
    dconf = DiscoveryConfig(method=method.value, ensemble=ens, selection=sel)
    base = DgpSpec(n=args.n, k_effect=args.k, n_rules=args.n_rules, effect_modifiers=args.modifiers,
                   correlation=args.correlation, confounding=args.confounding, seed=0)
    config = {"experiment": args.experiment, "seed": args.seed, "replicates": args.replicates,
              "dgp": base.to_json(), "discovery": dconf.to_json()}
    if args.experiment == "discovery":
        ks = _floats(args.k_grid)
        if not ks:
            raise DomainError("--k-grid is empty")
        config["k_grid"] = ks
        metrics = run_discovery_experiment([replace(base, k_effect=k) for k in ks], args.replicates, dconf,
                                           seed=args.seed, threads=args.threads)
        paths = write_discovery_metrics(metrics, out, config)
    else:
        ratios = _floats(args.ratios)
        if not ratios:
            raise DomainError("--ratios is empty")
        config.update(ratios=ratios, oracle_rules=args.oracle_rules, inference=InferenceConfig().to_json())
        metrics = run_estimation_experiment(base, ratios, args.replicates, dconf, seed=args.seed,
                                            threads=args.threads, oracle_rules=args.oracle_rules)
        paths = write_estimation_metrics(metrics, out, config)
    written.extend(p.name for p in paths.values())


COMMANDS = {"discover": cmd_discover, "estimate": cmd_estimate, "sensitivity": cmd_sensitivity,
            "pipeline": cmd_pipeline, "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:            # argparse usage errors exit with 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    manifest = {"command": args.command, "version": __version__, "python": platform.python_version(),
                "numpy": np.__version__, "arguments": {k: v for k, v in sorted(vars(args).items())},
                "threads_resolved": resolve_threads(getattr(args, "threads", None))}
    code = 0
    try:
        COMMANDS[args.command](args, out, written)
        manifest["status"] = "ok"
    except CREError as exc:
        code = exc.exit_code
        manifest["status"] = "error"
        manifest["error"] = {"type": type(exc).__name__, "message": str(exc), "exit_code": code}
        print(f"cre {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
    manifest["artifacts"] = written
    (out / "manifest.json").write_text(dumps(manifest), encoding="utf-8")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
