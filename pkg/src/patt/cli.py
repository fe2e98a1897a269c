"""Command-line entry point: ``patt {estimate,cv,diagnose,simulate}``.

Options come from a flat JSON config file (``--config``) overridden by
flags. Every report file records the master seed; ``PATT_THREADS`` sets the
default worker count for the Monte Carlo command.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .basis import BasisSpec
from .bootstrap import Pipeline, bootstrap_many, run_pipeline
from .data import Dataset, VariableRoles, load_csv
from .diagnostics import (balance_asd, unconfoundedness_q_test, write_balance_csv,
                          write_balance_long_csv)
from .errors import ConfigurationError, DataError, NumericalError, PattError
from .estimators import ESTIMATORS, AttWeights, MatchConfig, estimate_mix, format_table, match_controls
from .propensity import (DEFAULT_TRIM, DEFAULT_UNDERSMOOTH_L, fit_logit, loocv_mse_ps,
                         score_histogram, trim_extreme, undersmooth, write_histogram_csv)
from .series import DEFAULT_L_GRID, loocv_mse
from .simulation import SCENARIOS, DgpConfig, McSettings, run_monte_carlo

log = logging.getLogger("patt")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
COMMANDS = ("estimate", "cv", "diagnose", "simulate")


def default_threads() -> int:
    env = os.environ.get("PATT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"PATT_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


@dataclass(frozen=True)
class RunConfig:
    command: str
    input: Optional[str] = None
    outcome: Optional[str] = None
    treatment: Optional[str] = None
    discrete: tuple = ()
    continuous: tuple = ()
    indicators: tuple = ()
    lagged: Optional[str] = None
    id: Optional[str] = None
    estimators: tuple = ESTIMATORS
    l_grid: tuple = DEFAULT_L_GRID
    undersmooth_l: int = DEFAULT_UNDERSMOOTH_L
    trim_threshold: Optional[float] = DEFAULT_TRIM
    m: int = 6
    bootstrap_b: int = 1000
    seed: Optional[int] = None
    output_dir: str = "."
    threads: Optional[int] = None
    replicates: int = 500
    n_units: int = 1000
    n_oracle: int = 10 ** 7
    scenarios: tuple = SCENARIOS

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigurationError(f"unknown command {self.command!r}")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad or not self.estimators:
            raise ConfigurationError(f"estimators must be a non-empty subset of {ESTIMATORS}")
        if not self.l_grid or min(self.l_grid) < 1:
            raise ConfigurationError("l_grid must contain orders >= 1")
        if self.trim_threshold is not None and not 0.5 < self.trim_threshold < 1:
            raise ConfigurationError("trim_threshold must lie in (0.5, 1)")
        if self.m < 1 or self.bootstrap_b < 2 or self.replicates < 2:
            raise ConfigurationError("m >= 1, bootstrap_b >= 2 and replicates >= 2 are required")
        if self.command != "simulate":
            if not self.input:
                raise ConfigurationError("an input CSV is required")
            if not self.outcome or not self.treatment:
                raise ConfigurationError("outcome and treatment columns are required")

    def roles(self) -> VariableRoles:
        return VariableRoles(self.outcome, self.treatment, tuple(self.discrete),
                             tuple(self.continuous), self.lagged, tuple(self.indicators), self.id)


_LIST_KEYS = {"discrete", "continuous", "indicators", "estimators", "scenarios"}
_INT_LIST_KEYS = {"l_grid"}


def _coerce(key, value):
    if key in _LIST_KEYS:
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        return tuple(str(v) for v in value)
    if key in _INT_LIST_KEYS:
        if isinstance(value, str):
            value = value.split(",")
        try:
            return tuple(int(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{key} must be a list of integers")
    return value


def load_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigurationError("config file must hold one flat JSON object")
    known = {f.name for f in fields(RunConfig)} - {"command"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    for k, v in raw.items():
        if isinstance(v, dict):
            raise ConfigurationError(f"config key {k!r} must not be nested")
    return raw


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON file of RunConfig keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir", "-o", dest="output_dir")
        p.add_argument("--l-grid", dest="l_grid", help="comma-separated orders, e.g. 1,2,3,4,5")
        if name != "simulate":
            p.add_argument("input", nargs="?")
            p.add_argument("--outcome")
            p.add_argument("--treatment")
            p.add_argument("--discrete", help="comma-separated categorical columns")
            p.add_argument("--continuous", help="comma-separated continuous columns")
            p.add_argument("--indicators", help="comma-separated pre-coded 0/1 columns")
            p.add_argument("--lagged", help="lagged outcome column for the Q-test")
            p.add_argument("--id", help="unit identifier column")
        if name in ("estimate", "diagnose", "simulate"):
            p.add_argument("--undersmooth-l", dest="undersmooth_l", type=int)
            p.add_argument("--trim", dest="trim_threshold", type=float)
            p.add_argument("--no-trim", dest="no_trim", action="store_true")
            p.add_argument("--m", type=int)
        if name in ("estimate", "simulate"):
            p.add_argument("--bootstrap-b", dest="bootstrap_b", type=int)
        if name == "estimate":
            p.add_argument("--estimators", help="comma-separated subset of reg,wt,mix,dr")
        if name == "simulate":
            p.add_argument("--replicates", type=int)
            p.add_argument("--n-units", dest="n_units", type=int)
            p.add_argument("--n-oracle", dest="n_oracle", type=int)
            p.add_argument("--scenarios", help=f"comma-separated subset of {','.join(SCENARIOS)}")
            p.add_argument("--threads", type=int)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name != "command":
            values[f.name] = v
    if getattr(args, "no_trim", False):
        values["trim_threshold"] = None
    if args.command == "simulate":
        # the Monte Carlo design has no trimming step unless asked for
        values.setdefault("trim_threshold", None)
    values = {k: _coerce(k, v) for k, v in values.items()}
    try:
        return RunConfig(command=args.command, **values)
    except TypeError as exc:
        raise ConfigurationError(str(exc))


# -- commands ----------------------------------------------------------------


def _resolve_seed(cfg: RunConfig) -> RunConfig:
    if cfg.seed is None:
        # fresh entropy, recorded so the run can be repeated
        cfg = replace(cfg, seed=int(np.random.SeedSequence().entropy % (2 ** 63)))
    return cfg


def _out(cfg: RunConfig, name: str) -> Path:
    d = Path(cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _comment(cfg: RunConfig) -> str:
    return f"patt {cfg.command} seed={cfg.seed}"


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _load(cfg: RunConfig) -> Dataset:
    return load_csv(cfg.input, cfg.roles())


def _select_orders(cfg: RunConfig, d: Dataset):
    cv_out = loocv_mse(d.take(d.treatment == 0), cfg.l_grid)
    cv_ps = loocv_mse_ps(d, cfg.l_grid)
    l_ps = undersmooth(BasisSpec.for_dataset(d, cv_ps.selected_l),
                       max(cfg.undersmooth_l, cv_ps.selected_l)).l
    return cv_out, cv_ps, l_ps


def cmd_cv(cfg: RunConfig) -> int:
    d = _load(cfg)
    cv_out, cv_ps, l_ps = _select_orders(cfg, d)
    cv_out.to_csv(_out(cfg, "cv_outcome.csv"), _comment(cfg))
    cv_ps.to_csv(_out(cfg, "cv_propensity.csv"), _comment(cfg))
    print(f"outcome l={cv_out.selected_l}  propensity l={cv_ps.selected_l} "
          f"(undersmoothed to {l_ps})")
    return EXIT_OK


def _diagnostics(cfg: RunConfig, d: Dataset, l_ps: int, match=None):
    """Score histogram, trimming and balance; returns the fit and trimmed data."""
    ps = fit_logit(d, BasisSpec.for_dataset(d, l_ps))
    write_histogram_csv(score_histogram(d, ps.scores), _out(cfg, "ps_hist.csv"), _comment(cfg))
    dropped = []
    if cfg.trim_threshold is not None:
        d, dropped = trim_extreme(d, ps, cfg.trim_threshold)
    reports = [balance_asd(d), balance_asd(d, AttWeights.from_scores(d.treatment, ps.predict(d)))]
    if match is not None or "mix" in cfg.estimators:
        match = match_controls(d, MatchConfig(m=cfg.m)) if match is None else match
        reports.append(balance_asd(d, match.multiplicity_weights(d)))
    write_balance_csv(reports, _out(cfg, "balance.csv"), _comment(cfg))
    write_balance_long_csv(reports, _out(cfg, "balance_long.csv"), _comment(cfg))
    return ps, d, dropped, match


def _qtest(cfg: RunConfig, d: Dataset):
    if d.lagged_outcome is None:
        return None
    test = unconfoundedness_q_test(d, l_grid=cfg.l_grid)
    test.to_json(_out(cfg, "qtest.json"), seed=cfg.seed)
    return test


def cmd_diagnose(cfg: RunConfig) -> int:
    d = _load(cfg)
    _, cv_ps, l_ps = _select_orders(cfg, d)
    _, kept, dropped, _ = _diagnostics(cfg, d, l_ps)
    test = _qtest(cfg, kept)
    print(f"propensity l={l_ps}; trimmed {len(dropped)} units")
    if test is not None:
        print(f"Q={test.q_stat:.3f} on {test.dof} dof, p={test.p_value:.4f}")
    return EXIT_OK


def misspecification_note(results: dict) -> Optional[str]:
    wt, dr = results.get("wt"), results.get("dr")
    if wt is None or dr is None or wt.std_error is None or dr.std_error is None:
        return None
    gap = abs(wt.tau_hat - dr.tau_hat)
    if gap > 2 * max(wt.std_error, dr.std_error):
        return (f"wt and dr differ by {gap:.4g}, more than twice the larger standard error; "
                "the propensity or outcome model may be misspecified")
    return None


def cmd_estimate(cfg: RunConfig) -> int:
    d = _load(cfg)
    cv_out, cv_ps, l_ps = _select_orders(cfg, d)
    cv_out.to_csv(_out(cfg, "cv_outcome.csv"), _comment(cfg))
    cv_ps.to_csv(_out(cfg, "cv_propensity.csv"), _comment(cfg))
    l_out = cv_out.selected_l
    _, kept, dropped, match = _diagnostics(cfg, d, l_ps)
    _qtest(cfg, kept)

    results, errors = {}, {}
    thr = cfg.trim_threshold
    plans = {}
    for est in cfg.estimators:
        if est == "reg":
            plans[est] = Pipeline("reg", l_out, l_ps if thr is not None else None, thr)
        elif est == "wt":
            plans[est] = Pipeline("wt", None, l_ps, thr)
        elif est == "dr":
            plans[est] = Pipeline("dr", l_out, l_ps, thr)
    boots = {}
    if plans:
        boots = bootstrap_many(d, list(plans.values()), cfg.bootstrap_b,
                               np.random.SeedSequence(cfg.seed))
    for est in cfg.estimators:
        try:
            if est == "mix":
                results[est] = estimate_mix(kept, MatchConfig(m=cfg.m), l_out, match)
                continue
            p = plans[est]
            boot = boots[p]
            if not np.isfinite(boot.std_error):
                raise NumericalError(f"all {cfg.bootstrap_b} bootstrap replicates failed")
            results[est] = run_pipeline(d, p).result.with_se(
                boot.std_error, se_method="stratified bootstrap", bootstrap_b=cfg.bootstrap_b,
                bootstrap_failed=boot.n_failed, se_unreliable=boot.unreliable)
        except NumericalError as exc:
            log.error("%s failed: %s", est, exc)
            errors[est] = f"{type(exc).__name__}: {exc}"

    aot = float(np.mean(kept.outcome[kept.treatment == 1]))
    note = misspecification_note(results)
    report = {
        "seed": cfg.seed,
        "config": asdict(cfg),
        "selected_l": {"outcome": l_out, "propensity": cv_ps.selected_l,
                       "propensity_undersmoothed": l_ps},
        "n_units": d.n_units,
        "n_trimmed": len(dropped),
        "trimmed_ids": list(dropped),
        "aot": aot,
        "estimates": [results[e].to_dict() for e in cfg.estimators if e in results],
        "errors": errors,
        "partial": bool(errors),
        "notes": [note] if note else [],
    }
    _write_json(_out(cfg, "estimates.json"), report)
    table = format_table([results[e] for e in cfg.estimators if e in results], aot)
    text = f"# {_comment(cfg)}\n{table}\n" + (f"note: {note}\n" if note else "")
    _out(cfg, "estimates.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_NUMERICAL if errors else EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    dgp = DgpConfig(n_units=cfg.n_units, seed=cfg.seed)
    settings = McSettings(bootstrap_b=cfg.bootstrap_b, l_grid=tuple(cfg.l_grid),
                          undersmooth_l=cfg.undersmooth_l, m=cfg.m,
                          trim_threshold=cfg.trim_threshold)
    threads = cfg.threads or default_threads()
    report = run_monte_carlo(dgp, cfg.replicates, cfg.scenarios, settings, threads,
                             n_oracle=cfg.n_oracle)
    report.to_csv(_out(cfg, "table1.csv"), _comment(cfg))
    _write_json(_out(cfg, "simulation.json"), {**report.to_dict(), "config": asdict(cfg)})
    with open(_out(cfg, "table1.csv"), encoding="utf-8") as fh:
        print(fh.read(), end="")
    return EXIT_OK

HANDLERS = {"estimate": cmd_estimate, "cv": cmd_cv, "diagnose": cmd_diagnose,
            "simulate": cmd_simulate}


def _fail(code: int, exc: Exception) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_seed(config_from_args(args))
        return HANDLERS[cfg.command](cfg)
    except ConfigurationError as exc:
        return _fail(EXIT_CONFIG, exc)
    except DataError as exc:
        return _fail(EXIT_DATA, exc)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except PattError as exc:
        return _fail(EXIT_NUMERICAL, exc)


if __name__ == "__main__":
    sys.exit(main())
