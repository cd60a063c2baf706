"""Configuration loading, the parallel Monte Carlo driver and report aggregation.

Configs are INI files.  Every key is optional except at least one
``[policy NAME]`` section; unknown sections or keys are rejected.

    [study]     n_reps=2000  master_seed=20240101  threads=1  output_dir=results
                oracle_n_mc=10000000
    [scenario]  n_subjects=1000  enroll_window=24  stage_delay=6  followup=6
                gamma1=0,0.9,-1.5  gamma2=0,0.3,-0.75,0.6,-0.25,-0.75,-0.75,-0.85
                x1_mean=5  x1_sd=1  eps1_sd=1  eps2_sd=1  response_fraction=0.7
    [design]    direction=minimize  update_period_weeks=1  burn_in_completers=25
    [ts]        clip_lo=0.05  clip_hi=0.95  n_value_draws=1000  beta_draw_sizes=32,32
                stage2_draws=1000  sequential_belief_mode=individual
    [policy X]  kind = sr | upfront_ts | sequential_ts
                sr: mode=upfront|sequential;  upfront_ts: estimator, c;
                sequential_ts: c, belief_mode
"""
from __future__ import annotations

import configparser
import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from .core_model import SEQUENTIAL, UPFRONT, BurnInRule, Timeline, TrialDesign, TsConfig, fig1_design
from .engine import SR, SequentialTS, UpfrontTS, run_trial
from .inference import POST_TRIAL_ESTIMATORS, post_trial_inference
from .rng import TrialStreams
from .scenario import REFERENCE_VALUES, OracleResult, ScenarioParams, oracle_true_values

log = logging.getLogger(__name__)

FAILURE_LIMIT = 0.01
ORACLE_SPAWN_KEY = 2 ** 31 - 1
THREADS_ENV = "SMART_RAR_THREADS"


class ConfigError(ValueError):
    """Unparseable config or a schema violation; ``key`` is a dotted path."""

    def __init__(self, message: str, path=None, key: str | None = None,
                 line: int | None = None, col: int | None = None):
        self.path, self.key, self.line, self.col = path, key, line, col
        where = str(path) if path else "<config>"
        if line is not None:
            where += f":{line}:{col or 1}"
        if key:
            where += f": {key}"
        super().__init__(f"{where}: {message}")


class StudyAborted(RuntimeError):
    def __init__(self, message: str, table: pd.DataFrame | None = None):
        super().__init__(message)
        self.table = table


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    scenario: ScenarioParams
    design: TrialDesign
    policies: tuple  # ((name, policy), ...)
    n_reps: int = 2000
    master_seed: int = 20240101
    threads: int = 1
    output_dir: Path = Path("results")
    oracle_n_mc: int = 10_000_000

    def __post_init__(self):
        if self.n_reps < 1:
            raise ConfigError("must be >= 1", key="study.n_reps")
        if self.threads < 1:
            raise ConfigError("must be >= 1", key="study.threads")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ConfigError("must be a 64-bit unsigned integer", key="study.master_seed")
        names = [n for n, _ in self.policies]
        if not names:
            raise ConfigError("at least one [policy NAME] section is required")
        if len(set(names)) != len(names):
            raise ConfigError("policy names must be unique")

    def policy(self, name: str):
        for n, p in self.policies:
            if n == name:
                return p
        raise KeyError(f"no policy named {name!r}; have {[n for n, _ in self.policies]}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


_SCHEMA = {
    "study": {"n_reps": int, "master_seed": int, "threads": int, "output_dir": str,
              "oracle_n_mc": int},
    "scenario": {"n_subjects": int, "enroll_window": int, "stage_delay": int, "followup": int,
                 "gamma1": _floats, "gamma2": _floats, "x1_mean": float, "x1_sd": float,
                 "eps1_sd": float, "eps2_sd": float, "response_fraction": float},
    "design": {"direction": str, "update_period_weeks": int, "burn_in_completers": int},
    "ts": {"clip_lo": float, "clip_hi": float, "n_value_draws": int,
           "beta_draw_sizes": _ints, "stage2_draws": int, "sequential_belief_mode": str},
}
_POLICY_KEYS = {"sr": {"mode"}, "upfront_ts": {"estimator", "c"},
                "sequential_ts": {"c", "belief_mode"}}


def _key_line(text: str, section: str, key: str | None = None) -> int | None:
    """1-based line of ``key`` inside ``[section]`` (or of the header), for messages."""
    current = None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return i
        elif current == section and key is not None:
            name = line.split("=", 1)[0].split(":", 1)[0].strip()
            if name == key:
                return i
    return None


def _parse_error(exc: configparser.Error, path, text: str) -> ConfigError:
    lineno = getattr(exc, "lineno", None)
    errors = getattr(exc, "errors", None)
    if errors:
        lineno = errors[0][0]
    col = None
    if lineno is not None:
        lines = text.splitlines()
        if 0 < lineno <= len(lines):
            raw = lines[lineno - 1]
            col = len(raw) - len(raw.lstrip()) + 1
    msg = getattr(exc, "message", str(exc)).splitlines()[0]
    return ConfigError(msg, path=path, line=lineno, col=col)


def parse_config(text: str, path=None) -> SimConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=str(path or "<config>"))
    except configparser.Error as exc:
        raise _parse_error(exc, path, text) from None

    def fail(msg, section, key=None):
        line = _key_line(text, section, key)
        return ConfigError(msg, path=path, key=f"{section}.{key}" if key else section, line=line)

    values: dict = {s: {} for s in _SCHEMA}
    policies = []
    for section in cp.sections():
        if section.startswith("policy "):
            name = section[len("policy "):].strip()
            if not name:
                raise fail("policy section needs a name", section)
            policies.append((name, section))
            continue
        if section not in _SCHEMA:
            raise fail(f"unknown section; expected {sorted(_SCHEMA)} or [policy NAME]", section)
        for key, raw in cp[section].items():
            conv = _SCHEMA[section].get(key)
            if conv is None:
                raise fail(f"unknown key; allowed: {sorted(_SCHEMA[section])}", section, key)
            try:
                values[section][key] = conv(raw)
            except ValueError:
                raise fail(f"cannot parse {raw!r}", section, key) from None

    st, sc, de, ts = values["study"], values["scenario"], values["design"], values["ts"]
    try:
        scenario = ScenarioParams(**sc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path=path, key="scenario") from None
    try:
        timeline = Timeline(enroll_weeks=scenario.enroll_window,
                            stage_delay_weeks=scenario.stage_delay,
                            followup_weeks=scenario.followup,
                            update_period_weeks=de.get("update_period_weeks", 1))
        burn = BurnInRule(de.get("burn_in_completers", 25))
        tsc = TsConfig(**ts)
        design = fig1_design(timeline, burn, tsc, de.get("direction", "minimize"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path=path, key="design/ts") from None

    built = []
    for name, section in policies:
        opts = dict(cp[section].items())
        kind = opts.pop("kind", None)
        if kind not in _POLICY_KEYS:
            raise fail(f"kind must be one of {sorted(_POLICY_KEYS)}", section, "kind")
        for key in opts:
            if key not in _POLICY_KEYS[kind]:
                raise fail(f"unknown key for kind={kind}; allowed: {sorted(_POLICY_KEYS[kind])}",
                           section, key)
        try:
            if kind == "sr":
                mode = opts.get("mode", UPFRONT)
                if mode not in (UPFRONT, SEQUENTIAL):
                    raise ValueError(f"mode must be {UPFRONT} or {SEQUENTIAL}")
                pol = SR(mode)
            elif kind == "upfront_ts":
                pol = UpfrontTS(opts.get("estimator", "WAIPW"), float(opts.get("c", 1.0)))
            else:
                pol = SequentialTS(float(opts.get("c", 1.0)),
                                   opts.get("belief_mode", tsc.sequential_belief_mode))
        except ValueError as exc:
            raise fail(str(exc), section) from None
        built.append((name, pol))

    return SimConfig(scenario=scenario, design=design, policies=tuple(built),
                     n_reps=st.get("n_reps", 2000), master_seed=st.get("master_seed", 20240101),
                     threads=st.get("threads", 1),
                     output_dir=Path(st.get("output_dir", "results")),
                     oracle_n_mc=st.get("oracle_n_mc", 10_000_000))


def load_config(path) -> SimConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config ({exc.strerror})", path=path) from None
    return parse_config(text, path)


def resolve_threads(config: SimConfig, override: int | None = None) -> int:
    """Command-line value, else the environment variable, else the config file."""
    if override is not None:
        return int(override)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return config.threads


# --------------------------------------------------------------------------
# oracle
# --------------------------------------------------------------------------

def oracle_for(config: SimConfig, n_mc: int | None = None, seed: int | None = None
               ) -> OracleResult:
    seq = np.random.SeedSequence(entropy=config.master_seed if seed is None else seed,
                                 spawn_key=(ORACLE_SPAWN_KEY,))
    rng = np.random.Generator(np.random.Philox(seq))
    return oracle_true_values(config.scenario, config.design, n_mc or config.oracle_n_mc, rng)


def oracle_table(oracle: OracleResult) -> pd.DataFrame:
    """Oracle values beside the published reference, with contrasts against the optimum."""
    ref = np.asarray(REFERENCE_VALUES, float)
    opt = oracle.optimal
    contrast = oracle.theta - oracle.theta[opt]
    ref_contrast = ref - ref[opt]
    return pd.DataFrame({"regime_label": oracle.labels, "theta_hat": oracle.theta,
                         "mc_se": oracle.mc_se, "n_mc": oracle.n_mc, "reference_theta": ref,
                         "oracle_contrast": contrast, "reference_contrast": ref_contrast,
                         "contrast_diff": contrast - ref_contrast})


# --------------------------------------------------------------------------
# Monte Carlo driver
# --------------------------------------------------------------------------

def _replication_row(config: SimConfig, policy_index: int, rep: int, truth: np.ndarray,
                     extra=None) -> dict:
    name, policy = config.policies[policy_index]
    row = {"policy": name, "policy_index": policy_index, "rep": rep, "failed": False,
           "error": ""}
    try:
        streams = TrialStreams(config.master_seed, policy_index, rep)
        record = run_trial(config.design, config.scenario, policy, streams)
        opt = int(np.argmin(truth) if config.design.direction == "minimize" else np.argmax(truth))
        row.update(record.metrics(opt))
        row["t_star"] = float(record.t_star) if record.t_star is not None else math.nan
        row["estimator_fallbacks"] = record.fallbacks
        row["weight_fallbacks"] = record.weight_state.fallbacks if record.weight_state else 0
        res = post_trial_inference(record, truth)
        for est, r in res.by_estimator.items():
            row[f"{est}_identified"] = r.identified_optimal
            for j, lab in enumerate(res.labels):
                for stat in ("theta_hat", "se", "ci_lo", "ci_hi", "lb", "ub", "z"):
                    row[f"{est}_{stat}_{lab}"] = float(getattr(r, stat)[j])
        if extra is not None:
            row.update(extra(record, truth))
    except Exception as exc:  # one bad replication must not kill the study
        log.warning("policy %s rep %d failed: %r", name, rep, exc)
        row.update(failed=True, error=repr(exc))
    return row


_WORKER: dict = {}


def _init_worker(config, truth, extra):
    _WORKER.update(config=config, truth=truth, extra=extra)


def _worker_row(job):
    return _replication_row(_WORKER["config"], job[0], job[1], _WORKER["truth"],
                            _WORKER["extra"])


def run_monte_carlo(config: SimConfig, truth=None, threads: int | None = None,
                    policies: list[str] | None = None, extra=None) -> pd.DataFrame:
    """Replication table with one row per (policy, replication), sorted by both.

    Replication r of policy i draws from streams keyed (master_seed, i, r),
    so the table does not depend on ``threads``.  ``extra(record, truth)``
    may return additional columns; it must be picklable when threads > 1.
    """
    if truth is None:
        truth = oracle_for(config).theta
    truth = np.asarray(truth, float)
    threads = resolve_threads(config, threads)
    wanted = range(len(config.policies)) if policies is None else \
        [i for i, (n, _) in enumerate(config.policies) if n in policies]
    jobs = [(i, r) for i in wanted for r in range(config.n_reps)]
    if threads <= 1 or len(jobs) < 2:
        rows = [_replication_row(config, i, r, truth, extra) for i, r in jobs]
    else:
        chunk = max(1, len(jobs) // (threads * 8))
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker,
                                 initargs=(config, truth, extra)) as pool:
            rows = list(pool.map(_worker_row, jobs, chunksize=chunk))
    table = pd.DataFrame(rows).sort_values(["policy_index", "rep"], kind="stable")
    table = table.reset_index(drop=True)
    failed = table.groupby("policy", sort=False)["failed"].mean()
    bad = failed[failed > FAILURE_LIMIT]
    if not bad.empty:
        raise StudyAborted(f"replication failure rate above {FAILURE_LIMIT:.0%}: "
                           + ", ".join(f"{k}={v:.3f}" for k, v in bad.items()), table)
    return table


# --------------------------------------------------------------------------
# aggregation and reports
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    policy: str
    metric: str
    estimator: str
    value: float
    mc_se: float


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def add(self, policy, metric, value, mc_se=math.nan, estimator=""):
        self.rows.append(ReportRow(policy, metric, estimator, float(value), float(mc_se)))

    def get(self, policy: str, metric: str, estimator: str = "") -> ReportRow:
        for r in self.rows:
            if (r.policy, r.metric, r.estimator) == (policy, metric, estimator):
                return r
        raise KeyError((policy, metric, estimator))

    def value(self, policy: str, metric: str, estimator: str = "") -> float:
        return self.get(policy, metric, estimator).value

    @property
    def policies(self) -> list[str]:
        return list(dict.fromkeys(r.policy for r in self.rows))

    def to_tree(self) -> dict:
        tree: dict = {}
        for r in self.rows:
            tree.setdefault(r.policy, {}).setdefault(r.metric, {})[r.estimator] = {
                "value": _json_float(r.value), "mc_se": _json_float(r.mc_se)}
        return tree

    @classmethod
    def from_tree(cls, tree: dict) -> "MetricsReport":
        rep = cls()
        for pol, metrics in tree.items():
            for metric, by_est in metrics.items():
                for est, cell in by_est.items():
                    rep.add(pol, metric, _unjson(cell["value"]), _unjson(cell["mc_se"]), est)
        return rep


def format_float(x: float) -> str:
    """Six significant digits, trailing zeros kept, locale independent."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return "%#.6g" % x


def _json_float(x: float):
    return format_float(x) if not math.isfinite(x) else float(format_float(x))


def _unjson(v) -> float:
    return float(v)


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return math.nan, math.nan
    sd = x.std(ddof=1) if x.size > 1 else 0.0
    return float(x.mean()), float(sd / math.sqrt(x.size))


def aggregate(table: pd.DataFrame, truth, labels=None, direction: str = "minimize",
              oracle: OracleResult | None = None) -> MetricsReport:
    """Table-style summary per policy; mc_se is sd / sqrt(n_reps) of per-replication values."""
    truth = np.asarray(truth, float)
    m = truth.size
    labels = tuple(labels) if labels is not None else tuple(f"d{j + 1}" for j in range(m))
    opt = int(np.argmin(truth) if direction == "minimize" else np.argmax(truth))
    lab_opt = labels[opt]
    report = MetricsReport()
    if oracle is not None:
        ot = oracle_table(oracle)
        for _, r in ot.iterrows():
            lab = r.regime_label
            report.add("oracle", f"theta_{lab}", r.theta_hat, r.mc_se)
            report.add("oracle", f"reference_theta_{lab}", r.reference_theta)
            report.add("oracle", f"contrast_diff_{lab}", r.contrast_diff)
        report.add("oracle", "sr_mixture_mean", float(np.mean(oracle.theta)))
    for policy, grp in table.groupby("policy", sort=False):
        ok = grp[~grp["failed"].astype(bool)]
        report.add(policy, "n_reps", len(grp), 0.0)
        report.add(policy, "failed_reps", int(grp["failed"].sum()), 0.0)
        if ok.empty:
            continue
        for metric in ("mean_y", "prop_a1_opt", "prop_regime_opt", "estimator_fallbacks",
                       "weight_fallbacks"):
            report.add(policy, metric, *_mean_se(ok[metric]))
        tstar = ok["t_star"].to_numpy(float)
        report.add(policy, "burn_in_never", *_mean_se(~np.isfinite(tstar)))
        report.add(policy, "burn_in_week_mean", *_mean_se(tstar))
        if np.isfinite(tstar).any():
            report.add(policy, "burn_in_week_min", np.nanmin(tstar))
            report.add(policy, "burn_in_week_max", np.nanmax(tstar))
        for est in POST_TRIAL_ESTIMATORS:
            if f"{est}_identified" not in ok:
                continue
            report.add(policy, "regime_correct", *_mean_se(ok[f"{est}_identified"] == opt), est)
            for j, lab in enumerate(labels):
                err2 = (ok[f"{est}_theta_hat_{lab}"] - truth[j]) ** 2 * 100.0
                report.add(policy, f"mse_x100_{lab}", *_mean_se(err2), est)
            t = truth[opt]
            lo, hi = ok[f"{est}_ci_lo_{lab_opt}"], ok[f"{est}_ci_hi_{lab_opt}"]
            report.add(policy, "coverage_ci", *_mean_se((lo <= t) & (t <= hi)), est)
            report.add(policy, "coverage_lb", *_mean_se(ok[f"{est}_lb_{lab_opt}"] <= t), est)
            report.add(policy, "coverage_ub", *_mean_se(ok[f"{est}_ub_{lab_opt}"] >= t), est)
            z = ok[f"{est}_z_{lab_opt}"].to_numpy(float)
            z = z[np.isfinite(z)]
            report.add(policy, "z_mean", *_mean_se(z), est)
            if z.size > 2:
                report.add(policy, "z_sd", z.std(ddof=1), estimator=est)
                report.add(policy, "z_skew", stats.skew(z), estimator=est)
    return report


REPORT_COLUMNS = ("policy", "metric", "estimator_or_blank", "value", "mc_se")


def write_report(report: MetricsReport, fmt: str, path) -> None:
    path = Path(path)
    try:
        if fmt == "csv":
            with path.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(REPORT_COLUMNS)
                for r in report.rows:
                    w.writerow([r.policy, r.metric, r.estimator, format_float(r.value),
                                format_float(r.mc_se)])
        elif fmt == "json":
            path.write_text(json.dumps(report.to_tree(), indent=2) + "\n", encoding="utf-8")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write report: {exc.strerror}", str(path)) from None


def read_report_json(path) -> MetricsReport:
    return MetricsReport.from_tree(json.loads(Path(path).read_text(encoding="utf-8")))


def with_overrides(config: SimConfig, n_reps=None, seed=None, threads=None, out=None) -> SimConfig:
    kw = {}
    if n_reps is not None:
        kw["n_reps"] = int(n_reps)
    if seed is not None:
        kw["master_seed"] = int(seed)
    if threads is not None:
        kw["threads"] = int(threads)
    if out is not None:
        kw["output_dir"] = Path(out)
    return replace(config, **kw) if kw else config
