"""Experiment runner turning JSON configs into reports and trace files.

Subcommands cover each pipeline stage (model-based solve, ensemble
collection, feedback/feedforward learning, shadow learning, tracking
demos) plus the two bundled benchmark reproductions. Reports are
canonical JSON with sorted keys and 17-significant-digit numbers, so
identical configs and seeds produce byte-identical payloads; wall-clock
fields live outside the payload.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_continuous_are

from .benchmarks import (coupled_oscillators, damped_oscillator,
                         gather_moments, reference_at_offset)
from .bpi import feedforward_gains, solve_tracking
from .errors import ConfigError, MaxIterExceeded, RankDeficient, SlqtError
from .learner import (LearnedSolution, ShadowConfig, learn_feedback,
                      learn_feedforward, learn_shadow, shadow_regressors)
from .model import (BpiHyperParams, CostWeights, ReferenceGenerator,
                    StochasticSystem, TrackingProblem, spectral_abscissa)
from .regressors import feedback_required_rank, rank_report
from .sim import (SimConfig, estimate_average_cost, probing_signal,
                  run_ensemble, save_dataset, simulate_tracking)
from .solvers import sare_residual
from .symquad import h_form_rows

__all__ = ["EXIT_CODES", "ExperimentConfig", "RunReport", "canonical_json",
           "emit_report", "exit_code_for", "load_config", "load_report",
           "main", "parse_experiment_config", "reproduce_example",
           "run_experiment"]

REPORT_SCHEMA = "slqt-report/1"

EXIT_CODES = {"ok": 0, "config": 2, "rank": 3, "numerical": 4, "contract": 5}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, RankDeficient):
        return EXIT_CODES["rank"]
    if isinstance(exc, MaxIterExceeded):
        return EXIT_CODES["contract"]
    if isinstance(exc, (ConfigError, json.JSONDecodeError)):
        return EXIT_CODES["config"]
    if isinstance(exc, SlqtError):
        return EXIT_CODES["numerical"]
    return 1


# ---------------------------------------------------------------------------
# Canonical JSON


def _pyify(obj):
    if isinstance(obj, np.ndarray):
        return _pyify(obj.tolist())
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, dict):
        return {k: _pyify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_pyify(v) for v in obj]
    return obj


def _fmt_float(v: float) -> str:
    if not np.isfinite(v):
        raise ConfigError(f"report values must be finite, got {v!r}")
    # 17 significant digits roundtrip binary64 exactly; -0.0 normalizes
    return "0" if v == 0.0 else format(v, ".17g")


def _encode(obj, out: list) -> None:
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=True))
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(_fmt_float(obj))
    elif isinstance(obj, dict):
        out.append("{")
        for j, k in enumerate(sorted(obj)):
            if not isinstance(k, str):
                raise ConfigError("report keys must be strings")
            if j:
                out.append(",")
            out.append(json.dumps(k, ensure_ascii=True))
            out.append(":")
            _encode(obj[k], out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for j, v in enumerate(obj):
            if j:
                out.append(",")
            _encode(v, out)
        out.append("]")
    else:
        raise ConfigError(f"cannot encode {type(obj).__name__} in a report")


def canonical_json(obj) -> str:
    out: list = []
    _encode(_pyify(obj), out)
    return "".join(out)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class RunReport:
    """Everything one experiment produced, ready for serialization.

    ``payload`` holds only numbers reproducible from (config, seeds);
    timestamps and stage timings sit beside it so payload bytes compare
    equal across reruns.
    """

    payload: dict = field(default_factory=dict)
    timing_s: dict = field(default_factory=dict)
    created: str = ""
    failed: bool = False
    error: dict | None = None

    def document(self) -> dict:
        doc = {"schema": REPORT_SCHEMA, "created": self.created,
               "failed": self.failed, "timing_s": self.timing_s,
               "payload": self.payload}
        if self.error is not None:
            doc["error"] = self.error
        return doc

    def payload_text(self) -> str:
        return canonical_json(self.payload)


def emit_report(report: RunReport, out_dir: str, formats=("json", "csv")) -> list:
    """Write report.json and the CSV traces derivable from the payload."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "json" in formats:
        path = os.path.join(out_dir, "report.json")
        with open(path, "w", encoding="utf-8") as f:
            f.write(canonical_json(report.document()))
            f.write("\n")
        written.append(path)
    if "csv" in formats:
        for key in ("model_based", "data_driven", "shadow"):
            block = report.payload.get(key)
            if isinstance(block, dict) and block.get("trace"):
                path = os.path.join(out_dir, f"{key}_trace.csv")
                _write_trace_csv(path, block["trace"])
                written.append(path)
        cases = report.payload.get("feedforward_cases")
        if cases:
            path = os.path.join(out_dir, "ff_cases.csv")
            _write_ff_csv(path, cases)
            written.append(path)
    return written


def load_report(path: str) -> RunReport:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("schema") != REPORT_SCHEMA:
        raise ConfigError(f"unsupported report schema {doc.get('schema')!r}")
    return RunReport(payload=doc.get("payload", {}),
                     timing_s=doc.get("timing_s", {}),
                     created=doc.get("created", ""),
                     failed=bool(doc.get("failed", False)),
                     error=doc.get("error"))


def _utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _finalize(report: RunReport, out_dir: str | None, formats) -> RunReport:
    report.created = _utc_now()
    if out_dir:
        emit_report(report, out_dir, formats)
    return report


def _guarded(report: RunReport, out_dir: str | None, formats, work) -> RunReport:
    """Run ``work``; on pipeline failure flush what exists, marked failed."""
    try:
        work()
    except SlqtError as e:
        report.failed = True
        report.error = {"type": type(e).__name__, "message": str(e)}
        _finalize(report, out_dir, formats)
        raise
    return _finalize(report, out_dir, formats)


@contextmanager
def _timed(report: RunReport, stage: str):
    t0 = time.perf_counter()
    try:
        yield
    finally:
        report.timing_s[stage] = time.perf_counter() - t0


# ---------------------------------------------------------------------------
# CSV writers


def _csv_cell(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return _fmt_float(float(v))


def _write_csv(path: str, header: list, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_csv_cell(v) for v in row) + "\n")


def _write_trace_csv(path: str, trace_rows: list) -> None:
    if not trace_rows:
        _write_csv(path, ["iteration", "phase", "alpha"], [])
        return
    K0 = np.asarray(trace_rows[0]["K"], dtype=float)
    n = np.asarray(trace_rows[0]["P"], dtype=float).shape[0]
    m = K0.shape[0]
    ri, ci = np.triu_indices(n)
    header = (["iteration", "phase", "alpha"]
              + [f"k_{a + 1}{b + 1}" for a in range(m) for b in range(n)]
              + [f"p_{a + 1}{b + 1}" for a, b in zip(ri, ci)])
    body = []
    for r in trace_rows:
        K = np.asarray(r["K"], dtype=float)
        P = np.asarray(r["P"], dtype=float)
        body.append([r["iteration"], r["phase"], r["alpha"],
                     *K.ravel(), *P[ri, ci]])
    _write_csv(path, header, body)


def _write_ff_csv(path: str, case_rows: list) -> None:
    width = np.asarray(case_rows[0]["F"], dtype=float).size
    header = ["case"] + [f"f_{j + 1}" for j in range(width)]
    body = [[row["case"], *np.asarray(row["F"], dtype=float).ravel()]
            for row in case_rows]
    _write_csv(path, header, body)


def _write_tracking_csv(path: str, run) -> None:
    q = run.y_mean.shape[1]
    m = run.u_mean.shape[1]
    header = (["t"] + [f"y_{j + 1}" for j in range(q)]
              + [f"y_d_{j + 1}" for j in range(q)]
              + [f"u_{j + 1}" for j in range(m)])
    body = np.hstack([run.t[:, None], run.y_mean, run.y_d, run.u_mean])
    _write_csv(path, header, body)


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class ExperimentConfig:
    """Parsed and dimension-checked experiment description."""

    mode: str
    plant: StochasticSystem
    reference: ReferenceGenerator
    cost: CostWeights
    hyper: BpiHyperParams
    sim: SimConfig
    probing: object | None
    segments: tuple
    h_d_cases: tuple
    data_source: dict
    shadow: ShadowConfig | None
    tracking: dict | None
    cost_comparison: dict | None
    output: str | None
    raw: dict


def _arr(block: dict, key: str) -> np.ndarray:
    try:
        return np.asarray(block[key], dtype=float)
    except KeyError as e:
        raise ConfigError(f"missing config key {key!r}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config key {key!r} is not numeric") from e


def _probing_from(block: dict):
    try:
        return probing_signal(float(block["amplitude"]), int(block["count"]),
                              block["freq_range"], int(block["seed"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad probing block: {e}") from e


def parse_experiment_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    mode = raw.get("mode", "model_based")
    if mode not in ("model_based", "data_driven", "shadow"):
        raise ConfigError(f"unknown mode {mode!r}")
    pb = raw.get("plant")
    if not isinstance(pb, dict):
        raise ConfigError("config needs a plant block")
    plant = StochasticSystem(A=_arr(pb, "A"), B=_arr(pb, "B"), C=_arr(pb, "C"),
                             D=_arr(pb, "D"), H=_arr(pb, "H"))
    rb = raw.get("reference")
    if not isinstance(rb, dict):
        raise ConfigError("config needs a reference block")
    reference = ReferenceGenerator(_arr(rb, "A_d"), _arr(rb, "H_d"),
                                   _arr(rb, "x_d0"))
    cb = raw.get("cost")
    if not isinstance(cb, dict):
        raise ConfigError("config needs a cost block")
    cost = CostWeights(Q=np.atleast_2d(_arr(cb, "Q")),
                       R=np.atleast_2d(_arr(cb, "R")))
    hb = raw.get("hyper", {})
    theta = hb.get("theta")
    hyper = BpiHyperParams(
        gamma=float(hb.get("gamma", 1.0)), alpha0=float(hb.get("alpha0", 0.1)),
        eta=float(hb.get("eta", 0.95)),
        theta=None if theta is None else np.asarray(theta, dtype=float),
        epsilon=float(hb.get("epsilon", 1e-5)),
        max_iter=int(hb.get("max_iter", 200)),
        stop_rule=hb.get("stop_rule", "gain"))
    # construct-and-discard: raises ConfigError on any dimension mismatch
    TrackingProblem(system=plant, reference=reference, cost=cost, hyper=hyper)

    sb = raw.get("sim", {})
    sim = SimConfig(h=float(sb.get("h", 1e-4)),
                    sample_period=float(sb.get("T_s", 1e-3)),
                    window=float(sb.get("T", 0.1)),
                    t1=float(sb.get("t1", 0.0)), l=int(sb.get("l", 5001)),
                    n_paths=int(sb.get("n_paths", 2000)),
                    base_seed=int(sb.get("base_seed", 0)))
    probing = _probing_from(raw["probing"]) if raw.get("probing") else None

    segs = raw.get("segments")
    if segs is None:
        segments = ((np.zeros(plant.n), 0.0, sim.base_seed),)
    else:
        segments = tuple(
            (np.asarray(s["x0"], dtype=float).ravel(),
             float(s.get("t_offset", 0.0)),
             int(s.get("base_seed", sim.base_seed))) for s in segs)
        for x0, _, _ in segments:
            if x0.size != plant.n:
                raise ConfigError(
                    f"segment x0 has {x0.size} entries, plant has {plant.n} states")

    case_rows = rb.get("cases")
    if case_rows is None:
        h_d_cases = (reference.H_d,)
    else:
        h_d_cases = tuple(np.atleast_2d(np.asarray(r, dtype=float))
                          for r in case_rows)
        for r in h_d_cases:
            if r.shape[1] != reference.n_d:
                raise ConfigError(
                    f"case output map has {r.shape[1]} columns, "
                    f"reference has {reference.n_d} states")

    dsb = raw.get("data_source", {})
    kind = dsb.get("kind", "ensemble")
    if kind not in ("ensemble", "exact"):
        raise ConfigError(f"unknown data_source kind {kind!r}")
    data_source = {"kind": kind, "refine": int(dsb.get("refine", 1))}

    shb = raw.get("shadow")
    shadow = None
    if shb is not None:
        if not shb.get("probing"):
            raise ConfigError("shadow block needs a probing signal")
        shadow = ShadowConfig(A_a=_arr(shb, "A_a"),
                              u_a=_probing_from(shb["probing"]),
                              x_a0=_arr(shb, "x_a0"), F_a=_arr(shb, "F_a"),
                              y_a0=_arr(shb, "y_a0"),
                              h=float(shb.get("h", 5e-6)))
    if mode == "shadow":
        if shadow is None:
            raise ConfigError("mode 'shadow' needs a shadow block")
        if np.abs(plant.D).max(initial=0.0) != 0.0:
            raise ConfigError("the shadow route requires D = 0")
        if probing is not None:
            raise ConfigError("the shadow route forbids plant probing input")

    tb = raw.get("tracking")
    tracking = None
    if tb is not None:
        try:
            schedule = [(int(c), float(d)) for c, d in tb["schedule"]]
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad tracking schedule: {e}") from e
        for c, _ in schedule:
            if not 1 <= c <= len(h_d_cases):
                raise ConfigError(f"tracking schedule case {c} out of range")
        tracking = {"schedule": schedule, "h": float(tb.get("h", 1e-3)),
                    "n_paths": int(tb.get("n_paths", 200)),
                    "base_seed": int(tb.get("base_seed", 97))}

    ccb = raw.get("cost_comparison")
    if ccb is not None and not isinstance(ccb, dict):
        raise ConfigError("cost_comparison must be an object")

    return ExperimentConfig(
        mode=mode, plant=plant, reference=reference, cost=cost, hyper=hyper,
        sim=sim, probing=probing, segments=segments, h_d_cases=h_d_cases,
        data_source=data_source, shadow=shadow, tracking=tracking,
        cost_comparison=ccb, output=raw.get("output"), raw=raw)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path!r}: {e}") from e
    return parse_experiment_config(raw)


# ---------------------------------------------------------------------------
# Payload builders


def _matrix(M) -> list:
    return np.asarray(M, dtype=float).tolist()


def _rank_payload(rep) -> dict:
    return {"rank": int(rep.rank), "required_rank": int(rep.required_rank),
            "margin": float(rep.margin), "tol": float(rep.tol),
            "singular_values": [float(s) for s in rep.singular_values]}


def _cert_payload(cert) -> dict | None:
    if cert is None:
        return None
    return {"stabilizing": bool(cert.stabilizing),
            "abscissa": float(cert.abscissa), "alpha": float(cert.alpha),
            "margin": float(cert.margin)}


def _model_trace_rows(history: dict) -> list:
    rows = []
    for st in list(history["phase1"]) + list(history["phase2"]):
        rows.append({"iteration": int(st.index), "phase": int(st.phase),
                     "alpha": float(st.alpha), "K": _matrix(st.K),
                     "P": _matrix(st.P)})
    return rows


def _payload_model(plant, cost, hyper, reference, cases):
    """Model-based solve plus per-case feedforward gains."""
    problem = TrackingProblem(system=plant, reference=reference, cost=cost,
                              hyper=hyper)
    sol = solve_tracking(problem)
    hist = sol.history
    trace = _model_trace_rows(hist)
    ff_by_case = {}
    ff_payload = []
    for k, row in enumerate(cases, start=1):
        ref_k = reference.with_output_map(row)
        Pi, F = feedforward_gains(plant, cost, ref_k, sol.P, sol.K)
        ff_by_case[k] = F
        ff_payload.append({"case": k, "H_d": _matrix(row), "F": _matrix(F),
                           "Pi": _matrix(Pi)})
    payload = {
        "K_star": _matrix(sol.K), "P_star": _matrix(sol.P),
        "Lambda_star": _matrix(sol.Lambda), "Pi_star": _matrix(sol.Pi),
        "F_star": _matrix(sol.F),
        "sare_residual": float(sare_residual(plant, cost, sol.P)),
        "closed_loop_abscissa": float(spectral_abscissa(plant, sol.K)),
        "zero_gain_threshold": float(hist["zero_gain_threshold"]),
        "crossing_iteration": int(hist["crossing_iteration"]),
        "iterations": len(trace),
        "alpha_trace": [float(a) for a in hist["alpha_trace"]],
        "certification": "validated",
        "trace": trace,
    }
    return sol, ff_by_case, ff_payload, payload


def _payload_learned(learned: LearnedSolution) -> dict:
    trace = []
    for i, (P, K, a) in enumerate(zip(learned.P_trace, learned.K_trace,
                                      learned.alpha_trace), start=1):
        phase = 1 if i <= learned.crossing_iteration else 2
        trace.append({"iteration": i, "phase": phase, "alpha": float(a),
                      "K": _matrix(K), "P": _matrix(P)})
    payload = {
        "K_hat": _matrix(learned.K_star), "P_hat": _matrix(learned.P_star),
        "Lambda_hat": _matrix(learned.Lambda_star),
        "alpha_trace": [float(a) for a in learned.alpha_trace],
        "crossing_iteration": int(learned.crossing_iteration),
        "total_iterations": int(learned.total_iterations),
        "residuals": [float(r) for r in learned.residuals],
        "certification": learned.certification,
        "rank": {k: _rank_payload(v) for k, v in learned.rank_reports.items()},
        "trace": trace,
    }
    if learned.certificates is not None:
        payload["certificates"] = [_cert_payload(c) for c in learned.certificates]
    if learned.F_star is not None:
        payload["F_hat"] = _matrix(learned.F_star)
        payload["Pi_hat"] = _matrix(learned.Pi_star)
        payload["ff_residual"] = float(learned.ff_residual)
    return payload


def _vs_model(learned: LearnedSolution, sol) -> dict:
    dK = np.asarray(learned.K_star) - np.asarray(sol.K)
    dP = np.asarray(learned.P_star) - np.asarray(sol.P)
    return {"K_star_model": _matrix(sol.K),
            "K_max_abs_err": float(np.abs(dK).max()),
            "P_max_abs_err": float(np.abs(dP).max()),
            "K_rel_err_2norm": float(np.linalg.norm(dK) / np.linalg.norm(sol.K))}


def _ff_case_fits(moments, learned, cost, hyper, cases, extra_rows=None,
                  extra_rank_matrix=None):
    fits = {}
    payload = []
    for k, row in enumerate(cases, start=1):
        fit = learn_feedforward(moments, learned.K_star, learned.Lambda_star,
                                cost, hyper, h_d=row, extra_rows=extra_rows,
                                extra_rank_matrix=extra_rank_matrix)
        fits[k] = fit.F
        payload.append({"case": k, "H_d": _matrix(row), "F": _matrix(fit.F),
                        "Pi": _matrix(fit.Pi),
                        "residual": float(fit.residual),
                        "rank": _rank_payload(fit.rank)})
    return fits, payload


def _run_tracking(plant, reference, cases, K, ff_by_case, schedule, h,
                  n_paths, base_seed, out_dir, filename) -> dict:
    sched = [(cases[c - 1], ff_by_case[c], float(d)) for c, d in schedule]
    run = simulate_tracking(plant, reference.A_d, reference.x_d0, sched, K,
                            np.zeros(plant.n), h, n_paths, base_seed)
    wrote = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_tracking_csv(os.path.join(out_dir, filename), run)
        wrote = filename
    bounds = [0.0, *run.switch_times, float(run.t[-1])]
    segs = []
    for j, (case, _) in enumerate(schedule):
        a, b = bounds[j], bounds[j + 1]
        span = (run.t >= a) & (run.t <= b)
        err = run.y_mean[span] - run.y_d[span]
        tail = (run.t >= b - 0.2 * (b - a)) & (run.t <= b)
        tail_err = run.y_mean[tail] - run.y_d[tail]
        segs.append({"case": case, "start": float(a), "end": float(b),
                     "rms_error": float(np.sqrt(np.mean(err ** 2))),
                     "settled_rms_error": float(np.sqrt(np.mean(tail_err ** 2)))})
    return {"file": wrote, "h": float(h), "n_paths": int(n_paths),
            "base_seed": int(base_seed), "segments": segs,
            "max_settled_rms": max(s["settled_rms_error"] for s in segs)}


def _cost_comparison(plant, cost, reference, cases, sol, options: dict) -> dict:
    """Average tracking cost of the noise-aware design against a design
    that pretended the noise channels were absent."""
    case = int(options.get("case", 8))
    horizon = float(options.get("horizon", 50.0))
    n_paths = int(options.get("n_paths", 2000))
    h = float(options.get("h", 1e-3))
    seed = int(options.get("seed", 314159))
    if not 1 <= case <= len(cases):
        raise ConfigError(f"cost_comparison case {case} out of range")
    ref_k = reference.with_output_map(cases[case - 1])
    _, F_opt = feedforward_gains(plant, cost, ref_k, sol.P, sol.K)
    naive = StochasticSystem(plant.A, plant.B, np.zeros_like(plant.A),
                             np.zeros_like(plant.D), plant.H)
    P_det = solve_continuous_are(plant.A, plant.B,
                                 plant.H.T @ cost.Q @ plant.H, cost.R)
    K_det = np.linalg.solve(cost.R, plant.B.T @ P_det)
    _, F_det = feedforward_gains(naive, cost, ref_k, P_det, K_det)
    c_opt = estimate_average_cost(plant, ref_k, (sol.K, F_opt), cost, horizon,
                                  n_paths, seed, h=h)
    c_det = estimate_average_cost(plant, ref_k, (K_det, F_det), cost, horizon,
                                  n_paths, seed + 1, h=h)
    sep = (c_det.mean - c_opt.mean) / float(np.hypot(c_opt.se, c_det.se))
    return {"case": case, "horizon": horizon, "n_paths": n_paths, "h": h,
            "seed": seed,
            "noise_aware": {"K": _matrix(sol.K), "F": _matrix(F_opt),
                            "mean": float(c_opt.mean), "se": float(c_opt.se)},
            "deterministic_design": {"K": _matrix(K_det), "F": _matrix(F_det),
                                     "mean": float(c_det.mean),
                                     "se": float(c_det.se)},
            "separation_se": float(sep)}


# ---------------------------------------------------------------------------
# Pipelines


def run_experiment(config: ExperimentConfig, out_dir: str | None = None,
                   validate: bool = False, n_paths: int | None = None,
                   formats=("json", "csv")) -> RunReport:
    """Run the configured mode end to end, writing report and traces."""
    report = RunReport()
    out_dir = out_dir or config.output
    report.payload["config"] = _pyify(config.raw)
    report.payload["mode"] = config.mode
    if n_paths is not None:
        report.payload["n_paths_override"] = int(n_paths)

    def work():
        sol = ff_model = None
        learned = fits = None
        if config.mode == "model_based" or validate:
            with _timed(report, "model_based"):
                sol, ff_model, ffmp, mb = _payload_model(
                    config.plant, config.cost, config.hyper, config.reference,
                    config.h_d_cases)
            report.payload["model_based"] = mb
            if config.mode == "model_based":
                report.payload["feedforward_cases"] = ffmp
        if config.mode == "data_driven":
            with _timed(report, "collect"):
                moments = gather_moments(config, mode=config.data_source["kind"],
                                         n_paths=n_paths,
                                         refine=config.data_source["refine"])
            with _timed(report, "learn_feedback"):
                learned = learn_feedback(
                    moments, config.cost, config.hyper,
                    validate_with=config.plant if validate else None)
            dd = _payload_learned(learned)
            if sol is not None:
                dd["vs_model"] = _vs_model(learned, sol)
            report.payload["data_driven"] = dd
            with _timed(report, "learn_feedforward"):
                fits, ffp = _ff_case_fits(moments, learned, config.cost,
                                          config.hyper, config.h_d_cases)
            report.payload["feedforward_cases"] = ffp
        elif config.mode == "shadow":
            with _timed(report, "collect"):
                moments = gather_moments(config, mode=config.data_source["kind"],
                                         n_paths=n_paths,
                                         refine=config.data_source["refine"])
            with _timed(report, "shadow_rows"):
                omegas = shadow_regressors(config.shadow, config.plant.B,
                                           config.cost.R, moments.t_global,
                                           moments.window)
            with _timed(report, "learn_shadow"):
                learned = learn_shadow(
                    moments, config.shadow, config.plant.B, config.cost,
                    config.hyper,
                    validate_with=config.plant if validate else None,
                    omegas=omegas)
            sh = _payload_learned(learned)
            if sol is not None:
                sh["vs_model"] = _vs_model(learned, sol)
            sh.update(_shadow_flags(moments))
            report.payload["shadow"] = sh
            n, m, n_d = moments.n, moments.m, moments.n_d
            aug = np.hstack([np.zeros((len(moments), n * n_d)),
                             omegas[1][:, n * n_d:]])
            with _timed(report, "learn_feedforward"):
                fits, ffp = _ff_case_fits(moments, learned, config.cost,
                                          config.hyper, config.h_d_cases,
                                          extra_rows=omegas[1],
                                          extra_rank_matrix=aug)
            report.payload["feedforward_cases"] = ffp
        if config.tracking is not None:
            if config.mode == "model_based":
                pair = (sol.K, ff_model)
            else:
                pair = (learned.K_star, fits)
            tr = config.tracking
            with _timed(report, "tracking"):
                report.payload["tracking"] = _run_tracking(
                    config.plant, config.reference, config.h_d_cases, pair[0],
                    pair[1], tr["schedule"], tr["h"], tr["n_paths"],
                    tr["base_seed"], out_dir, "tracking.csv")
        if config.cost_comparison is not None:
            if sol is None:
                raise ConfigError(
                    "cost_comparison needs the model-based solution; use mode "
                    "model_based or pass validate")
            with _timed(report, "cost_comparison"):
                report.payload["cost_comparison"] = _cost_comparison(
                    config.plant, config.cost, config.reference,
                    config.h_d_cases, sol, config.cost_comparison)

    return _guarded(report, out_dir, formats, work)


def _shadow_flags(moments) -> dict:
    peak = max(float(np.abs(moments.W).max(initial=0.0)),
               float(np.abs(moments.V).max(initial=0.0)))
    n, m = moments.n, moments.m
    unaug = rank_report(
        np.hstack([h_form_rows(moments.S), np.zeros((len(moments), n * m))]),
        feedback_required_rank(n, m, with_lambda=False))
    return {"plant_input_zero": peak == 0.0, "max_abs_input_moment": peak,
            "unaugmented_rank": _rank_payload(unaug)}


def _shift_segment_seeds(segments, offset: int) -> tuple:
    return tuple((x0, t_off, seed + offset) for x0, t_off, seed in segments)


def reproduce_example(which: str, out_dir: str | None = None,
                      n_paths: int | None = None, validate: bool = True,
                      data_mode: str | None = None, refine: int | None = None,
                      tracking_paths: int = 200, cost_paths: int = 2000,
                      seed_offset: int = 0,
                      formats=("json", "csv")) -> RunReport:
    """Run one bundled benchmark end to end and return its report.

    Example one: model-based solve, Monte Carlo data-driven learning,
    all eight feedforward cases, both tracking scenarios, and the
    noise-aware versus noise-blind cost comparison. Example two: the
    shadow pipeline on exact moments with zero plant input, per-case
    feedforward, and the scenario-2 tracking demo.
    """
    if which not in ("one", "two"):
        raise ConfigError(f"unknown example {which!r}")
    report = RunReport()
    if which == "one":
        bundle = damped_oscillator()
        mode = data_mode or "ensemble"
    else:
        bundle = coupled_oscillators()
        mode = data_mode or "exact"
    refine = refine or 1
    if seed_offset:
        bundle = replace(bundle, segments=_shift_segment_seeds(bundle.segments,
                                                               seed_offset))
    cases = bundle.h_d_cases
    report.payload["example"] = which
    report.payload["config"] = {
        "bundle": bundle.name, "data_mode": mode, "refine": refine,
        "n_paths": n_paths if n_paths is not None else bundle.sim.n_paths,
        "tracking_paths": tracking_paths, "cost_paths": cost_paths,
        "seed_offset": seed_offset}

    def work():
        with _timed(report, "model_based"):
            sol, ff_model, ffmp, mb = _payload_model(
                bundle.plant, bundle.cost, bundle.hyper, bundle.reference, cases)
        mb["feedforward_cases"] = ffmp
        report.payload["model_based"] = mb
        with _timed(report, "collect"):
            moments = gather_moments(bundle, mode=mode, n_paths=n_paths,
                                     refine=refine)
        if which == "one":
            with _timed(report, "learn_feedback"):
                learned = learn_feedback(
                    moments, bundle.cost, bundle.hyper,
                    validate_with=bundle.plant if validate else None)
            dd = _payload_learned(learned)
            dd["vs_model"] = _vs_model(learned, sol)
            report.payload["data_driven"] = dd
            with _timed(report, "learn_feedforward"):
                fits, ffp = _ff_case_fits(moments, learned, bundle.cost,
                                          bundle.hyper, cases)
            report.payload["feedforward_cases"] = ffp
            with _timed(report, "tracking"):
                report.payload["tracking"] = {
                    name: _run_tracking(bundle.plant, bundle.reference, cases,
                                        sol.K, ff_model, schedule, 1e-3,
                                        tracking_paths, 97, out_dir,
                                        f"tracking_{name}.csv")
                    for name, schedule in sorted(bundle.scenarios.items())}
            with _timed(report, "cost_comparison"):
                report.payload["cost_comparison"] = _cost_comparison(
                    bundle.plant, bundle.cost, bundle.reference, cases, sol,
                    {"case": 8, "horizon": 50.0, "n_paths": cost_paths,
                     "h": 1e-3})
        else:
            with _timed(report, "shadow_rows"):
                omegas = shadow_regressors(bundle.shadow, bundle.plant.B,
                                           bundle.cost.R, moments.t_global,
                                           moments.window)
            with _timed(report, "learn_shadow"):
                learned = learn_shadow(
                    moments, bundle.shadow, bundle.plant.B, bundle.cost,
                    bundle.hyper,
                    validate_with=bundle.plant if validate else None,
                    omegas=omegas)
            sh = _payload_learned(learned)
            sh["vs_model"] = _vs_model(learned, sol)
            sh.update(_shadow_flags(moments))
            report.payload["shadow"] = sh
            n, n_d = moments.n, moments.n_d
            aug = np.hstack([np.zeros((len(moments), n * n_d)),
                             omegas[1][:, n * n_d:]])
            with _timed(report, "learn_feedforward"):
                fits, ffp = _ff_case_fits(moments, learned, bundle.cost,
                                          bundle.hyper, cases,
                                          extra_rows=omegas[1],
                                          extra_rank_matrix=aug)
            report.payload["feedforward_cases"] = ffp
            with _timed(report, "tracking"):
                report.payload["tracking"] = {
                    "scenario2": _run_tracking(
                        bundle.plant, bundle.reference, cases, learned.K_star,
                        fits, bundle.scenarios["scenario2"], 1e-3,
                        tracking_paths, 97, out_dir, "tracking_scenario2.csv")}

    return _guarded(report, out_dir, formats, work)


# ---------------------------------------------------------------------------
# Command handlers


def _prep(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    seed = getattr(args, "seed", None)
    if seed:
        cfg.segments = _shift_segment_seeds(cfg.segments, seed)
    return cfg


def _cmd_solve(args) -> int:
    cfg = _prep(args)
    cfg.mode = "model_based"
    report = run_experiment(cfg, out_dir=args.out, validate=True,
                            n_paths=args.paths)
    K = np.asarray(report.payload["model_based"]["K_star"])
    print(f"K* = {K.ravel().tolist()}")
    return 0


def _cmd_collect(args) -> int:
    cfg = _prep(args)
    out = args.out or cfg.output
    if not out:
        raise ConfigError("collect needs an output directory (--out)")
    report = RunReport()
    report.payload.update({"config": _pyify(cfg.raw), "mode": "collect"})
    entries = []

    def work():
        with _timed(report, "collect"):
            os.makedirs(out, exist_ok=True)
            for j, (x0, t_offset, seg_seed) in enumerate(cfg.segments, start=1):
                d = cfg.sim.to_dict()
                d["base_seed"] = int(seg_seed)
                if args.paths:
                    d["n_paths"] = int(args.paths)
                sub = SimConfig(**d)
                ref = reference_at_offset(cfg.reference, t_offset)
                ds = run_ensemble(cfg.plant, cfg.probing, x0, sub,
                                  discount=cfg.hyper.alpha_tilde, reference=ref)
                name = f"segment_{j:02d}"
                save_dataset(ds, os.path.join(out, name))
                entries.append({"segment": j, "dir": name,
                                "t_offset": float(t_offset),
                                "base_seed": int(seg_seed),
                                "n_paths": sub.n_paths,
                                "plant_digest": ds.plant_digest})
        report.payload["datasets"] = entries

    _guarded(report, out, ("json",), work)
    print(f"wrote {len(entries)} dataset segment(s) under {out}")
    return 0


def _cmd_learn_fb(args) -> int:
    cfg = _prep(args)
    cfg.mode = "data_driven"
    report = RunReport()
    report.payload.update({"config": _pyify(cfg.raw), "mode": "data_driven"})

    def work():
        with _timed(report, "collect"):
            moments = gather_moments(cfg, mode=cfg.data_source["kind"],
                                     n_paths=args.paths,
                                     refine=cfg.data_source["refine"])
        with _timed(report, "learn_feedback"):
            learned = learn_feedback(
                moments, cfg.cost, cfg.hyper,
                validate_with=cfg.plant if args.validate else None)
        report.payload["data_driven"] = _payload_learned(learned)

    _guarded(report, args.out or cfg.output, ("json", "csv"), work)
    print(f"learned feedback gain: {report.payload['data_driven']['K_hat']}")
    return 0


def _cmd_learn_ff(args) -> int:
    cfg = _prep(args)
    cfg.mode = "data_driven"
    report = run_experiment(cfg, out_dir=args.out, validate=args.validate,
                            n_paths=args.paths)
    rows = report.payload["feedforward_cases"]
    print(f"fit feedforward gains for {len(rows)} case(s)")
    return 0


def _cmd_shadow(args) -> int:
    cfg = _prep(args)
    cfg.mode = "shadow"
    report = run_experiment(cfg, out_dir=args.out, validate=args.validate,
                            n_paths=args.paths)
    sh = report.payload["shadow"]
    print(f"shadow-learned gain: {sh['K_hat']} "
          f"(plant input zero: {sh['plant_input_zero']})")
    return 0


def _cmd_track(args) -> int:
    cfg = _prep(args)
    if cfg.tracking is None:
        raise ConfigError("config has no tracking block")
    cfg.mode = "model_based"
    report = run_experiment(cfg, out_dir=args.out, validate=True,
                            n_paths=args.paths)
    tr = report.payload["tracking"]
    print(f"tracking settled RMS error: {tr['max_settled_rms']:.6g}")
    return 0


def _cmd_example(which):
    def handler(args) -> int:
        report = reproduce_example(which, out_dir=args.out,
                                   n_paths=args.paths,
                                   seed_offset=args.seed or 0)
        if which == "one":
            dd = report.payload["data_driven"]
            print(f"model K* = {report.payload['model_based']['K_star']}")
            print(f"learned K^ = {dd['K_hat']} "
                  f"(crossing at iteration {dd['crossing_iteration']})")
            cc = report.payload["cost_comparison"]
            print(f"average cost {cc['noise_aware']['mean']:.6g} (noise aware) "
                  f"vs {cc['deterministic_design']['mean']:.6g} (noise blind)")
        else:
            sh = report.payload["shadow"]
            print(f"shadow K^ = {sh['K_hat']} "
                  f"(crossing at iteration {sh['crossing_iteration']}, "
                  f"plant input zero: {sh['plant_input_zero']})")
        return 0

    return handler


def _cmd_report(args) -> int:
    rep = load_report(args.path)
    text = canonical_json(rep.document()) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slqt",
        description="Stochastic linear-quadratic tracking: model-based "
                    "solves, data-driven learning, and benchmark runs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, needs_config=True):
        q = sub.add_parser(name, help=help_text)
        if needs_config:
            q.add_argument("--config", required=True,
                           help="experiment config JSON file")
        q.add_argument("--out", default=None, help="output directory")
        q.add_argument("--seed", type=int, default=None,
                       help="offset added to every segment base seed")
        q.add_argument("--paths", type=int, default=None,
                       help="override the ensemble path count")
        q.add_argument("--validate-with-model", action="store_true",
                       dest="validate",
                       help="compute stability certificates from the "
                            "configured plant matrices")
        q.set_defaults(func=fn)
        return q

    add("solve", _cmd_solve, "model-based solve of the tracking problem")
    add("collect", _cmd_collect, "simulate and store ensemble datasets")
    add("learn-fb", _cmd_learn_fb, "data-driven feedback learning")
    add("learn-ff", _cmd_learn_ff, "feedback plus feedforward learning")
    add("shadow", _cmd_shadow, "learning without plant excitation")
    add("track", _cmd_track, "closed-loop tracking demo")
    add("example1", _cmd_example("one"),
        "reproduce the damped-oscillator benchmark", needs_config=False)
    add("example2", _cmd_example("two"),
        "reproduce the coupled-oscillator shadow benchmark",
        needs_config=False)
    rep = sub.add_parser("report", help="re-emit a report canonically")
    rep.add_argument("path", help="path to an existing report.json")
    rep.add_argument("--out", default=None, help="output file")
    rep.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except json.JSONDecodeError as e:
        print(f"error: invalid JSON: {e}", file=sys.stderr)
        return EXIT_CODES["config"]
    except SlqtError as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
