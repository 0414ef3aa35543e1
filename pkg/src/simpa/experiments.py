"""Training and evaluation runs, their on-disk artefacts, and plot data.

Artefacts of ``run_train(cfg, out)``:
    out/config.json       the resolved configuration
    out/metrics.jsonl     one JSON object per meta-iteration
    out/checkpoint.bin    latest state (see ``checkpoint``)

Artefacts of ``run_eval(..., out_dir=out)``:
    out/per_task.csv      one row per task, then a final ``mean`` row
    out/report.json       summary, reliability curve and an example curve

``emit_plot_data(reports, out)`` writes, per report mode M:
    regression_curve_M.csv   x, mean, std (regression only)
    reliability_M.csv        level, observed, weight
and across reports:
    calibration_bars.csv     mode, ece, mce
    nll_comparison.csv       mode, nll
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import calibration as cal
from .autodiff import NonFiniteError
from .bound import compute_R0
from .checkpoint import _atomic_write, describe, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, eval_stream
from .environments import X_RANGE
from .maml import maml_init, maml_predict, maml_train_iter
from .meta import MetaState, evaluate_task, hyper_posterior, init_state, predict, train_iter
from .stochastic import RngStream, gaussian_kl

PER_TASK_COLUMNS = {
    "regression": ("task", "kind", "nll", "mse"),
    "classification": ("task", "kind", "nll", "accuracy"),
}
CURVE_COLUMNS = ("x", "mean", "std")


class ArchitectureMismatch(ValueError):
    pass


class ResumeMismatch(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


def _write_text(path: Path, text: str) -> None:
    _atomic_write(Path(path), text.encode())


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

_RESUME_IGNORED = {("train", "iterations"), ("checkpoint_every",)}


def _resume_diff(saved: dict, current: dict) -> list[str]:
    diffs = []
    for key in sorted(set(saved) | set(current)):
        a, b = saved.get(key), current.get(key)
        if isinstance(a, dict) and isinstance(b, dict):
            for sub in sorted(set(a) | set(b)):
                if (key, sub) not in _RESUME_IGNORED and a.get(sub) != b.get(sub):
                    diffs.append(f"{key}.{sub}")
        elif (key,) not in _RESUME_IGNORED and a != b:
            diffs.append(key)
    return diffs


def _metrics_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)


@dataclass
class TrainResult:
    state: object
    out_dir: Path
    metrics: list[dict] = field(default_factory=list)

    @property
    def checkpoint(self) -> Path:
        return self.out_dir / "checkpoint.bin"

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / "metrics.jsonl"


def run_train(cfg: ExperimentConfig, out_dir, resume=None, iterations: int | None = None, progress=None) -> TrainResult:
    """Train per ``cfg`` (SImPa or the MAML baseline), checkpointing every
    ``cfg.checkpoint_every`` iterations and at the end.

    ``resume`` is a checkpoint path; its config must match ``cfg`` apart
    from the iteration budget. Metrics already logged past the resumed
    iteration are dropped so the log stays consistent with the state.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    total = cfg.train.iterations if iterations is None else int(iterations)
    sampler = cfg.task_sampler()
    lines: list[str] = []
    if resume is not None:
        state, saved, header = load_checkpoint(resume)
        if header["kind"] != cfg.mode:
            raise ResumeMismatch(f"checkpoint holds a {header['kind']!r} run, config asks for {cfg.mode!r}")
        diffs = _resume_diff(saved, cfg.to_dict())
        if diffs:
            raise ResumeMismatch(f"config differs from the checkpoint in: {', '.join(diffs)}")
        log = Path(resume).parent / "metrics.jsonl"
        if log.exists():
            lines = [l for l in log.read_text().splitlines() if l and json.loads(l)["iteration"] < state.iteration]
    elif cfg.mode == "simpa":
        state = init_state(cfg.build_architecture(), cfg.train.seed)
    else:
        state = maml_init(cfg.base_spec(), cfg.train.seed)

    if cfg.mode == "simpa":
        steps = train_iter(cfg.build_architecture(), cfg.train, sampler, state, total)
    else:
        steps = maml_train_iter(cfg.base_spec(), cfg.maml_config(), sampler, state, total)

    config_echo = cfg.to_dict()
    _write_text(out / "config.json", cfg.to_json() + "\n")
    records = []

    def flush(st):
        save_checkpoint(out / "checkpoint.bin", st, config_echo)
        _write_text(out / "metrics.jsonl", "".join(l + "\n" for l in lines))

    last = state
    try:
        for st, rep in steps:
            rec = rep.as_dict() if cfg.mode == "simpa" else dict(rep)
            lines.append(_metrics_line(rec))
            records.append(rec)
            last = st
            if progress is not None:
                progress(rec)
            if st.iteration % cfg.checkpoint_every == 0:
                flush(st)
    except (NonFiniteError, FloatingPointError) as exc:
        save_checkpoint(out / "checkpoint.aborted.bin", last, config_echo)
        _write_text(out / "metrics.jsonl", "".join(l + "\n" for l in lines))
        raise TrainingAborted(f"non-finite state at iteration {last.iteration}: {exc}; last good state saved") from exc
    flush(last)
    return TrainResult(last, out, records)


def read_metrics(path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    mode: str
    likelihood: str
    rows: list[dict]
    summary: dict
    reliability: cal.ReliabilityCurve | None = None
    curve: dict | None = None  # regression example: x, mean, std, support_x, support_y

    def to_dict(self) -> dict:
        rel = None
        if self.reliability is not None:
            rel = {k: getattr(self.reliability, k).tolist() for k in ("levels", "observed", "weights")}
        return {"mode": self.mode, "likelihood": self.likelihood, "rows": self.rows,
                "summary": self.summary, "reliability": rel, "curve": self.curve}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        rel = d.get("reliability")
        curve = None if rel is None else cal.ReliabilityCurve(np.array(rel["levels"]), np.array(rel["observed"]), np.array(rel["weights"]))
        return cls(d["mode"], d["likelihood"], d["rows"], d["summary"], curve, d.get("curve"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def per_task_csv(self) -> str:
        cols = PER_TASK_COLUMNS[self.likelihood]
        rows = [[_fmt(r[c]) for c in cols] for r in self.rows]
        if self.rows:
            metric = cols[-1]
            rows.append(["mean", "all", _fmt(self.summary["nll"]), _fmt(self.summary[metric])])
        return _csv_text(cols, rows)


def check_architecture(cfg: ExperimentConfig, state, saved: dict) -> None:
    """Raise ArchitectureMismatch when a checkpoint cannot serve ``cfg``."""
    for key in ("architecture", "environment"):
        if saved.get(key) is not None and saved[key] != cfg.to_dict()[key]:
            a, b = saved[key], cfg.to_dict()[key]
            fields = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
            raise ArchitectureMismatch(f"checkpoint {key} differs from config in: {', '.join(fields)}")
    if isinstance(state, MetaState):
        arch = cfg.build_architecture()
        expect = {"psi": arch.generator.n_params, "enc": arch.encoder.n_params, "omega0": arch.discriminator.n_params}
        got = {"psi": state.psi.size, "enc": state.enc.size, "omega0": state.omega0.size}
    else:
        expect, got = {"theta": cfg.base_spec().n_params}, {"theta": state.theta.size}
    bad = [k for k in expect if expect[k] != got[k]]
    if bad:
        raise ArchitectureMismatch("parameter sizes differ: " + ", ".join(f"{k} {got[k]} vs {expect[k]}" for k in bad))


def run_eval(cfg: ExperimentConfig, checkpoint, n_tasks: int | None = None, out_dir=None, n_oracle: int = 0, curve_points: int = 200) -> EvalReport:
    """Score a checkpoint on ``n_tasks`` fresh episodes.

    SImPa predictives are the K * L_v generated-network samples; the MAML
    baseline is read out as N(y_hat, 1) for regression. With ``n_oracle``
    hidden query points per task (regression, SImPa) a bound-validity
    tally is added: per-task clipped oracle loss against the task's
    empirical loss + KL + R_i + R_0.
    """
    state, saved, header = load_checkpoint(checkpoint)
    if header["kind"] != cfg.mode:
        raise ArchitectureMismatch(f"checkpoint holds a {header['kind']!r} model, config mode is {cfg.mode!r}")
    check_architecture(cfg, state, saved)
    n = int(cfg.eval.get("n_tasks", 1000) if n_tasks is None else n_tasks)
    lik = cfg.likelihood
    simpa = cfg.mode == "simpa"
    arch = cfg.build_architecture() if simpa else None
    spec = cfg.base_spec()
    sampler = cfg.task_sampler(n_oracle) if lik == "regression" else cfg.task_sampler()
    rows, pooled_samples, pooled_targets, pooled_probs, pooled_labels, pooled_mean = [], [], [], [], [], []
    tally = [0, 0]
    curve = None
    for j in range(n):
        stream = eval_stream(cfg, j)
        task = sampler(stream)
        pstream = RngStream(stream.seed, stream.iteration, stream.task, "eval-predict")
        if simpa:
            pred = predict(arch, cfg.train, state, task, task.query_x, pstream)
        else:
            pred = maml_predict(spec, cfg.maml_config(), state, task, task.query_x)
        y = task.query_y
        row = {"task": j, "kind": task.kind, "nll": pred.nll(y)}
        if lik == "regression":
            row["mse"] = float(np.mean((pred.mean - y.ravel()) ** 2))
            pooled_targets.append(y.ravel())
            (pooled_samples if simpa else pooled_mean).append(pred.samples if simpa else pred.mean)
        else:
            probs = pred.probs
            row["accuracy"] = float(np.mean(probs.argmax(axis=1) == y))
            pooled_probs.append(probs)
            pooled_labels.append(y)
        rows.append(row)
        if simpa and n_oracle and lik == "regression":
            ev = evaluate_task(arch, cfg.train, state, task, RngStream(stream.seed, stream.iteration, stream.task, "eval-bound"))
            r0 = compute_R0(gaussian_kl(hyper_posterior(state, cfg.train)), cfg.train.bound_config)
            tally[0] += ev.true_loss <= ev.emp_loss + max(ev.kl, 0.0) + ev.ri + r0
            tally[1] += 1
        if j == 0 and lik == "regression":
            grid = np.linspace(*X_RANGE, curve_points).reshape(-1, 1)
            g = predict(arch, cfg.train, state, task, grid, pstream) if simpa else maml_predict(spec, cfg.maml_config(), state, task, grid)
            curve = {
                "x": grid.ravel().tolist(), "mean": g.mean.tolist(),
                "std": (g.std if simpa else np.ones(curve_points)).tolist(),
                "support_x": task.support_x.ravel().tolist(), "support_y": task.support_y.ravel().tolist(),
            }

    summary: dict = {"n_tasks": n, "mode": cfg.mode}
    rel = None
    if rows:
        summary["nll"] = float(np.mean([r["nll"] for r in rows]))
        metric = "mse" if lik == "regression" else "accuracy"
        summary[metric] = float(np.mean([r[metric] for r in rows]))
        for kind in sorted({r["kind"] for r in rows}):
            sel = [r for r in rows if r["kind"] == kind]
            summary[f"{metric}_{kind}"] = float(np.mean([r[metric] for r in sel]))
            summary[f"nll_{kind}"] = float(np.mean([r["nll"] for r in sel]))
        if lik == "regression":
            targets = np.concatenate(pooled_targets)
            if targets.size >= cal.MIN_REGRESSION_POINTS:
                if simpa:
                    rel = cal.regression_reliability(np.concatenate(pooled_samples, axis=1), targets)
                else:
                    rel = cal.gaussian_reliability(np.concatenate(pooled_mean), 1.0, targets)
        else:
            rel = cal.classification_reliability(np.concatenate(pooled_probs), np.concatenate(pooled_labels))
        if rel is not None:
            summary["ece"], summary["mce"] = cal.ece_mce(rel)
        if tally[1]:
            summary["bound_valid"] = tally[0]
            summary["bound_trials"] = tally[1]
    report = EvalReport(cfg.mode, lik, rows, summary, rel, curve)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_text(out / "per_task.csv", report.per_task_csv())
        _write_text(out / "report.json", report.to_json() + "\n")
    return report


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

def emit_plot_data(reports, out_dir) -> list[Path]:
    """Write the CSV files behind regression-curve, reliability, ECE/MCE
    and NLL-comparison plots. Returns the written paths."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create plot-data directory {out}: {exc}") from exc
    written = []
    bars, nlls = [], []
    for rep in reports:
        if rep.curve is not None:
            c = rep.curve
            order = np.argsort(np.asarray(c["x"]), kind="stable")
            rows = [[_fmt(c["x"][i]), _fmt(c["mean"][i]), _fmt(c["std"][i])] for i in order]
            p = out / f"regression_curve_{rep.mode}.csv"
            _write_text(p, _csv_text(CURVE_COLUMNS, rows))
            written.append(p)
        if rep.reliability is not None:
            p = out / f"reliability_{rep.mode}.csv"
            cal.write_curve_csv(rep.reliability, p)
            written.append(p)
            bars.append([rep.mode, _fmt(rep.summary["ece"]), _fmt(rep.summary["mce"])])
        if "nll" in rep.summary:
            nlls.append([rep.mode, _fmt(rep.summary["nll"])])
    for name, header, rows in (("calibration_bars.csv", ("mode", "ece", "mce"), bars), ("nll_comparison.csv", ("mode", "nll"), nlls)):
        p = out / name
        _write_text(p, _csv_text(header, rows))
        written.append(p)
    return written


def inspect_checkpoint(path) -> dict:
    return describe(path)
