"""AUC, RelaImpr, delay statistics and the hour-by-hour streaming evaluation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .events import TASK_NAMES, SessionTable
from .learner import Adam, MultiTaskModel, StreamingTrainer
from .windowing import HOUR_MS, SampleStream


class UndefinedAUC(ValueError):
    """Raised when a score set holds only one class."""


class DomainError(ValueError):
    pass


class LeakageError(RuntimeError):
    pass


def auc(scores, labels) -> float:
    """P(score+ > score-) + 0.5 * P(tie), computed from exact integer counts."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    twice_wins, n_pos, n_neg = kernels.auc_counts(scores, labels)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    return twice_wins / (2.0 * n_pos * n_neg)


def rela_impr(auc_measured: float, auc_base: float) -> float:
    """Relative AUC lift above the 0.5 floor, in percent."""
    if not auc_base > 0.5:
        raise DomainError(f"baseline AUC {auc_base} must exceed 0.5")
    return ((auc_measured - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


# ---------------------------------------------------------------------------
# delay statistics


def _quantiles(x: np.ndarray) -> dict:
    if x.size == 0:
        return {"n": 0, "p50": None, "p90": None, "max": None}
    return {"n": int(x.size), "p50": float(np.percentile(x, 50)), "p90": float(np.percentile(x, 90)),
            "max": int(x.max())}


def delay_stats(streams: dict[str, SampleStream]) -> dict:
    """Per paradigm: lag of each positive label behind its behaviour, and of every
    sample behind its impression and request."""
    out = {}
    for name, s in streams.items():
        t = s.sessions
        rows = s.session_idx
        entry = {}
        for b, task in enumerate(TASK_NAMES):
            pos = s.labels[:, b] == 1
            ts = getattr(t, f"{task}_ts")[rows[pos]]
            entry[task] = _quantiles(s.emit_ts[pos] - ts)
        imp = t.impression_ts[rows]
        entry["impression"] = _quantiles((s.emit_ts - imp)[imp >= 0])
        entry["request"] = _quantiles(s.emit_ts - t.request_ts[rows])
        out[name] = entry
    return out


# ---------------------------------------------------------------------------
# streaming evaluation


@dataclass
class EvalSchedule:
    """Train through ``start_ms``, then score ``hours`` consecutive test windows."""

    start_ms: int
    hours: int = 5
    step_ms: int = HOUR_MS

    def windows(self) -> list[tuple[int, int]]:
        return [(self.start_ms + k * self.step_ms, self.start_ms + (k + 1) * self.step_ms)
                for k in range(self.hours)]


@dataclass
class EvalWindowResult:
    paradigm: str
    model: str
    seed: int
    hour: int
    start_ms: int
    end_ms: int
    task: str
    auc: float | None
    n_pos: int
    n_neg: int
    train_frontier_ms: int | None
    n_trained: int


@dataclass
class EvalReport:
    windows: list[EvalWindowResult]
    seeds: list[int]
    baseline: str
    delays: dict = field(default_factory=dict)

    def aggregate(self) -> list[dict]:
        """Mean AUC per (paradigm, model, task): window mean per seed, then over seeds."""
        groups: dict[tuple, dict[int, list[float]]] = {}
        skipped: dict[tuple, int] = {}
        for w in self.windows:
            key = (w.paradigm, w.model, w.task)
            groups.setdefault(key, {})
            if w.auc is None:
                skipped[key] = skipped.get(key, 0) + 1
                continue
            groups[key].setdefault(w.seed, []).append(w.auc)
        rows = []
        for key in groups:
            per_seed = [float(np.mean(v)) for _, v in sorted(groups[key].items())]
            mean = float(np.mean(per_seed)) if per_seed else None
            se = float(np.std(per_seed, ddof=1) / np.sqrt(len(per_seed))) if len(per_seed) > 1 else None
            rows.append({"paradigm": key[0], "model": key[1], "task": key[2], "mean_auc": mean, "se": se,
                         "n_seeds": len(per_seed), "undefined_windows": skipped.get(key, 0),
                         "seed_means": per_seed})
        base = {(r["model"], r["task"]): r["mean_auc"] for r in rows if r["paradigm"] == self.baseline}
        for r in rows:
            b = base.get((r["model"], r["task"]))
            try:
                r["rela_impr"] = None if (b is None or r["mean_auc"] is None) else rela_impr(r["mean_auc"], b)
            except DomainError:
                r["rela_impr"] = None
        return rows

    def mean_auc(self, paradigm: str, task: str = "click", model: str | None = None) -> float:
        for r in self.aggregate():
            if r["paradigm"] == paradigm and r["task"] == task and (model is None or r["model"] == model):
                return r["mean_auc"]
        raise KeyError((paradigm, task, model))

    def to_json(self) -> str:
        doc = {"baseline": self.baseline, "seeds": self.seeds, "windows": [asdict(w) for w in self.windows],
               "aggregate": self.aggregate(), "delays": self.delays}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["paradigm", "model", "task", "hour", "seed", "auc", "n_pos", "n_neg", "rela_impr", "se"]
        w = csv.DictWriter(buf, cols, lineterminator="\n")
        w.writeheader()
        for r in self.windows:
            w.writerow({"paradigm": r.paradigm, "model": r.model, "task": r.task, "hour": r.hour, "seed": r.seed,
                        "auc": "" if r.auc is None else repr(r.auc), "n_pos": r.n_pos, "n_neg": r.n_neg,
                        "rela_impr": "", "se": ""})
        for r in self.aggregate():
            w.writerow({"paradigm": r["paradigm"], "model": r["model"], "task": r["task"], "hour": "mean",
                        "seed": "mean", "auc": "" if r["mean_auc"] is None else repr(r["mean_auc"]),
                        "n_pos": "", "n_neg": "", "rela_impr": "" if r["rela_impr"] is None else repr(r["rela_impr"]),
                        "se": "" if r["se"] is None else repr(r["se"])})
        return buf.getvalue()


def eval_targets(sessions: SessionTable, start_ms: int, end_ms: int) -> tuple[np.ndarray, np.ndarray]:
    """Requests in ``[start, end)`` that were impressed and exited before the log ended.

    Returns the session rows and their eventual labels (like only after a click,
    absent otherwise). A negative needs an observed exit without the behaviour.
    """
    t = sessions
    rows = np.flatnonzero((t.request_ts >= start_ms) & (t.request_ts < end_ms) & (t.impression_ts >= 0)
                          & ~t.censored)
    labels = np.empty((rows.size, 3), dtype=np.int8)
    labels[:, 0] = t.click_ts[rows] >= 0
    labels[:, 1] = t.follow_ts[rows] >= 0
    labels[:, 2] = np.where(t.click_ts[rows] >= 0, t.like_ts[rows] >= 0, -1)
    return rows, labels


def streaming_eval(model_factory: Callable[[int], MultiTaskModel], streams: dict[str, SampleStream],
                   schedule: EvalSchedule, seeds=(0, 1, 2, 3, 4), batch_size: int = 512,
                   baseline: str = "one-hour", model_name: str | None = None, log=None,
                   optimizer_factory: Callable[[], Adam] | None = None, weights=(1.0, 1.0, 1.0)) -> EvalReport:
    """Train each paradigm's model up to each test hour, then score that hour.

    All streams must share one :class:`SessionTable`; the test labels come from it.
    """
    sessions = None
    for name, s in streams.items():
        if not s.is_sorted():
            raise ValueError(f"stream {name!r} is not sorted by emission time")
        if sessions is not None and s.sessions is not sessions:
            raise ValueError("all streams must be labelled from the same sessions")
        sessions = s.sessions
    tests = [(a, b, *eval_targets(sessions, a, b)) for a, b in schedule.windows()]
    results = []
    for name, stream in streams.items():
        for seed in seeds:
            model = model_factory(seed)
            opt = optimizer_factory() if optimizer_factory else None
            trainer = StreamingTrainer(model, stream, batch_size, opt, weights)
            label = model_name or model.arch
            for hour, (a, b, rows, labels) in enumerate(tests):
                trainer.advance(a)
                if trainer.frontier is not None and trainer.frontier >= a:
                    raise LeakageError(f"{name}: trained on μ={trainer.frontier} before scoring [{a}, {b})")
                preds = model.predict(sessions, rows)
                for k, task in enumerate(TASK_NAMES):
                    m = labels[:, k] >= 0
                    y = labels[m, k]
                    n_pos = int(y.sum())
                    try:
                        value = auc(preds[m, k], y)
                    except UndefinedAUC:
                        value = None
                    results.append(EvalWindowResult(name, label, int(seed), hour, a, b, task, value, n_pos,
                                                    int(y.size - n_pos), trainer.frontier, trainer.cursor))
            if log:
                log(f"{name} seed={seed} trained={trainer.cursor}")
    return EvalReport(results, [int(s) for s in seeds], baseline, delay_stats(streams))
