"""Command-line entry point: generate -> label -> audit/train/eval -> report.

Subcommands talk to each other only through files in the output directory.
Exit status: 0 ok, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import config as cfgmod
from .events import EventLogError, SessionTable, load_event_log, sessionize, write_event_log
from .learner import Adam, FeatureEncoding, MultiTaskModel, StreamingTrainer, load_checkpoint, save_checkpoint, \
    write_trace
from .metrics import EvalReport, EvalSchedule, EvalWindowResult, streaming_eval
from .rereco import (ContentAwareScorer, FeatureClock, ModelScorer, RerecoPolicy, sample_episodes,
                     simulate_serving, staleness_report, static_features)
from .simgen import ConfigError, GroundTruth, generate
from .windowing import HOUR_MS, PARADIGMS, accuracy_curve, audit_label_accuracy, produce_stream, read_samples, \
    write_samples

log = logging.getLogger("sliver")

EVENTS, TRUTH, INCOMPLETE = "events.jsonl", "truth.json", "INCOMPLETE"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _save_config(out: str, name: str, cfg: dict) -> None:
    _text(os.path.join(out, f"config.{name}.yaml"), cfgmod.dump(cfg))


def _load_world(out: str, cfg: dict) -> tuple[SessionTable, GroundTruth | None]:
    events = os.path.join(out, EVENTS)
    if not os.path.exists(events):
        raise FileNotFoundError(f"{events} not found; run `sliver generate` first")
    truth_path = os.path.join(out, TRUTH)
    truth = GroundTruth.load(truth_path) if os.path.exists(truth_path) else None
    g = cfgmod.generator_config(cfg)
    end = truth.log_end if truth is not None else g.horizon_ms + g.drain_ms
    return sessionize(load_event_log(events), end), truth


def _stream(out: str, cfg: dict, sessions: SessionTable, name: str):
    """Samples from ``label``'s file when present, otherwise labelled now."""
    pol = cfgmod.policy(cfg, name)
    path = os.path.join(out, f"samples-{name}.csv")
    if os.path.exists(path):
        return read_samples(path, sessions, pol)
    return produce_stream(sessions, pol)


def _model_factory(cfg: dict, arch: str):
    m = cfg["model"]
    enc = FeatureEncoding(hash_size=int(m["hash_size"]), include_user_id=bool(m["include_user_id"]))
    return lambda seed: MultiTaskModel(arch, enc, int(seed))


def _optimizer(cfg: dict) -> Adam:
    o = cfg["optimizer"]
    return Adam(float(o["lr"]), float(o["beta1"]), float(o["beta2"]), float(o["eps"]))


def _paradigms(args, cfg) -> list[str]:
    names = [args.paradigm] if getattr(args, "paradigm", None) else list(cfg["paradigms"])
    for n in names:
        if n not in cfg["paradigms"]:
            raise ConfigError(f"paradigm {n!r} is not configured")
    return names


def _evaluate(cfg: dict, streams: dict, archs: list[str]) -> EvalReport:
    ev = cfg["eval"]
    sched = EvalSchedule(int(ev["start_hour"]) * HOUR_MS, int(ev["hours"]))
    windows, delays = [], {}
    for arch in archs:
        rep = streaming_eval(_model_factory(cfg, arch), streams, sched, seeds=[int(s) for s in ev["seeds"]],
                             batch_size=int(cfg["optimizer"]["batch_size"]), baseline=ev["baseline"],
                             model_name=arch, log=log.info, optimizer_factory=lambda: _optimizer(cfg),
                             weights=tuple(float(x) for x in cfg["model"]["loss_weights"]))
        windows += rep.windows
        delays = rep.delays
    return EvalReport(windows, [int(s) for s in ev["seeds"]], ev["baseline"], delays)


def _comparison_rows(report: EvalReport) -> list[dict]:
    agg = report.aggregate()
    rows = {}
    for r in agg:
        row = rows.setdefault((r["model"], r["paradigm"]), {"model": r["model"], "paradigm": r["paradigm"]})
        row[f"{r['task']}_auc"] = r["mean_auc"]
        row[f"{r['task']}_se"] = r["se"]
        row[f"{r['task']}_rela_impr"] = r["rela_impr"]
    return list(rows.values())


COMPARISON_FIELDS = ["model", "paradigm"] + [f"{t}_{k}" for t in ("click", "follow", "like")
                                            for k in ("auc", "se", "rela_impr")]


def _write_comparison(out: str, report: EvalReport) -> list[dict]:
    rows = _comparison_rows(report)
    with open(os.path.join(out, "comparison.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, COMPARISON_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r.get(k) is None else (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k])
                        for k in COMPARISON_FIELDS})
    return rows


def _report_markdown(rows: list[dict], baseline: str, audits: dict) -> str:
    lines = ["# Paradigm comparison", "", f"Mean test AUC per task; RelaImpr (%) against `{baseline}`.", "",
             "| model | paradigm | click | follow | like |", "|---|---|---|---|---|"]

    def cell(r, t):
        a, ri = r.get(f"{t}_auc"), r.get(f"{t}_rela_impr")
        if a is None:
            return "n/a"
        return f"{a:.4f}" + ("" if ri is None or r["paradigm"] == baseline else f" ({ri:+.2f})")

    for r in rows:
        lines.append(f"| {r['model']} | {r['paradigm']} | {cell(r, 'click')} | {cell(r, 'follow')} | "
                     f"{cell(r, 'like')} |")
    if audits:
        lines += ["", "# Label accuracy against eventual labels", "",
                  "| paradigm | task | accuracy | recall |", "|---|---|---|---|"]
        for name, a in sorted(audits.items()):
            for task, t in a["tasks"].items():
                f = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
                lines.append(f"| {name} | {task} | {f(t['accuracy'])} | {f(t['recall'])} |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args, cfg, out):
    events, truth = generate(cfgmod.generator_config(cfg))
    write_event_log(events, os.path.join(out, EVENTS))
    truth.save(os.path.join(out, TRUTH))
    _save_config(out, "generate", cfg)
    log.info("wrote %d events for %d sessions", len(events), truth.user_id.size)


def cmd_label(args, cfg, out):
    sessions, _ = _load_world(out, cfg)
    for name in _paradigms(args, cfg):
        stream = produce_stream(sessions, cfgmod.policy(cfg, name))
        write_samples(stream, os.path.join(out, f"samples-{name}.csv"))
        log.info("%s: %d samples", name, len(stream))
    _save_config(out, "label" + (f"-{args.paradigm}" if args.paradigm else ""), cfg)


def cmd_audit(args, cfg, out):
    sessions, truth = _load_world(out, cfg)
    if truth is None:
        raise FileNotFoundError(f"{os.path.join(out, TRUTH)} not found; audits need the truth sidecar")
    for name in _paradigms(args, cfg):
        rep = audit_label_accuracy(_stream(out, cfg, sessions, name), truth)
        _json(os.path.join(out, f"audit-{name}.json"), rep.to_dict())
    curve = accuracy_curve(sessions, truth, [int(w) for w in cfg["audit"]["windows_ms"]])
    with open(os.path.join(out, "accuracy-curve.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, list(curve[0]) if curve else ["window_ms"], lineterminator="\n")
        w.writeheader()
        w.writerows(curve)
    _save_config(out, "audit", cfg)


def cmd_train(args, cfg, out):
    sessions, _ = _load_world(out, cfg)
    name = args.paradigm or "sliver"
    if name not in cfg["paradigms"]:
        raise ConfigError(f"paradigm {name!r} is not configured")
    stream = _stream(out, cfg, sessions, name)
    for arch in cfg["model"]["archs"]:
        model = _model_factory(cfg, arch)(int(cfg["eval"]["seeds"][0]))
        trainer = StreamingTrainer(model, stream, int(cfg["optimizer"]["batch_size"]), _optimizer(cfg),
                                   tuple(float(x) for x in cfg["model"]["loss_weights"]))
        trainer.advance()
        save_checkpoint(model, os.path.join(out, f"model-{name}-{arch}.ckpt"))
        write_trace(trainer.trace, os.path.join(out, f"trace-{name}-{arch}.csv"))
        log.info("%s/%s: %d steps", name, arch, len(trainer.trace))
    _save_config(out, f"train-{name}", cfg)


def cmd_eval(args, cfg, out):
    sessions, _ = _load_world(out, cfg)
    streams = {n: _stream(out, cfg, sessions, n) for n in _paradigms(args, cfg)}
    report = _evaluate(cfg, streams, list(cfg["model"]["archs"]))
    _text(os.path.join(out, "eval.json"), report.to_json())
    _text(os.path.join(out, "eval.csv"), report.to_csv())
    _save_config(out, "eval", cfg)


def cmd_rereco(args, cfg, out):
    rr = cfg["rereco"]
    gcfg = cfgmod.generator_config(cfg, rereco=True)
    events, truth = generate(gcfg)
    profiles, rooms = static_features(events)
    episodes = sample_episodes(gcfg, truth, int(rr["episodes"]), int(rr["candidates"]), int(rr["seed"]),
                               profiles, rooms)
    if rr["scorer"] == "model":
        path = args.checkpoint or os.path.join(out, f"model-sliver-{cfg['model']['archs'][0]}.ckpt")
        scorer = ModelScorer(load_checkpoint(path))
    else:
        scorer = ContentAwareScorer(truth)
    clock = FeatureClock(truth)
    alpha = tuple(float(x) for x in cfg["model"]["fusion_weights"])
    period = int(rr["period_ms"])
    on = simulate_serving(episodes, scorer, RerecoPolicy(bool(rr["enabled"]), period), clock, alpha)
    off = simulate_serving(episodes, scorer, RerecoPolicy(False, period), clock, alpha)
    rep = staleness_report(on, off, truth)
    rep.write_csv(os.path.join(out, "staleness.csv"))
    _json(os.path.join(out, "rereco.json"), {**rep.summary(), "enabled": bool(rr["enabled"]),
                                             "skipped": on.skipped, "scorer": rr["scorer"]})
    _save_config(out, "rereco-sim", cfg)
    log.info("re-reco %s: mean ctr %.4f vs %.4f (p=%s)", "on" if rr["enabled"] else "off",
             rep.mean_ctr_on, rep.mean_ctr_off, rep.p_value)


def _load_report(path: str) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return EvalReport([EvalWindowResult(**w) for w in d["windows"]], d["seeds"], d["baseline"], d["delays"])


def cmd_report(args, cfg, out):
    path = os.path.join(out, "eval.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path} not found; run `sliver eval` or `sliver compare` first")
    report = _load_report(path)
    rows = _write_comparison(out, report)
    audits = {}
    for name in PARADIGMS:
        p = os.path.join(out, f"audit-{name}.json")
        if os.path.exists(p):
            with open(p, encoding="utf-8") as fh:
                audits[name] = json.load(fh)
    _text(os.path.join(out, "report.md"), _report_markdown(rows, report.baseline, audits))
    _save_config(out, "report", cfg)


def cmd_compare(args, cfg, out):
    events, truth = generate(cfgmod.generator_config(cfg))
    sessions = sessionize(events, truth.log_end)
    streams = {n: produce_stream(sessions, cfgmod.policy(cfg, n)) for n in cfg["paradigms"]}
    report = _evaluate(cfg, streams, list(cfg["model"]["archs"]))
    _text(os.path.join(out, "eval.json"), report.to_json())
    _text(os.path.join(out, "eval.csv"), report.to_csv())
    audits = {n: audit_label_accuracy(s, truth).to_dict() for n, s in streams.items()}
    rows = _write_comparison(out, report)
    _text(os.path.join(out, "report.md"), _report_markdown(rows, report.baseline, audits))
    _save_config(out, "compare", cfg)


COMMANDS = {"generate": cmd_generate, "label": cmd_label, "audit": cmd_audit, "train": cmd_train,
            "eval": cmd_eval, "rereco-sim": cmd_rereco, "report": cmd_report, "compare": cmd_compare}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (defaults are documented by `sliver --print-config`)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    paradigm = argparse.ArgumentParser(add_help=False)
    paradigm.add_argument("--paradigm", choices=PARADIGMS)
    paradigm.add_argument("--window-ms", type=int, help="window length for --paradigm")
    paradigm.add_argument("--t-uni-ms", type=int, help="sliding-window grid origin")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--arch", choices=("shared-bottom", "mmoe"), action="append",
                       help="model architecture (repeatable)")
    model.add_argument("--seeds", type=int, nargs="+", help="model-initialisation seeds")
    model.add_argument("--batch-size", type=int)

    gen = argparse.ArgumentParser(add_help=False)
    gen.add_argument("--seed", type=int, help="generator seed")

    p = _Parser(prog="sliver", description="Sliding-window labelling experiments on synthetic live-stream logs.")
    p.add_argument("--print-config", action="store_true", help="print the default config and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("generate", parents=[common, gen], help="draw a synthetic event log and its truth sidecar")
    sub.add_parser("label", parents=[common, paradigm], help="write labelled samples per paradigm")
    sub.add_parser("audit", parents=[common, paradigm], help="label accuracy against eventual labels")
    sub.add_parser("train", parents=[common, paradigm, model], help="stream-train a model and checkpoint it")
    sub.add_parser("eval", parents=[common, paradigm, model], help="hour-by-hour streaming evaluation")
    rr = sub.add_parser("rereco-sim", parents=[common], help="serving simulation with and without re-reco")
    rr.add_argument("--rereco", choices=("on", "off"))
    rr.add_argument("--rereco-period-ms", type=int)
    rr.add_argument("--episodes", type=int)
    rr.add_argument("--scorer", choices=("content", "model"))
    rr.add_argument("--checkpoint", help="model checkpoint for --scorer model")
    sub.add_parser("report", parents=[common], help="comparison matrix and markdown report from eval.json")
    sub.add_parser("compare", parents=[common, gen, model], help="full three-paradigm comparison")
    return p


def _overrides(args) -> dict:
    o: dict = {}
    if getattr(args, "seed", None) is not None:
        o.setdefault("generator", {})["seed"] = args.seed
    if getattr(args, "window_ms", None) is not None or getattr(args, "t_uni_ms", None) is not None:
        if not args.paradigm:
            raise UsageError("--window-ms/--t-uni-ms need --paradigm")
        p = {}
        if args.window_ms is not None:
            p["window_ms"] = args.window_ms
        if args.t_uni_ms is not None:
            if args.paradigm != "sliver":
                raise UsageError("--t-uni-ms applies to the sliver paradigm only")
            p["t_uni_ms"] = args.t_uni_ms
        o["paradigms"] = {args.paradigm: p}
    if getattr(args, "arch", None):
        o.setdefault("model", {})["archs"] = args.arch
    if getattr(args, "seeds", None):
        o.setdefault("eval", {})["seeds"] = args.seeds
    if getattr(args, "batch_size", None) is not None:
        o.setdefault("optimizer", {})["batch_size"] = args.batch_size
    rr = {}
    if getattr(args, "rereco", None):
        rr["enabled"] = args.rereco == "on"
    if getattr(args, "rereco_period_ms", None) is not None:
        rr["period_ms"] = args.rereco_period_ms
    if getattr(args, "episodes", None) is not None:
        rr["episodes"] = args.episodes
    if getattr(args, "scorer", None):
        rr["scorer"] = args.scorer
    if rr:
        o["rereco"] = rr
    if getattr(args, "out", None):
        o["output_dir"] = args.out
    return o


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_config:
        sys.stdout.write(cfgmod.DEFAULT_CONFIG_YAML)
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        sys.stderr.write("sliver: error: a subcommand is required\n")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    try:
        cfg = cfgmod.load_config(args.config, _overrides(args))
    except (ConfigError, UsageError, OSError) as e:
        sys.stderr.write(f"sliver {args.command}: {e}\n")
        return 1
    out = cfgmod.output_dir(cfg)
    marker = os.path.join(out, INCOMPLETE)
    try:
        os.makedirs(out, exist_ok=True)
        _text(marker, f"{args.command} did not finish\n")
        COMMANDS[args.command](args, cfg, out)
    except (ConfigError, UsageError) as e:
        sys.stderr.write(f"sliver {args.command}: {e}\n")
        return 1
    except (EventLogError, OSError, ValueError, KeyError, RuntimeError, FloatingPointError) as e:
        sys.stderr.write(f"sliver {args.command}: {type(e).__name__}: {e}\n")
        return 2
    os.remove(marker)
    return 0


if __name__ == "__main__":
    sys.exit(main())
