"""``lstmtrojan`` command line: train, evaluate, analyze, defend, replay.

Exit status is 0 on success, 1 on usage errors and 2 on runtime errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .analysis import (NORMAL_TRACE_MEAN, TROJAN_TRACE_MEAN, ClampSpec, FixedScalar, TraceMeans, UnitId,
                       classify_responses, clamp_and_run, read_traces_csv, record_traces, type3_units,
                       unintentional_trigger_scan, write_classes_csv, write_traces_csv)
from .agent import run_episode
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .defense import (BaselineProfile, MonitorPolicy, build_baseline, monitored_run,
                      parameter_distribution_report, write_alerts_csv)
from .evaluator import evaluate, write_table_csv, write_trial_log
from .gridworld import Cell, GridConfig, GridWorld, Mode, N_CODES, write_layout_csv, write_transcript_csv
from .trainer import CURVE_COLUMNS, TRAINING_LOG_COLUMNS, train

log = logging.getLogger("lstmtrojan")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- shared plumbing ----------------------------------------------------------

class Context:
    def __init__(self, args):
        self.args = args
        self.cfg: ExperimentConfig = load_config(args.config) if args.config else ExperimentConfig()
        self.seed = args.seed if args.seed is not None else self.cfg.run.seed
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def comment(self):
        return f"config_hash={self.cfg.text_hash} seed={self.seed}"

    def path(self, name) -> Path:
        return self.out / name


def _write_rows(path, columns, rows, comment):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)


def _checkpoint(path):
    if path is None:
        raise UsageError("--checkpoint is required")
    return load_checkpoint(path)


def _grid(side, holes, mode, trigger, max_steps=None):
    return GridConfig(side, holes, Mode(mode), trigger, max_steps)


def _eval_grid(ctx, mode):
    a, e = ctx.args, ctx.cfg.eval
    side = a.side if a.side is not None else e.side
    holes = a.holes if a.holes is not None else e.holes
    return _grid(side, holes, mode, (e.trigger_min, e.trigger_max), e.max_steps)


def _analyzer_grid(ctx, mode=Mode.NORMAL):
    a, s = ctx.args, ctx.cfg.analyzer
    side = a.side if a.side is not None else s.side
    holes = a.holes if a.holes is not None else s.holes
    step = a.trigger_step if a.trigger_step is not None else s.trigger_step
    return _grid(side, holes, mode, (step, step), s.max_steps)


def _pmap(fn, jobs, workers):
    """Order-preserving map; every job carries its own seed so results do not depend on ``workers``."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# --- train --------------------------------------------------------------------

def cmd_train(ctx):
    kind = ctx.args.kind
    tcfg = ctx.cfg.trainer_config()
    start = time.time()
    curve_rows = []

    def on_row(row):
        curve_rows.append(row)
        log.info("iter %d stage %d P_c %.3f P_t %.3f steps %d", row.iteration, row.stage, row.P_c, row.P_t,
                 row.env_steps)

    res = train(tcfg, ctx.cfg.ppo, ctx.seed, clean=(kind == "clean"), on_row=on_row)
    meta = {
        "agent": kind, "seed": ctx.seed, "config_hash": ctx.cfg.text_hash,
        "config_text": Path(ctx.args.config).read_text() if ctx.args.config else "",
        "iterations": res.iterations, "updates": res.updates, "env_steps": res.env_steps,
        "stage": res.stage, "wall_clock_s": round(time.time() - start, 3), "version": __version__,
    }
    for k, params in sorted(res.stage_params.items()):
        save_checkpoint(ctx.path(f"checkpoint_stage{k + 1}.stlb"), Checkpoint(params, {**meta, "stage": k}))
    save_checkpoint(ctx.path("checkpoint_final.stlb"), Checkpoint(res.params, meta))
    _write_rows(ctx.path("learning_curve.csv"), CURVE_COLUMNS,
                [[getattr(r, c) for c in CURVE_COLUMNS] for r in curve_rows], ctx.comment)
    _write_rows(ctx.path("training_log.csv"), TRAINING_LOG_COLUMNS,
                [[getattr(r, c) for c in TRAINING_LOG_COLUMNS] for r in curve_rows], ctx.comment)
    last = curve_rows[-1] if curve_rows else None
    print(f"trained {kind} agent: {res.iterations} episodes, {res.env_steps} env steps, stage {res.stage + 1}"
          + (f", P_c {last.P_c:.3f} P_t {last.P_t:.3f}" if last else ""))
    print(f"wrote {ctx.path('checkpoint_final.stlb')}")


# --- evaluate -----------------------------------------------------------------

def _eval_job(ckpt_path, config, trials, seed):
    return evaluate(load_checkpoint(ckpt_path), config, trials, seed)


def cmd_evaluate(ctx):
    paths = ctx.args.checkpoint
    if not paths:
        raise UsageError("--checkpoint is required")
    names = [Path(p).stem for p in paths]
    workers = ctx.cfg.run.workers
    if ctx.args.sweep:
        sweep_cfg = load_config(ctx.args.sweep).sweep
        trials = ctx.args.trials or sweep_cfg.trials
        modes = [Mode.NORMAL, Mode.TROJAN]
        rows, reports = {}, []
        for name, path in zip(names, paths):
            for mode in modes:
                jobs = [(path, g, trials, ctx.seed) for g in sweep_cfg.grids(mode)]
                got = _pmap(_eval_job, jobs, workers)
                rows[f"{name}:{mode.value}"] = got
                reports += got
        write_table_csv(ctx.path("table.csv"), rows, ctx.comment)
        write_trial_log(ctx.path("trials.csv"), reports, ctx.comment)
        for name, got in rows.items():
            print(name, " ".join(f"{r.config[0]}/{r.config[1]}={r.success_rate:.3f}" for r in got))
        print(f"wrote {ctx.path('table.csv')}")
        return
    trials = ctx.args.trials or ctx.cfg.eval.trials
    modes = [Mode.NORMAL, Mode.TROJAN] if ctx.args.mode == "both" else [Mode(ctx.args.mode)]
    reports, rows = [], []
    for name, path in zip(names, paths):
        for mode in modes:
            r = evaluate(load_checkpoint(path), _eval_grid(ctx, mode), trials, ctx.seed)
            reports.append(r)
            rows.append([name, *r.config, r.trials, r.successes, f"{r.success_rate:.4f}",
                         *r.outcome_histogram.values()])
            print(f"{name} {r.config[0]}x{r.config[0]}/{r.config[1]} {mode.value}: "
                  f"success {r.success_rate:.3f} ({r.successes}/{r.trials}) {r.outcome_histogram}")
    outcomes = list(reports[0].outcome_histogram)
    _write_rows(ctx.path("eval.csv"), ["agent", "side", "holes", "mode", "trials", "successes", "success_rate",
                                       *outcomes], rows, ctx.comment)
    write_trial_log(ctx.path("trials.csv"), reports, ctx.comment)


# --- analyze ------------------------------------------------------------------

def _classes(ctx, traces):
    a = ctx.cfg.analyzer
    return classify_responses(traces, a.tau, a.sustain_fraction, a.impulse_window)


def _parse_source(text):
    if text in (NORMAL_TRACE_MEAN, TROJAN_TRACE_MEAN):
        return text
    try:
        return FixedScalar(float(text))
    except ValueError:
        raise UsageError(f"--source must be {NORMAL_TRACE_MEAN}, {TROJAN_TRACE_MEAN} or a number, got {text!r}")


def cmd_analyze(ctx):
    a, an = ctx.args, ctx.cfg.analyzer
    trials = a.trials or an.trials
    if a.action == "traces":
        ts = record_traces(_checkpoint(a.checkpoint), _analyzer_grid(ctx), trials, _analyzer_grid(ctx).trigger_step_range[0],
                           ctx.seed)
        for p in write_traces_csv(ctx.out, ts, ctx.comment):
            print(f"wrote {p}")
        return
    if a.action == "classify":
        if a.traces:
            traces, _ = read_traces_csv(a.traces)
        else:
            cfg = _analyzer_grid(ctx)
            traces = record_traces(_checkpoint(a.checkpoint), cfg, trials, cfg.trigger_step_range[0], ctx.seed)
        classes = _classes(ctx, traces)
        write_classes_csv(ctx.path("classes.csv"), classes, ctx.comment)
        t3 = type3_units(classes)
        print(f"{len(classes)} units classified; type-3 units: {','.join(u.label for u in t3) or 'none'}")
        return
    if a.action == "clamp":
        ckpt = _checkpoint(a.checkpoint)
        cfg = _analyzer_grid(ctx)
        if a.traces:
            loaded, _ = read_traces_csv(a.traces)
            traces = TraceMeans(loaded)
        else:
            traces = record_traces(ckpt, cfg, trials, cfg.trigger_step_range[0], ctx.seed)
            loaded = traces
        if a.units:
            try:
                units = [UnitId.parse(u) for u in a.units.split(",") if u.strip()]
            except ValueError as exc:
                raise UsageError(str(exc))
        else:
            units = type3_units(_classes(ctx, loaded))
        source = _parse_source(a.source)
        mode = Mode(a.mode)
        report = clamp_and_run(ckpt, _analyzer_grid(ctx, mode), ClampSpec(units, [source] * len(units)),
                               a.episodes or trials, ctx.seed, traces)
        h = report.outcome_histogram
        n = report.trials
        rows = [",".join(u.label for u in units), a.source, mode.value, n,
                h["user_dest"], h["adv_dest"], h["hole"], h["step_limit"]]
        _write_rows(ctx.path("clamp.csv"), ["units", "source", "mode", "episodes", "user_dest", "adv_dest",
                                            "hole", "step_limit"], [rows], ctx.comment)
        print(f"clamped {len(units)} units ({','.join(u.label for u in units) or 'none'}) to {a.source} "
              f"in {mode.value} episodes: user_dest {h['user_dest'] / n:.3f} adv_dest {h['adv_dest'] / n:.3f} "
              f"hole {h['hole'] / n:.3f} step_limit {h['step_limit'] / n:.3f}")
        return
    if a.action == "scan":
        sweep_cfg = load_config(a.sweep).sweep if a.sweep else ctx.cfg.sweep
        res = unintentional_trigger_scan(_checkpoint(a.checkpoint), sweep_cfg.grids(Mode.NORMAL),
                                         a.trials or sweep_cfg.trials, ctx.seed, an.scan_threshold)
        _write_rows(ctx.path("scan.csv"), ["side", "holes", "wrong_destination_rate", "flagged"],
                    [[r.config.side_length, r.config.hole_count, f"{r.wrong_destination_rate:.4f}", int(r.flagged)]
                     for r in res], ctx.comment)
        for r in res:
            print(f"{r.config.side_length}/{r.config.hole_count}: wrong-destination {r.wrong_destination_rate:.3f}"
                  + ("  FLAGGED" if r.flagged else ""))


# --- defend -------------------------------------------------------------------

def cmd_defend(ctx):
    a, m = ctx.args, ctx.cfg.monitor
    if a.action == "baseline":
        prof = build_baseline(_checkpoint(a.checkpoint), _eval_grid(ctx, Mode.NORMAL),
                              a.episodes or m.baseline_episodes, ctx.seed)
        prof.save(ctx.path("baseline.npz"))
        print(f"baseline over {prof.sample_count} steps -> {ctx.path('baseline.npz')}")
        return
    if a.action == "monitor":
        if not a.baseline:
            raise UsageError("--baseline is required for monitor")
        ckpt = _checkpoint(a.checkpoint)
        prof = BaselineProfile.load(a.baseline)
        watch = [UnitId.parse(u) for u in a.units.split(",")] if a.units else None
        policy = MonitorPolicy(m.z_threshold, m.consecutive_steps, a.action_policy or m.action, watch)
        rows = []
        all_alerts = []
        for mode in (Mode.NORMAL, Mode.TROJAN):
            grid = _eval_grid(ctx, mode)
            eps = a.episodes or m.episodes
            plain = evaluate(ckpt, grid, eps, ctx.seed)
            report, alerts = monitored_run(ckpt, grid, prof, policy, ctx.seed, eps)
            all_alerts += [(mode, al) for al in alerts]
            h = report.outcome_histogram
            rows.append([mode.value, eps, f"{plain.success_rate:.4f}", f"{report.success_rate:.4f}",
                         h["user_dest"], h["adv_dest"], len(alerts)])
            print(f"{mode.value}: unmonitored success {plain.success_rate:.3f}, monitored {report.success_rate:.3f}, "
                  f"user_dest {h['user_dest'] / eps:.3f}, alerts {len(alerts)}")
        _write_rows(ctx.path("monitor.csv"), ["mode", "episodes", "success_unmonitored", "success_monitored",
                                              "user_dest", "adv_dest", "alerts"], rows, ctx.comment)
        write_alerts_csv(ctx.path("alerts.csv"), [al for _, al in all_alerts], ctx.comment)
        return
    if a.action == "params":
        if not a.against:
            raise UsageError("--against is required for params")
        rep = parameter_distribution_report(_checkpoint(a.checkpoint), load_checkpoint(a.against))
        rep.write_csv(ctx.path("param_hist.csv"), ctx.comment)
        ctx.path("param_report.txt").write_text(rep.to_text())
        print(rep.to_text(), end="")


# --- replay -------------------------------------------------------------------

def cmd_replay(ctx):
    a = ctx.args
    ckpt = _checkpoint(a.checkpoint)
    e = ctx.cfg.eval
    if a.trial_log:
        with open(a.trial_log) as fh:
            rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
        if not 0 <= a.row < len(rows):
            raise UsageError(f"--row must be in [0, {len(rows)})")
        r = rows[a.row]
        side, holes, mode, grid_seed = int(r["side"]), int(r["holes"]), r["mode"], int(r["grid_seed"])
        expected = r["outcome"]
    else:
        if a.grid_seed is None:
            raise UsageError("replay needs --trial-log/--row or --grid-seed")
        side = a.side if a.side is not None else e.side
        holes = a.holes if a.holes is not None else e.holes
        mode, grid_seed, expected = a.mode if a.mode != "both" else "normal", a.grid_seed, None
    world = GridWorld.generate(_grid(side, holes, mode, (e.trigger_min, e.trigger_max), e.max_steps), grid_seed)
    ep = run_episode(ckpt.params, world, greedy=True)
    rows = []
    for t in range(ep.length):
        x, y = ep.positions[t]
        seen = bool(ep.observations[t].reshape(9, N_CODES)[:, Cell.TRIGGER].any())
        rows.append({"t": t, "agent_x": x, "agent_y": y, "action": int(ep.actions[t]),
                     "reward": float(ep.rewards[t]), "trigger_flag": int(seen)})
    write_transcript_csv(ctx.path("transcript.csv"), rows, ctx.comment + f" grid_seed={grid_seed}")
    write_layout_csv(ctx.path("layout.csv"), world)
    print(f"replayed {side}x{side}/{holes} {mode} grid {grid_seed}: {ep.outcome.value} after {ep.length} steps"
          + (f" (logged: {expected})" if expected else ""))
    if expected is not None and expected != ep.outcome.value:
        raise RuntimeError(f"replay diverged from log: {ep.outcome.value} != {expected}")


# --- parser -------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="experiment config file (key = value, sectioned)")
    p.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _grid_args(p, mode_default="both"):
    p.add_argument("--side", type=int)
    p.add_argument("--holes", type=int)
    p.add_argument("--mode", choices=["normal", "trojan", "both"], default=mode_default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lstmtrojan", description="Backdoored recurrent RL agents: train, probe, defend.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a clean or backdoored agent")
    p.add_argument("kind", choices=["clean", "backdoor"])
    _common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="success rates on fresh grids")
    p.add_argument("--checkpoint", action="append", help="checkpoint file (repeatable)")
    p.add_argument("--sweep", metavar="FILE", help="config file whose [sweep] lists grid sizes")
    p.add_argument("--trials", type=int)
    _grid_args(p)
    _common(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("analyze", help="internal-state traces and interventions")
    p.add_argument("action", choices=["traces", "classify", "clamp", "scan"])
    p.add_argument("--checkpoint")
    p.add_argument("--traces", metavar="DIR", help="read traces from CSVs instead of recording")
    p.add_argument("--units", help="comma-separated unit ids, e.g. L2C5,L2C17 (default: all type-3 units)")
    p.add_argument("--source", default=NORMAL_TRACE_MEAN, help="clamp value: normal-mean, trojan-mean or a number")
    p.add_argument("--mode", choices=["normal", "trojan"], default="trojan", help="episodes to clamp")
    p.add_argument("--trials", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--trigger-step", type=int)
    p.add_argument("--sweep", metavar="FILE", help="config file whose [sweep] lists grids to scan")
    p.add_argument("--side", type=int)
    p.add_argument("--holes", type=int)
    _common(p)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("defend", help="baseline profiling, online monitoring, weight statistics")
    p.add_argument("action", choices=["baseline", "monitor", "params"])
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", help="baseline.npz from 'defend baseline'")
    p.add_argument("--against", help="second checkpoint for 'defend params'")
    p.add_argument("--policy", dest="action_policy", choices=["report", "reset-unit", "reset-all"])
    p.add_argument("--units", help="watch list (default: every unit)")
    p.add_argument("--episodes", type=int)
    p.add_argument("--side", type=int)
    p.add_argument("--holes", type=int)
    _common(p)
    p.set_defaults(fn=cmd_defend)

    p = sub.add_parser("replay", help="re-run a logged evaluation episode")
    p.add_argument("--checkpoint")
    p.add_argument("--trial-log", help="trials.csv written by 'evaluate'")
    p.add_argument("--row", type=int, default=0, help="0-based data row of the trial log")
    p.add_argument("--grid-seed", type=int)
    _grid_args(p, mode_default="normal")
    _common(p)
    p.set_defaults(fn=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        ctx = Context(args)
        args.fn(ctx)
    except UsageError as exc:
        print(f"lstmtrojan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"lstmtrojan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
