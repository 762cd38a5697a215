"""Command-line entry points: train, evaluate, simulate, sweep, render."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, build_run_config, load_config_file, merge_dotted, parse_overrides
from .harness import (CONTROLLERS, CapacityError, EpisodeConfig, calibration_sweep, compute_objective,
                      run_batch, run_seeded_episode)
from .learning import train_level_k
from .persistence import (PolicyFormatError, TraceFormatError, load_policy, read_trace, save_policy,
                          write_csv, write_json, write_trace)
from .render import render_ascii, render_svg

log = logging.getLogger("levelk_traffic")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3
TRAFFIC_PRESETS = {
    "level0": (1.0, 0.0, 0.0),
    "level1": (0.0, 1.0, 0.0),
    "level2": (0.0, 0.0, 1.0),
    "mixed": (0.10, 0.60, 0.30),
}
EVAL_CONTROLLERS = tuple(c for c in CONTROLLERS if c != "trainee")


class MissingArtifact(FileNotFoundError):
    """A required input file (policy, trace) does not exist."""


def parse_traffic(text: str) -> tuple:
    if text in TRAFFIC_PRESETS:
        return TRAFFIC_PRESETS[text]
    try:
        mix = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"traffic: expected one of {sorted(TRAFFIC_PRESETS)} or three fractions") from None
    if len(mix) != 3 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-9:
        raise ConfigError("traffic: fractions must be three nonnegative values summing to 1")
    return mix


def parse_grid(text: str) -> list[float]:
    """``"2,2.5"`` or an inclusive range ``"start:stop:step"``."""
    text = text.strip()
    if not text:
        raise ConfigError("grid: empty")
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0:
                raise ValueError("step must be > 0")
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + i * step, 10) for i in range(max(n, 0))]
        return [float(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise ConfigError(f"grid {text!r}: {exc}") from None


def _run_config(args, extra: dict | None = None) -> RunConfig:
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    return build_run_config(merge_dotted(values, extra or {}, parse_overrides(getattr(args, "set", None))))


def _load_required(path, what: str):
    if path is None:
        raise MissingArtifact(f"{what} policy required (pass it with --{what.replace('-', '')})")
    if not Path(path).exists():
        raise MissingArtifact(f"{what} policy file not found: {path}")
    return load_policy(path)


def _policies_for(args, controller: str, mix) -> dict:
    need = {lvl for lvl, frac in enumerate(mix) if frac > 0 and lvl > 0}
    if controller in ("level1", "level2"):
        need.add(int(controller[-1]))
    policies = {}
    for lvl in sorted(need):
        policies[lvl] = _load_required(getattr(args, f"level{lvl}"), f"level-{lvl}")
        if policies[lvl].level != lvl:
            raise ConfigError(f"level{lvl}: file holds a level-{policies[lvl].level} policy")
    return policies


def _episode_cfg(rc: RunConfig, controller: str, n_c: int, mix) -> EpisodeConfig:
    return EpisodeConfig(n_c=n_c, x0_max=rc.batch.x0_max, t_f=rc.batch.t_f,
                         ego_controller=controller, traffic_mix=tuple(mix))


def _out_path(rc: RunConfig, given, default_name: str) -> Path:
    path = Path(given) if given else Path(rc.output_dir) / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# -- commands ------------------------------------------------------------------

def cmd_train(args) -> int:
    extra = {"training.level_to_train": args.level, "training.seed": args.seed}
    if args.cycles is not None:
        extra["training.training_cycles"] = args.cycles
    if args.max_steps is not None:
        extra["training.max_steps"] = args.max_steps
    if args.cars_max is not None:
        extra["training.n_c_max"] = args.cars_max
    rc = _run_config(args, extra)
    lower = None
    if args.level >= 2:
        if args.lower is None:
            raise MissingArtifact(f"training level {args.level} requires the level-{args.level - 1} "
                                  "policy (pass it with --lower)")
        lower = _load_required(args.lower, f"level-{args.level - 1}")
    out = _out_path(rc, args.out, f"level{args.level}.policy")
    records = []

    def progress(rec):
        records.append(rec)
        if args.verbose and rec.cycle % 100 == 0:
            log.info("cycle %d: steps=%d Rbar=%.2f", rec.cycle, rec.steps, rec.Rbar)

    policy, summary = train_level_k(rc.training, lower, rc.sim, progress)
    save_policy(policy, out)
    load_policy(out)
    write_csv(out.with_suffix(".log.csv"), ["cycle", "n_c", "steps", "mean_reward", "Rbar", "violated"],
              [(r.cycle, r.n_c, r.steps, r.mean_reward, r.Rbar, r.violated) for r in records])
    write_json(out.with_suffix(".summary.json"), {
        "policy": str(out), "cycles": summary.cycles, "total_steps": summary.total_steps,
        "converged_at": summary.converged_at, "fallback_rows": summary.fallback_rows,
        "wall_time": summary.wall_time, "config": rc.to_dict(),
    })
    print(f"wrote {out} ({summary.cycles} cycles, {summary.total_steps} steps, "
          f"{summary.fallback_rows} fallback rows)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    rc = _run_config(args)
    mix = parse_traffic(args.traffic) if args.traffic else rc.batch.traffic_mix
    controller = args.controller or rc.batch.controller
    if controller not in EVAL_CONTROLLERS:
        raise ConfigError(f"controller: {controller!r} is not one of {EVAL_CONTROLLERS}")
    policies = _policies_for(args, controller, mix)
    episodes = args.episodes or rc.batch.episodes
    workers = args.workers or rc.batch.workers
    rows, timing = [], []
    for n_c in args.cars or [rc.batch.n_c]:
        t0 = time.perf_counter()
        m = run_batch(_episode_cfg(rc, controller, n_c, mix), episodes, args.seed, policies,
                      rc.sim, workers)
        lo, hi = m.confidence_interval()
        rows.append((n_c, controller, m.episodes, m.violation_rate, lo, hi, m.mean_of_mean_speeds))
        timing.append({"n_c": n_c, "mean_wall_time": m.mean_wall_time,
                       "batch_wall_time": time.perf_counter() - t0})
    out = _out_path(rc, args.out, "evaluate.csv")
    write_csv(out, ["n_c", "controller", "episodes", "violation_rate", "ci_low", "ci_high",
                    "mean_speed"], rows)
    write_json(out.with_suffix(".json"), {"seed": args.seed, "traffic_mix": list(mix),
                                          "timing": timing, "config": rc.to_dict()})
    for r in rows:
        print(f"n_c={r[0]} {r[1]}: violation_rate={r[3]:.4f} [{r[4]:.4f}, {r[5]:.4f}] "
              f"mean_speed={r[6]:.3f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    rc = _run_config(args)
    mix = parse_traffic(args.traffic) if args.traffic else rc.batch.traffic_mix
    controller = args.controller or rc.batch.controller
    if controller not in EVAL_CONTROLLERS:
        raise ConfigError(f"controller: {controller!r} is not one of {EVAL_CONTROLLERS}")
    policies = _policies_for(args, controller, mix)
    n_c = args.cars if args.cars is not None else rc.batch.n_c
    res = run_seeded_episode(_episode_cfg(rc, controller, n_c, mix), args.seed, policies, rc.sim,
                             record_trace=True)
    out = _out_path(rc, args.trace, "trace.jsonl")
    write_trace(out, res.trace, meta={**asdict(rc.sim.road), "controller": controller,
                                      "seed": args.seed, "n_c": n_c})
    print(f"violated={res.violated} steps={res.steps_run} mean_speed={res.mean_speed:.3f} "
          f"trace={out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    rc = _run_config(args)
    mix = parse_traffic(args.traffic) if args.traffic else rc.batch.traffic_mix
    policies = _policies_for(args, "decision-tree", mix)
    ratios, xbs = parse_grid(args.w_ratio), parse_grid(args.x_b)
    if not ratios or not xbs:
        raise ConfigError("grid: empty")
    objectives = [tuple(float(v) for v in o.split(",")) for o in (args.objective or ["1,0"])]
    if any(len(o) != 2 for o in objectives):
        raise ConfigError("objective: expected p1,p2")
    n_c = args.cars if args.cars is not None else rc.batch.n_c
    episodes = args.episodes or rc.batch.episodes
    cfg = _episode_cfg(rc, "decision-tree", n_c, mix)
    rows_out, summary = [], []
    cells = None
    for p1, p2 in objectives:
        if cells is None:
            cells, _ = calibration_sweep(ratios, xbs, cfg, episodes, args.seed, policies, p1, p2,
                                         rc.sim, args.workers or rc.batch.workers)
        scores = [compute_objective(c.violation_rate, c.mean_speed, p1, p2, rc.sim) for c in cells]
        best = int(np.argmax(scores))
        for i, (c, s) in enumerate(zip(cells, scores)):
            rows_out.append((p1, p2, c.w_ratio, c.x_B, c.violation_rate, c.mean_speed, s, i == best))
        summary.append({"p1": p1, "p2": p2, "w_ratio": cells[best].w_ratio, "x_B": cells[best].x_B,
                        "R_obj": scores[best]})
        print(f"p1={p1} p2={p2}: best w_ratio={cells[best].w_ratio} x_B={cells[best].x_B} "
              f"R_obj={scores[best]:.4f}")
    out = _out_path(rc, args.out, "sweep.csv")
    write_csv(out, ["p1", "p2", "w_ratio", "x_B", "violation_rate", "mean_speed", "R_obj", "argmax"],
              rows_out)
    write_json(out.with_suffix(".json"), {"seed": args.seed, "n_c": n_c, "episodes": episodes,
                                          "best": summary, "config": rc.to_dict()})
    return EXIT_OK


def cmd_render(args) -> int:
    if not Path(args.trace).exists():
        raise MissingArtifact(f"trace file not found: {args.trace}")
    meta, records = read_trace(args.trace)
    if not records:
        raise TraceFormatError("trace has no records")
    if args.steps in (None, "all"):
        chosen = records
    else:
        wanted = {int(s) for s in args.steps.split(",")}
        chosen = [r for r in records if r["step"] in wanted]
    if args.ascii:
        for r in chosen:
            print(render_ascii(r, meta))
        return EXIT_OK
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for r in chosen:
        (out_dir / f"frame_{r['step']:04d}.svg").write_text(render_svg(r, meta))
    print(f"wrote {len(chosen)} frames to {out_dir}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="levelk", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_required=True):
        sp.add_argument("--config", help="TOML config file (dotted keys)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. trigger.x_B=23")
        sp.add_argument("--seed", type=int, required=seed_required, default=0)

    def policies(sp):
        sp.add_argument("--level1", help="level-1 policy file")
        sp.add_argument("--level2", help="level-2 policy file")
        sp.add_argument("--traffic", help="level0, level1, level2, mixed or three fractions")

    t = sub.add_parser("train", help="train a level-k policy")
    common(t)
    t.add_argument("--level", type=int, required=True)
    t.add_argument("--cycles", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--cars-max", type=int)
    t.add_argument("--lower", help="level-(k-1) policy file (k >= 2)")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="Monte Carlo evaluation of a controller")
    common(e)
    policies(e)
    e.add_argument("--controller", choices=EVAL_CONTROLLERS)
    e.add_argument("--cars", type=int, nargs="+")
    e.add_argument("--episodes", type=int)
    e.add_argument("--workers", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("simulate", help="run one episode and write its trace")
    common(s, seed_required=False)
    policies(s)
    s.add_argument("--controller", choices=EVAL_CONTROLLERS)
    s.add_argument("--cars", type=int)
    s.add_argument("--trace")
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="calibration grid over w_l1/w_l2 and x_B")
    common(w)
    policies(w)
    w.add_argument("--w-ratio", required=True, help="list '2,2.5' or range 'start:stop:step'")
    w.add_argument("--x-b", required=True, help="list '21,23' or range 'start:stop:step'")
    w.add_argument("--objective", action="append", metavar="P1,P2")
    w.add_argument("--cars", type=int)
    w.add_argument("--episodes", type=int)
    w.add_argument("--workers", type=int)
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("render", help="render trace frames as SVG or ASCII")
    r.add_argument("trace")
    r.add_argument("--out-dir", default="frames")
    r.add_argument("--steps", help="comma-separated steps or 'all'")
    r.add_argument("--ascii", action="store_true")
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, CapacityError, PolicyFormatError, TraceFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
