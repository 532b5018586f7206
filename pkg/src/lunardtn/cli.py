"""Command-line entry point: ``lunardtn {defaults,train,eval,replay}``.

Exit codes: 0 success, 2 bad configuration, checkpoint or log, 3 a runtime
constraint violation inside the simulator.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import config as cfgmod
from .engine import (RESULT_COLUMNS, run_curriculum, run_monte_carlo, summarize)
from .errors import ConfigError, ConstraintViolation, FormatError
from .gnn import load_checkpoint, save_checkpoint

# shorthand flag -> dotted key(s) it sets
ALIASES = {
    "seed": ("run.seed",),
    "out": ("run.model",),
    "model": ("run.model",),
    "policies": ("run.policies",),
    "episodes": ("run.eval_episodes",),
    "rovers": ("run.min_rovers", "run.max_rovers"),
    "horizons": ("run.horizons",),
    "jobs": ("run.jobs",),
    "trace": ("run.trace",),
    "out_dir": ("run.out_dir",),
}

SHORTHANDS = {
    "train": ("seed", "out", "out_dir"),
    "eval": ("seed", "model", "policies", "episodes", "rovers", "horizons", "jobs", "trace",
             "out_dir"),
}


def _add_settings(p: argparse.ArgumentParser, shorthands: tuple[str, ...]) -> None:
    p.add_argument("config", nargs="?", help="TOML scenario file (defaults if omitted)")
    for name in shorthands:
        keys = ", ".join(ALIASES[name])
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"alias:{name}", metavar="VALUE",
                       help=f"same as --{keys}")
    g = p.add_argument_group("settings (any key of the config file)")
    for dotted in cfgmod.flag_names():
        g.add_argument(f"--{dotted}", dest=f"key:{dotted}", metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lunardtn",
                                     description="Lunar multi-rover DTN routing simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    d = sub.add_parser("defaults", help="print the default configuration as TOML")
    _add_settings(d, ())
    t = sub.add_parser("train", help="run the three-phase curriculum and save a checkpoint")
    _add_settings(t, SHORTHANDS["train"])
    e = sub.add_parser("eval", help="Monte Carlo comparison of routing policies")
    _add_settings(e, SHORTHANDS["eval"])
    r = sub.add_parser("replay", help="print the step records of an episode log")
    r.add_argument("--episode-log", required=True)
    r.add_argument("--out", help="write the trace here instead of stdout")
    return parser


def settings_from_args(args: argparse.Namespace) -> cfgmod.Settings:
    settings = cfgmod.load(args.config) if args.config else cfgmod.Settings()
    updates: dict[str, str] = {}
    for dest, value in vars(args).items():
        if value is None:
            continue
        if dest.startswith("alias:"):
            for key in ALIASES[dest[6:]]:
                updates[key] = value
        elif dest.startswith("key:"):
            updates[dest[4:]] = value
    return cfgmod.override(settings, updates) if updates else settings


def write_csv(path: Path, columns, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_defaults(settings: cfgmod.Settings) -> int:
    sys.stdout.write(cfgmod.dumps(settings))
    return 0


def cmd_train(settings: cfgmod.Settings) -> int:
    run = settings.run
    out = Path(run.out_dir)
    res = run_curriculum(settings.episode(), settings.space(), run.seed,
                         (run.collect_episodes, run.anneal_episodes, run.frozen_episodes),
                         settings.trainer, settings.reward, log=_log)
    model = Path(run.model)
    model.parent.mkdir(parents=True, exist_ok=True)
    size = save_checkpoint(res.params, model)
    index: dict[str, int] = {}
    rows = []
    for phase, m in res.episodes:
        i = index[phase] = index.get(phase, -1) + 1
        rows.append({"phase": phase, "episode": i, **m.row()})
    write_csv(out / "train_episodes.csv", ("phase", "episode") + RESULT_COLUMNS, rows)
    write_csv(out / "train_log.csv", ("step", "epsilon", "loss", "replay_fill"), res.train_log)
    meta = {"seed": run.seed, "checkpoint": str(model), "checkpoint_bytes": size,
            "sha256": res.params.digest(), "train_steps": res.trainer.steps,
            "replay_fill": len(res.trainer.replay), "reward": asdict(settings.reward),
            "trainer": asdict(settings.trainer)}
    (out / "train_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    for phase in ("collect", "anneal", "frozen"):
        ms = [m for p, m in res.episodes if p == phase]
        if ms:
            mean = sum(m.delivery_ratio for m in ms) / len(ms)
            print(f"{phase}: {len(ms)} episodes, mean delivery ratio {mean:.4f}")
    print(f"checkpoint {model} ({size} bytes), {res.trainer.steps} train steps")
    return 0


def cmd_eval(settings: cfgmod.Settings) -> int:
    run = settings.run
    params = None
    if "gatmarl" in run.policies:
        if not Path(run.model).is_file():
            raise FormatError(f"checkpoint not found: {run.model}")
        params = load_checkpoint(run.model)
    traces = [] if run.trace else None
    rows = run_monte_carlo(settings.episode(), settings.space(), run.eval_seed, run.eval_episodes,
                           run.policies, params, run.horizons, run.jobs, log=_log, traces=traces)
    out = Path(run.out_dir)
    write_csv(out / "eval_episodes.csv", RESULT_COLUMNS, [m.row() for m in rows])
    summary = {"episodes": run.eval_episodes, "eval_seed": run.eval_seed,
               "rovers": [run.min_rovers, run.max_rovers], "reward": asdict(settings.reward),
               "policies": summarize(rows)}
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if traces is not None:
        tdir = Path(run.trace)
        tdir.mkdir(parents=True, exist_ok=True)
        for tr in traces:
            with (tdir / f"{tr['policy']}_ep{tr['episode']:03d}.jsonl").open("w") as fh:
                head = {k: tr[k] for k in ("policy", "episode", "horizon", "metrics")}
                fh.write(json.dumps(head) + "\n")
                for rec in tr["steps"]:
                    fh.write(json.dumps(rec) + "\n")
    for name, stats in summary["policies"].items():
        r = stats["delivery_ratio"]
        print(f"{name:12s} delivery ratio {r['mean']:.4f} +/- {r['std']:.4f} "
              f"({stats['episodes']} episodes)")
    return 0


def read_episode_log(path: str | Path) -> tuple[dict | None, list[dict]]:
    """Header and step records of a log written by ``eval --trace``."""
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"episode log not found: {p}")
    lines = [ln for ln in p.read_text().splitlines() if ln.strip()]
    if not lines:
        return None, []
    try:
        records = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise FormatError(f"{p}: malformed record: {exc}") from exc
    head, steps = records[0], records[1:]
    if not isinstance(head, dict) or "metrics" not in head:
        raise FormatError(f"{p}: missing header")
    for i, rec in enumerate(steps):
        if not isinstance(rec, dict) or rec.get("step") != i:
            raise FormatError(f"{p}: record {i + 1} is not step {i}")
    return head, steps


def replay_metrics(steps: list[dict]) -> dict:
    """Episode metrics recomputed from step records alone."""
    if not steps:
        return {}
    last = steps[-1]
    changes = sum(steps[i]["edges"] != steps[i - 1]["edges"] for i in range(1, len(steps)))
    created = last["created"]
    return {"created": created, "delivered_unique": last["delivered_unique"],
            "duplicates": last["duplicates"], "dropped": last["dropped"],
            "ratio": round(last["delivered_unique"] / created, 6) if created else 0.0,
            "topology_changes": changes, "steps": len(steps)}


def cmd_replay(args: argparse.Namespace) -> int:
    head, steps = read_episode_log(args.episode_log)
    text = json.dumps(steps, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if head is not None:
        got = replay_metrics(steps)
        want = {k: head["metrics"][k] for k in got}
        if got != want:
            raise FormatError(f"log metrics {want} disagree with its steps {got}")
        _log(f"{len(steps)} steps, metrics consistent with the recorded run")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "replay":
            return cmd_replay(args)
        settings = settings_from_args(args)
        return {"defaults": cmd_defaults, "train": cmd_train, "eval": cmd_eval}[args.command](settings)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConstraintViolation as exc:
        print(f"constraint violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
