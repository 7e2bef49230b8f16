"""Command line entry point: ``volpose {simulate,run,eval,benchmark,ablate}``.

Settings come from an optional TOML file with ``[run]``, ``[scene]`` and
``[tracker]`` tables; command line flags override the file.  Exit status is
0 on success, 1 for configuration problems and 2 for failures while running.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .errors import ConfigError, VolposeError
from .geometry import load_rig, save_rig
from .metrics import reports_to_csv
from .pipeline import (RunConfig, TrackOutput, ablate, benchmark, latency_csv, load_inputs, run_pipeline,
                       score, write_outputs)
from .posecube import Pose3D
from .simkit import SceneConfig, load_scene, save_scene
from .track import TrackerConfig

# TOML key -> RunConfig field, for keys whose names differ
RUN_KEYS = {
    "rig": "rig_path", "scene": "scene_path", "output": "output_dir", "pitch_mm": "pitch",
    "gru_params": "gru_params_path",
}
TRACKER_KEYS = {"gate_mm": "gate"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"command line: {message}")


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _section(table, name: str, cls, renames: dict, path) -> dict:
    raw = table.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: [{name}] must be a table")
    out = {}
    allowed = _fields(cls)
    for key, value in raw.items():
        field = renames.get(key, key)
        if field not in allowed or (name == "run" and field in ("scene", "tracker")):
            raise ConfigError(f"{path}: unknown key {name}.{key}")
        out[field] = value
    return out


def load_config(path: str | None) -> RunConfig:
    """Build a :class:`RunConfig` from a TOML file (or defaults when ``path`` is None)."""
    table = {}
    if path is not None:
        p = Path(path)
        try:
            table = tomllib.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"{path}: config file not found") from None
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"{path}: cannot parse config ({exc})") from None
        unknown = set(table) - {"run", "scene", "tracker"}
        if unknown:
            raise ConfigError(f"{path}: unknown table(s) {sorted(unknown)}")
        base = p.parent
    else:
        base = Path(".")
    run = _section(table, "run", RunConfig, RUN_KEYS, path)
    for key in ("rig_path", "scene_path", "output_dir", "gru_params_path"):
        if key in run:
            run[key] = str(base / run[key])
    try:
        scene = SceneConfig(**_section(table, "scene", SceneConfig, {}, path))
        tracker = TrackerConfig(**_section(table, "tracker", TrackerConfig, TRACKER_KEYS, path))
        return RunConfig(scene=scene, tracker=tracker, **run)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'defaults'}: {exc}") from None


def apply_flags(cfg: RunConfig, args) -> RunConfig:
    upd = {}
    if getattr(args, "seed", None) is not None:
        upd["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        upd["threads"] = args.threads
    if getattr(args, "pitch_mm", None) is not None:
        if not args.pitch_mm > 0:
            raise ConfigError("--pitch-mm must be positive")
        upd["pitch"] = args.pitch_mm
    if getattr(args, "no_warp", False):
        upd["warp"] = False
    if getattr(args, "forecast_steps", None) is not None:
        if args.forecast_steps < 0:
            raise ConfigError("--forecast-steps must be >= 0")
        upd["forecast_steps"] = args.forecast_steps
    if getattr(args, "out", None) is not None:
        upd["output_dir"] = args.out
    if getattr(args, "gate_mm", None) is not None:
        if not args.gate_mm > 0:
            raise ConfigError("--gate-mm must be positive")
        upd["tracker"] = dataclasses.replace(cfg.tracker, gate=args.gate_mm)
    return dataclasses.replace(cfg, **upd)


def _check_inputs(cfg: RunConfig) -> None:
    for flag, path in (("rig", cfg.rig_path), ("scene", cfg.scene_path), ("gru_params", cfg.gru_params_path)):
        if path is not None and not Path(path).is_file():
            raise ConfigError(f"{path}: {flag} file not found")


def _out_dir(cfg: RunConfig, default: str) -> Path:
    return Path(cfg.output_dir or default)


def cmd_simulate(cfg: RunConfig, args) -> None:
    rig, scene, _ = load_inputs(dataclasses.replace(cfg, scene_path=None))
    out = _out_dir(cfg, "sim")
    out.mkdir(parents=True, exist_ok=True)
    save_rig(rig, out / "rig.json")
    save_scene(scene, out / "scene.jsonl")
    print(f"wrote {out / 'rig.json'} and {out / 'scene.jsonl'} ({len(scene)} frames)")


def _summary(report) -> str:
    r = report.row()
    return " ".join(f"{k}={r[k]}" for k in ("run", "mpjpe", "ap50", "pcp3d", "mota", "idf1", "forecast_mpjpe"))


def cmd_run(cfg: RunConfig, args) -> None:
    result = run_pipeline(cfg)
    out = _out_dir(cfg, "out")
    write_outputs(result, out, svg=cfg.svg or args.svg)
    print(_summary(result.report))
    print(f"median frame {np.median(result.frame_ms):.1f} ms; outputs in {out}")


def read_results(path) -> list[list[TrackOutput]]:
    frames: dict[int, list[TrackOutput]] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            outs = []
            for tr in rec["tracks"]:
                fc = [(int(f["dt_frames"]), Pose3D(np.array(f["joints"]), None, int(tr["tid"])))
                      for f in tr.get("forecast", [])]
                outs.append(TrackOutput(int(tr["tid"]), Pose3D(np.array(tr["joints"]), None, int(tr["tid"])),
                                        float(tr["conf"]), fc))
            frames[int(rec["t"])] = outs
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}:{n}: malformed results record ({exc})") from None
    n = max(frames) + 1 if frames else 0
    return [frames.get(t, []) for t in range(n)]


def cmd_eval(cfg: RunConfig, args) -> None:
    if not args.results or not Path(args.results).is_file():
        raise ConfigError(f"{args.results}: --results file not found")
    scene_path = args.scene or cfg.scene_path
    if not scene_path or not Path(scene_path).is_file():
        raise ConfigError(f"{scene_path}: --scene file not found")
    rig = load_rig(args.rig or cfg.rig_path) if (args.rig or cfg.rig_path) else None
    scene = load_scene(scene_path, rig)
    frames = read_results(args.results)
    frames += [[] for _ in range(len(scene) - len(frames))]
    dts = sorted({dt for fr in frames for o in fr for dt, _ in o.forecasts})
    stride = dts[0] if dts else cfg.forecast_stride
    steps = len(dts)
    report = score(frames[:len(scene)], scene, dataclasses.replace(cfg, forecast_steps=steps, forecast_stride=stride))
    out = _out_dir(cfg, str(Path(args.results).parent))
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(reports_to_csv([report]))
    (out / "metrics.json").write_text(report.to_json() + "\n")
    print(_summary(report))


def cmd_benchmark(cfg: RunConfig, args) -> None:
    rows = benchmark(cfg, args.frames)
    out = _out_dir(cfg, "bench")
    out.mkdir(parents=True, exist_ok=True)
    text = latency_csv(rows)
    (out / "latency.csv").write_text(text)
    print(text, end="")


def cmd_ablate(cfg: RunConfig, args) -> None:
    reports = ablate(cfg)
    out = _out_dir(cfg, "ablate")
    out.mkdir(parents=True, exist_ok=True)
    text = reports_to_csv(reports)
    (out / "metrics.csv").write_text(text)
    print(text, end="")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="volpose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="TOML file with [run], [scene] and [tracker] tables")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--pitch-mm", type=float, dest="pitch_mm")
        p.add_argument("--gate-mm", type=float, dest="gate_mm")
        p.add_argument("--no-warp", action="store_true", dest="no_warp")
        p.add_argument("--forecast-steps", type=int, dest="forecast_steps")
        return p

    common(sub.add_parser("simulate", help="write rig.json and scene.jsonl"))
    run = common(sub.add_parser("run", help="run the pipeline and score it"))
    run.add_argument("--svg", action="store_true", help="also write a top-down trajectory plot")
    ev = common(sub.add_parser("eval", help="score an existing results.jsonl"))
    ev.add_argument("--results", required=True)
    ev.add_argument("--scene")
    ev.add_argument("--rig")
    bench = common(sub.add_parser("benchmark", help="per-stage latency table"))
    bench.add_argument("--frames", type=int, default=100)
    common(sub.add_parser("ablate", help="metric rows for switched-off variants"))
    return parser


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "eval": cmd_eval,
            "benchmark": cmd_benchmark, "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = apply_flags(load_config(args.config), args)
        _check_inputs(cfg)
        if args.command == "benchmark" and args.frames < 1:
            raise ConfigError("--frames must be >= 1")
    except ConfigError as exc:
        print(f"volpose: config error: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"volpose: config error: {exc}", file=sys.stderr)
        return 1
    except (VolposeError, ValueError, OSError) as exc:
        where = getattr(exc, "filename", None) or args.config
        prefix = f"{where}: " if where else ""
        print(f"volpose: error: {prefix}{exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
