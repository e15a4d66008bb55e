"""Command-line front end.

Subcommands: ``generate-keypoints``, ``train``, ``eval``, ``simulate`` and
``plot``. Configuration is a single INI file with the sections ``scene``,
``guidance``, ``training``, ``paths``, ``eval`` and ``output``; command-line
flags override individual fields and ``--set section.key=value`` reaches any
other field. A run directory holds::

    config.ini        resolved configuration, including the seed
    keypoints.txt     keypoint set used (guided runs)
    metrics.jsonl     one JSON record per epoch
    timing.jsonl      wallclock per epoch (kept apart so metrics are reproducible)
    forward.ckpt, backward.ckpt
    summary.txt       terminal W2 per initial condition
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from .driftnet import load_checkpoint
from .guidance import GuidanceContext
from .io import (read_keypoints, read_trajectory_csv, render_svg, snapshot_indices,
                 write_keypoints, write_trajectory_csv)
from .matching import (DivergenceError, TrainConfig, TrainingAbort, TrainState, evaluate,
                       run_fsbm)
from .paths import SplineOptions
from .scenes import INITIAL_CONDITIONS, generate_keypoints, make_scene
from .transport import exact_w2

SNAPSHOT_TIMES = (0.0, 1 / 3, 2 / 3, 1.0)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scene: str = "stunnel"
    sigma: float = 1.0
    dim: int = 10
    polarize_scale: float = 1.0
    alpha: float = 1.0
    n_keypoints: int = 100
    keypoint_file: str = ""
    pairing_epsilon: float = 0.01
    epochs: int = 20
    pairs: int = 1024
    inner_steps: int = 500
    lr: float = 1e-3
    batch: int = 256
    sde_steps: int = 100
    hidden: int = 128
    n_blocks: int = 4
    seed: int | None = None
    K: int = 8
    mc_times: int = 8
    mc_samples: int = 16
    spline_steps: int = 200
    spline_lr: float = 0.05
    n_eval: int = 2048
    initial_condition: str = "Vanilla"
    metrics: str = "w2"
    output: str = "runs/default"

    SECTIONS = {
        "scene": ("scene", "sigma", "dim", "polarize_scale"),
        "guidance": ("alpha", "n_keypoints", "keypoint_file", "pairing_epsilon"),
        "training": ("epochs", "pairs", "inner_steps", "lr", "batch", "sde_steps", "hidden",
                     "n_blocks", "seed"),
        "paths": ("K", "mc_times", "mc_samples", "spline_steps", "spline_lr"),
        "eval": ("n_eval", "initial_condition", "metrics"),
        "output": ("output",),
    }

    def validate(self, need_seed: bool = False) -> "RunConfig":
        counts = ("n_keypoints", "epochs", "pairs", "inner_steps", "batch", "sde_steps",
                  "hidden", "n_blocks", "mc_times", "mc_samples", "spline_steps", "n_eval", "dim")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.K <= 30:
            raise ConfigError("K must lie in [0, 30]")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.sigma <= 0:
            raise ConfigError("sigma must be > 0")
        if self.scene not in ("stunnel", "vneck", "opinion"):
            raise ConfigError(f"unknown scene {self.scene!r}")
        if self.initial_condition not in INITIAL_CONDITIONS:
            raise ConfigError(f"unknown initial condition {self.initial_condition!r}")
        if need_seed and self.seed is None:
            raise ConfigError("a seed is required")
        return self

    def set(self, key: str, value) -> None:
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise ConfigError(f"unknown config field {key!r}")
        kind = types[key]
        if value is None or value == "":
            parsed = None if key == "seed" else value
        elif "int" in str(kind):
            parsed = int(value)
        elif "float" in str(kind):
            parsed = float(value)
        else:
            parsed = str(value)
        setattr(self, key, parsed)

    @classmethod
    def from_ini(cls, path) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        if not cp.read(path):
            raise ConfigError(f"cannot read config {path}")
        cfg = cls()
        for section in cp.sections():
            if section not in cls.SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in cp[section].items():
                if key not in cls.SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                cfg.set(key, value)
        return cfg

    def to_ini(self, path) -> None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for section, keys in self.SECTIONS.items():
            cp[section] = {k: "" if getattr(self, k) is None else repr(getattr(self, k))
                           if isinstance(getattr(self, k), float) else str(getattr(self, k))
                           for k in keys}
        with open(path, "w") as fh:
            cp.write(fh)

    def scene_obj(self):
        if self.scene == "opinion":
            return make_scene("opinion", dim=self.dim, sigma=self.sigma,
                              polarize_scale=self.polarize_scale)
        return make_scene(self.scene, sigma=self.sigma)

    def spline_options(self) -> SplineOptions:
        return SplineOptions(n_knots=self.K, steps=self.spline_steps, lr=self.spline_lr,
                             mc_times=self.mc_times, mc_samples=self.mc_samples)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, pairs=self.pairs, inner_steps=self.inner_steps,
                           batch=self.batch, lr=self.lr, sde_steps=self.sde_steps,
                           hidden=self.hidden, n_blocks=self.n_blocks, n_eval=self.n_eval,
                           spline=self.spline_options(),
                           seed=0 if self.seed is None else self.seed)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_ini(args.config) if getattr(args, "config", None) else RunConfig()
    for key in ("scene", "alpha", "n_keypoints", "keypoint_file", "epochs", "pairs", "seed",
                "n_eval", "initial_condition", "output", "sigma", "dim"):
        val = getattr(args, key, None)
        if val is not None:
            cfg.set(key, val)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.split(".")[-1], value)
    return cfg


def cmd_generate_keypoints(cfg: RunConfig, out: str) -> str:
    cfg.validate()
    scene = cfg.scene_obj()
    rng = np.random.default_rng([0 if cfg.seed is None else cfg.seed, 1])
    ks = generate_keypoints(scene, cfg.n_keypoints, cfg.pairing_epsilon, rng)
    write_keypoints(ks, out)
    src, tgt = ks.source_points, ks.target_points
    paired = float(((src - tgt) ** 2).sum(1).mean())
    best = exact_w2(src, tgt) ** 2
    print(f"wrote {ks.n} keypoints (d={ks.dim}, T={ks.time_grid.size}) to {out}")
    print(f"pairing cost {paired:.4f}  exact assignment {best:.4f}  ratio {paired / best:.4f}")
    return out


def _guidance(cfg: RunConfig, scene, run_dir: str | None):
    if cfg.alpha == 0:
        return None
    if not cfg.keypoint_file:
        raise ConfigError("alpha > 0 needs a keypoint file (run generate-keypoints first)")
    if not os.path.exists(cfg.keypoint_file):
        raise ConfigError(f"keypoint file {cfg.keypoint_file} does not exist")
    ks = read_keypoints(cfg.keypoint_file)
    if ks.dim != scene.dim:
        raise ConfigError(f"keypoints have d={ks.dim}, scene has d={scene.dim}")
    if run_dir:
        write_keypoints(ks, os.path.join(run_dir, "keypoints.txt"))
    return GuidanceContext(ks, cfg.alpha)


def _summary_rows(state, scene, cfg: RunConfig):
    rows = []
    modes = list(INITIAL_CONDITIONS) if scene.is_crowd else ["source"]
    for k, mode in enumerate(modes):
        rng = np.random.default_rng([cfg.seed or 0, 31, k])
        ev = evaluate(state, scene, cfg.n_eval, rng, mode if scene.is_crowd else "Vanilla",
                      cfg.sde_steps, with_kl=not scene.is_crowd)
        rows.append((mode, ev["w2"], ev.get("kl")))
    return rows


def cmd_train(cfg: RunConfig) -> str:
    cfg.validate(need_seed=True)
    run_dir = cfg.output
    os.makedirs(run_dir, exist_ok=True)
    scene = cfg.scene_obj()
    guidance = _guidance(cfg, scene, run_dir)
    cfg.to_ini(os.path.join(run_dir, "config.ini"))

    def log(rec):
        print(f"epoch {rec['epoch']:3d} {rec['direction']:8s} bm_loss {rec['bm_loss']:.4f} "
              f"W2 {rec['w2']:.4f}", flush=True)

    state = run_fsbm(scene, guidance, cfg.train_config(), run_dir, log)
    rows = _summary_rows(state, scene, cfg)
    lines = [f"{'initial condition':20s} {'W2':>10s}" + ("" if scene.is_crowd else f" {'KL':>10s}")]
    for mode, w2, kl in rows:
        lines.append(f"{mode:20s} {w2:10.4f}" + ("" if kl is None else f" {kl:10.4f}"))
    text = "\n".join(lines) + "\n"
    with open(os.path.join(run_dir, "summary.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")
    return run_dir


def _state_from_checkpoint(path, scene) -> TrainState:
    net = load_checkpoint(path)
    if net.dim != scene.dim:
        raise ConfigError(f"checkpoint has d={net.dim}, scene has d={scene.dim}")
    state = TrainState(net, net, None, None)
    return state


def cmd_eval(cfg: RunConfig, checkpoint: str, out_dir: str, seed: int | None = None) -> dict:
    cfg.validate()
    scene = cfg.scene_obj()
    state = _state_from_checkpoint(checkpoint, scene)
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([0 if seed is None else seed, 97])
    ev = evaluate(state, scene, cfg.n_eval, rng, cfg.initial_condition, cfg.sde_steps,
                  with_kl=("kl" in cfg.metrics) or not scene.is_crowd)
    traj = ev.pop("trajectory")
    os.makedirs(out_dir, exist_ok=True)
    tag = cfg.initial_condition if scene.is_crowd else "opinion"
    rows = snapshot_indices(traj.shape[0] - 1, SNAPSHOT_TIMES)
    times = np.linspace(0.0, 1.0, traj.shape[0])
    write_trajectory_csv(traj, os.path.join(out_dir, f"trajectory_{tag}.csv"), times, rows)
    target = scene.sample_target(cfg.n_eval, np.random.default_rng([0 if seed is None else seed, 98]))
    svg = render_svg([traj[r] for r in rows], times[rows], scene.obstacles, target)
    with open(os.path.join(out_dir, f"snapshots_{tag}.svg"), "w") as fh:
        fh.write(svg)
    ev["initial_mean"] = traj[0].mean(0).tolist()
    with open(os.path.join(out_dir, f"eval_{tag}.json"), "w") as fh:
        json.dump(ev, fh, sort_keys=True)
    print(json.dumps(ev, sort_keys=True))
    return ev


def cmd_simulate(cfg: RunConfig, out: str, n: int, steps: int, seed: int) -> str:
    """Reference dynamics only (zero learned drift)."""
    cfg.validate()
    scene = cfg.scene_obj()
    rng = np.random.default_rng(seed)
    if scene.is_crowd:
        x0 = INITIAL_CONDITIONS[cfg.initial_condition].sample(n, rng)
    else:
        x0 = scene.sample_source(n, rng)
    from .matching import simulate
    traj = simulate(None, scene, x0, steps, rng, controlled=False)
    rows = snapshot_indices(steps, SNAPSHOT_TIMES)
    write_trajectory_csv(traj, out, np.linspace(0, 1, steps + 1), rows)
    print(f"wrote {n} reference trajectories to {out}")
    return out


def cmd_plot(csv_path: str, out: str, scene_name: str | None = None) -> str:
    times, traj = read_trajectory_csv(csv_path)
    obstacles = make_scene(scene_name).obstacles if scene_name in ("stunnel", "vneck") else ()
    with open(out, "w") as fh:
        fh.write(render_svg(list(traj), times, obstacles))
    print(f"wrote {out}")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsbm", description="Feedback Schrodinger bridge matching")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_required=False):
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--scene", choices=["stunnel", "vneck", "opinion"])
        sp.add_argument("--sigma", type=float)
        sp.add_argument("--dim", type=int)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--n-keypoints", dest="n_keypoints", type=int)
        sp.add_argument("--keypoint-file", dest="keypoint_file")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--pairs", type=int)
        sp.add_argument("--n-eval", dest="n_eval", type=int)
        sp.add_argument("--initial-condition", dest="initial_condition",
                        choices=list(INITIAL_CONDITIONS))
        sp.add_argument("--seed", type=int, required=seed_required)
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    g = sub.add_parser("generate-keypoints", help="pair and connect keypoint samples")
    common(g)
    g.add_argument("--out", required=True, help="keypoint file to write")
    t = sub.add_parser("train", help="run feedback bridge matching")
    common(t, seed_required=True)
    t.add_argument("--output", help="run directory")
    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--run-dir", help="run directory (config and checkpoint defaults)")
    e.add_argument("--checkpoint")
    e.add_argument("--out", help="directory for metrics, CSV and SVG")
    s = sub.add_parser("simulate", help="simulate the reference SDE")
    common(s)
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--out", required=True)
    pl = sub.add_parser("plot", help="render SVG snapshots from a trajectory CSV")
    pl.add_argument("csv")
    pl.add_argument("--scene")
    pl.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            cmd_plot(args.csv, args.out, args.scene)
            return 0
        if args.command == "eval" and args.run_dir and not args.config:
            args.config = os.path.join(args.run_dir, "config.ini")
        cfg = _load_config(args)
        if args.command == "generate-keypoints":
            cmd_generate_keypoints(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            ckpt = args.checkpoint or (os.path.join(args.run_dir, "forward.ckpt") if args.run_dir
                                       else None)
            if ckpt is None:
                raise ConfigError("eval needs --checkpoint or --run-dir")
            out = args.out or args.run_dir or "."
            cmd_eval(cfg, ckpt, out, args.seed)
        elif args.command == "simulate":
            cmd_simulate(cfg, args.out, args.n, args.steps, 0 if cfg.seed is None else cfg.seed)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (TrainingAbort, DivergenceError) as err:
        print(f"aborted: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
