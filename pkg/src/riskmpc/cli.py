"""Command-line entry points binding the pipeline stages together.

Stages read their predecessors' checkpoints from the output directory:

  warmup    -> out/warmup_model.npz
  interact  -> out/world_model.npz, out/progress.csv
  distill   -> out/proposer.npz, out/distill_losses.csv
  evaluate  -> out/suite_<policy>.json
  rollout   -> out/rollout_<scenario>.jsonl, out/scores_<scenario>.csv
  plot      -> out/plot_<scenario>.png

Exit codes: 0 ok, 2 config error, 3 missing/invalid checkpoint, 4 runtime.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import env as E
from . import scenarios
from .control import export_scores_csv
from .cvae import ActionProposer
from .harness import (POLICIES, RunManifest, collect_warmup_episodes,
                      distill_proposer, evaluate, run_episode,
                      train_world_model, write_progress_csv)
from .interaction import ReplayBuffer, InteractionLoop, refine, warmup
from .planner import ModelPlanner, OraclePlanner, enumerated_candidates
from .tensor import Adam, lr_schedule
from .worldmodel import WorldModel


class ConfigError(Exception):
    exit_code = 2


class CheckpointError(Exception):
    exit_code = 3


def _load_manifest(args):
    if args.manifest and os.path.exists(args.manifest):
        manifest = RunManifest.load(args.manifest)
    elif args.manifest:
        raise ConfigError(f"manifest not found: {args.manifest}")
    else:
        manifest = RunManifest()
    if args.seed is not None:
        manifest.master_seed = args.seed
    return manifest


def _model_path(out, name):
    path = os.path.join(out, name)
    if not os.path.exists(path):
        raise CheckpointError(f"missing checkpoint: {path}")
    return path


def _fresh_model(manifest):
    rng = np.random.default_rng(manifest.master_seed)
    return WorldModel(manifest.model, rng), rng


def _load_model(manifest, out, names=("world_model.npz", "warmup_model.npz")):
    model, rng = _fresh_model(manifest)
    for name in names:
        path = os.path.join(out, name)
        if os.path.exists(path):
            model.load(path)
            return model, rng
    raise CheckpointError(f"no model checkpoint in {out} (tried {names})")


def _load_suite(args):
    if args.suite:
        if not os.path.exists(args.suite):
            raise ConfigError(f"suite directory not found: {args.suite}")
        files = sorted(f for f in os.listdir(args.suite) if f.endswith(".json"))
        return [E.Scenario.load(os.path.join(args.suite, f)) for f in files]
    return scenarios.make_suite()


def cmd_warmup(args):
    manifest = _load_manifest(args)
    os.makedirs(args.out, exist_ok=True)
    model, rng = _fresh_model(manifest)
    opt = Adam(model.param_list())
    budget = int(manifest.warmup_fraction * manifest.total_segments
                 * manifest.cost.horizon)
    episodes = collect_warmup_episodes(manifest, rng, budget) if budget else []
    warmup(model, episodes, opt, rng, steps=manifest.warmup_steps,
           batch_size=manifest.batch_size, lr=lr_schedule(0.0))
    model.save(os.path.join(args.out, "warmup_model.npz"))
    manifest.save(os.path.join(args.out, "manifest.json"))
    print(f"warm-up done: {len(episodes)} logged episodes, "
          f"checkpoint -> {args.out}/warmup_model.npz")


def cmd_interact(args):
    manifest = _load_manifest(args)
    os.makedirs(args.out, exist_ok=True)
    art = train_world_model(manifest)
    art.model.save(os.path.join(args.out, "world_model.npz"))
    write_progress_csv(os.path.join(args.out, "progress.csv"),
                       art.segment_records)
    manifest.save(os.path.join(args.out, "manifest.json"))
    print(f"interaction done: {len(art.segment_records)} segments, "
          f"buffer {len(art.buffer)} frames")


def cmd_distill(args):
    manifest = _load_manifest(args)
    model, _ = _load_model(manifest, args.out)
    proposer, history = distill_proposer(manifest, model)
    proposer.save(os.path.join(args.out, "proposer.npz"))
    with open(os.path.join(args.out, "distill_losses.csv"), "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["step", "recon", "kl", "contrastive", "total"])
        for i, p in enumerate(history):
            wr.writerow([i, repr(p.recon), repr(p.kl),
                         repr(p.contrastive), repr(p.total)])
    print(f"distillation done: {len(history)} steps")


def _load_proposer(manifest, out):
    rng = np.random.default_rng(manifest.master_seed + 1)
    proposer = ActionProposer(rng, manifest.cost.horizon, 2 * manifest.model.d)
    proposer.load(_model_path(out, "proposer.npz"))
    return proposer


def cmd_evaluate(args):
    manifest = _load_manifest(args)
    if args.policy not in POLICIES:
        raise ConfigError(f"unknown policy {args.policy!r}; choose from {POLICIES}")
    suite = _load_suite(args)
    seeds = [manifest.master_seed + i for i in range(args.eval_seeds)]
    model = proposer = None
    if args.policy not in ("random", "oracle-mpc"):
        model, _ = _load_model(manifest, args.out)
    if args.policy in ("rawmpc", "rawmpc-no-selection"):
        proposer = _load_proposer(manifest, args.out)

    def one(pair):
        sc, seed = pair
        return run_episode(args.policy, sc, seed, model=model,
                           proposer=proposer, cost_cfg=manifest.cost)

    pairs = [(sc, seed) for sc in suite for seed in seeds]
    if args.parallel > 1:
        with ThreadPoolExecutor(max_workers=args.parallel) as pool:
            episodes = list(pool.map(one, pairs))
    else:
        episodes = [one(p) for p in pairs]
    from .harness import SuiteResult
    result = SuiteResult(policy=args.policy, episodes=episodes)
    path = os.path.join(args.out, f"suite_{args.policy}.json")
    result.save(path)
    print(f"{args.policy}: SR={result.success_rate:.1f}% "
          f"DS*={result.driving_score:.1f} -> {path}")


def cmd_rollout(args):
    manifest = _load_manifest(args)
    suite = _load_suite(args)
    matches = [s for s in suite if s.name == args.scenario] if args.scenario \
        else suite[:1]
    if not matches:
        raise ConfigError(f"scenario {args.scenario!r} not in suite")
    scenario = matches[0]
    env = E.MicroDriveEnv(scenario)
    oracle = OraclePlanner(env, manifest.cost)
    records = []
    scores = None
    while not env.done:
        cands = enumerated_candidates(manifest.cost.horizon)
        idx, scores = oracle.plan(cands)
        for action in cands[idx]:
            grid, ego = env.observe()
            _, _, events, done, reason = env.step(E.ActionStep.from_array(action))
            records.append({"step": env.t, "action": list(map(float, action)),
                            "ego": [ego.x, ego.y, ego.heading, ego.speed],
                            "events": list(map(float, events)),
                            "done_reason": reason})
            if done:
                break
    os.makedirs(args.out, exist_ok=True)
    E.write_episode_log(os.path.join(args.out, f"rollout_{scenario.name}.jsonl"),
                        records)
    export_scores_csv(os.path.join(args.out, f"scores_{scenario.name}.csv"),
                      scores)
    print(f"rollout {scenario.name}: {len(records)} steps, "
          f"outcome {env.done_reason}")


def cmd_plot(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    manifest = _load_manifest(args)
    suite = _load_suite(args)
    matches = [s for s in suite if s.name == args.scenario] if args.scenario \
        else suite[:1]
    if not matches:
        raise ConfigError(f"scenario {args.scenario!r} not in suite")
    scenario = matches[0]
    log_path = os.path.join(args.out, f"rollout_{scenario.name}.jsonl")
    if not os.path.exists(log_path):
        raise CheckpointError(f"run `rollout` first: missing {log_path}")
    records = E.read_episode_log(log_path)
    xs = [r["ego"][0] for r in records]
    ys = [r["ego"][1] for r in records]
    fig, ax = plt.subplots(figsize=(8, 4))
    lane = np.array(scenario.lane_points)
    ax.plot(lane[:, 0], lane[:, 1], "k--", lw=1, label="lane centre")
    ax.plot(xs, ys, "b-", lw=2, label="ego")
    ax.plot(*scenario.target, "g*", ms=15, label="target")
    for v in scenario.vehicles:
        ax.plot(*v["position"], "rs", ms=8)
    for p in scenario.pedestrians:
        ax.plot(*p["position"], "m^", ms=8)
    ax.set_aspect("equal")
    ax.legend()
    ax.set_title(scenario.name)
    out = os.path.join(args.out, f"plot_{scenario.name}.png")
    fig.savefig(out, dpi=120)
    print(f"plot -> {out}")


def build_parser():
    p = argparse.ArgumentParser(prog="riskmpc")
    p.add_argument("--manifest", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--suite", default=None,
                   help="directory of scenario JSON files (default: built-in suite)")
    p.add_argument("--out", default="runs/default")
    p.add_argument("--parallel", type=int, default=1)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("warmup")
    sub.add_parser("interact")
    sub.add_parser("distill")
    ev = sub.add_parser("evaluate")
    ev.add_argument("--policy", required=True)
    ev.add_argument("--eval-seeds", type=int, default=3)
    ro = sub.add_parser("rollout")
    ro.add_argument("--scenario", default=None)
    pl = sub.add_parser("plot")
    pl.add_argument("--scenario", default=None)
    return p


COMMANDS = {"warmup": cmd_warmup, "interact": cmd_interact,
            "distill": cmd_distill, "evaluate": cmd_evaluate,
            "rollout": cmd_rollout, "plot": cmd_plot}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # runtime failures
        print(f"runtime error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
