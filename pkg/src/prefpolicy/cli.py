"""Command-line pipeline: collect -> label -> train -> eval -> report, plus ablation sweeps.

Every subcommand accepts ``--config FILE`` (flat ``key = value``); explicit flags
override file values. Exit codes: 0 ok, 2 config/validation, 3 runtime/training,
4 network/teacher.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np

from prefpolicy.config import load_kv, write_snapshot
from prefpolicy.data import FrameStore, load_episodes, load_preferences, sample_pairs, save_episodes, save_preferences
from prefpolicy.envs import make_env, scripted_collect
from prefpolicy.errors import ConfigError, MetricError, TeacherError, TeacherNetworkError, TrainingError
from prefpolicy.evaluation import EvalRecord, best_window_stats, evaluate_checkpoints, windowed_metric
from prefpolicy.experiment import ExperimentConfig, run_ablation
from prefpolicy.neural import config_hash, load_checkpoint
from prefpolicy.storage import StorageError
from prefpolicy.teachers import DEFAULT_EPSILON, TeacherConfig, label_pairs, measure_accuracy
from prefpolicy.training import CplConfig, train

log = logging.getLogger("prefpolicy")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_NETWORK = 0, 2, 3, 4

COLLECT_DEFAULTS = dict(
    env="point_reach", episodes=2500, failure_rate=0.5, expert_noise=0.01, seed=1,
    segment_length=16, render=True, out="runs/episodes.ppd",
)
LABEL_DEFAULTS = dict(
    episodes="runs/episodes.ppd", teacher="oracle", n=10000, segment_length=None, epsilon=None,
    flip=0.0, seed=0, task=None, endpoint="http://127.0.0.1:8080/v1/chat", model="gemini-1.5-pro",
    timeout=30.0, max_retries=3, max_concurrency=4, stage1_template="stage1",
    stage2_template="stage2", out="runs/prefs.tsv",
)
TRAIN_DEFAULTS = dict(
    objective="cpl", episodes="runs/episodes.ppd", prefs="runs/prefs.tsv", seeds=[0],
    steps=2000, checkpoint_every=125, alpha=0.1, lam=0.5, gamma=0.99, p_drop=0.25,
    include_equal=False, lr=3e-4, batch_size=64, bc_batch_size=1024, hidden=[256, 256],
    mean_scale=None, bc_warmup_steps=0, dtype="float32", out="runs",
)
EVAL_DEFAULTS = dict(run=None, episodes=200, window=8, aggregate="seed_mean", seed=12345)
REPORT_DEFAULTS = dict(compare=None, names=None, window=8, runs_root="runs", out="runs/report")
ABLATE_DEFAULTS = dict(
    axis="dropout", values=None, env="point_reach", episodes=2500, failure_rate=0.5,
    expert_noise=0.01, n=10000, segment_length=16, data_seed=1, teacher="oracle", epsilon=None,
    flip=0.0, seeds=[0, 1, 2, 3], steps=2000, checkpoint_every=125, alpha=0.1, lam=0.5,
    gamma=0.99, p_drop=0.25, include_equal=False, lr=3e-4, batch_size=64, dtype="float32",
    mean_scale=None, bc_warmup_steps=0, eval_episodes=200, window=8, workers=1, out="runs/ablation",
)


def _resolve(args, defaults: dict) -> dict:
    values = dict(defaults)
    if getattr(args, "config", None):
        file_values = load_kv(args.config)
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        values.update(file_values)
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return values


def _mean_scale(cfg, env) -> float:
    # unset means "squash the mean to the env's action bound"
    return float(env.spec.action_high) if cfg["mean_scale"] is None else float(cfg["mean_scale"])


def _file_digest(path) -> str:
    return f"{zlib.crc32(Path(path).read_bytes()) & 0xFFFFFFFF:08x}"


# -- subcommands -------------------------------------------------------------------


def cmd_collect(args) -> int:
    cfg = _resolve(args, COLLECT_DEFAULTS)
    if int(cfg["episodes"]) <= 0:
        raise ConfigError(f"--episodes must be positive, got {cfg['episodes']}")
    data = scripted_collect(
        cfg["env"], int(cfg["episodes"]), float(cfg["expert_noise"]), float(cfg["failure_rate"]),
        int(cfg["seed"]), render=bool(cfg["render"]), segment_length=int(cfg["segment_length"]),
    )
    out = Path(cfg["out"])
    save_episodes(data, out)
    write_snapshot(out.with_name(out.name + ".config"), cfg)
    print(f"collected {len(data)} {cfg['env']} episodes -> {out}")
    print(f"success rate: {data.success_rate:.4f}")
    return EXIT_OK


def cmd_label(args) -> int:
    cfg = _resolve(args, LABEL_DEFAULTS)
    episodes = load_episodes(cfg["episodes"])
    env = make_env(episodes.metadata["env"])
    L = int(cfg["segment_length"] or episodes.metadata.get("L", 16))
    eps = float(cfg["epsilon"]) if cfg["epsilon"] is not None else DEFAULT_EPSILON[env.spec.name]
    tcfg = TeacherConfig(
        kind=cfg["teacher"], epsilon=eps, p_flip=float(cfg["flip"]), seed=int(cfg["seed"]),
        task_description=cfg["task"] or env.spec.task_description, endpoint=cfg["endpoint"],
        model=cfg["model"], timeout=float(cfg["timeout"]), max_retries=int(cfg["max_retries"]),
        max_concurrency=int(cfg["max_concurrency"]), stage1_template=cfg["stage1_template"],
        stage2_template=cfg["stage2_template"],
    )
    pairs = sample_pairs(episodes, int(cfg["n"]), L, int(cfg["seed"]))
    if tcfg.kind in ("vlm", "vlm_mock"):
        frames = FrameStore(episodes, env.render)
        if tcfg.kind == "vlm_mock":
            from prefpolicy.vlm import MockVlmServer, OracleResponder

            responder = OracleResponder()
            responder.register(pairs, frames, eps)
            with MockVlmServer(responder) as server:
                tcfg = replace(tcfg, endpoint=server.url)
                prefs = label_pairs(pairs, tcfg, episodes, frames)
        else:
            prefs = label_pairs(pairs, tcfg, episodes, frames)
    else:
        prefs = label_pairs(pairs, tcfg, episodes)
    prefs.metadata["episodes_crc32"] = _file_digest(cfg["episodes"])
    out = Path(cfg["out"])
    save_preferences(prefs, out)
    write_snapshot(out.with_name(out.name + ".config"), dict(cfg, epsilon=eps, segment_length=L))
    print(f"labelled {len(prefs)} of {len(pairs)} pairs with {tcfg.kind} -> {out}")
    if len(prefs):
        stats = measure_accuracy(prefs, eps)
        acc = "n/a" if stats["accuracy"] is None else f"{stats['accuracy']:.4f}"
        print(f"accuracy vs oracle: {acc}")
        print(f"equal-label fraction: {stats['equal_fraction']:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    episodes = load_episodes(cfg["episodes"])
    env = make_env(episodes.metadata["env"])
    tcfg = CplConfig(
        objective=cfg["objective"], alpha=float(cfg["alpha"]), lam=float(cfg["lam"]),
        gamma=float(cfg["gamma"]), include_equal=bool(cfg["include_equal"]), p_drop=float(cfg["p_drop"]),
        batch_size=int(cfg["batch_size"]), bc_batch_size=int(cfg["bc_batch_size"]),
        total_steps=int(cfg["steps"]), lr=float(cfg["lr"]), checkpoint_every=int(cfg["checkpoint_every"]),
        hidden=tuple(cfg["hidden"]), compute_dtype=cfg["dtype"], mean_scale=_mean_scale(cfg, env),
        bc_warmup_steps=int(cfg["bc_warmup_steps"]),
    )
    inputs = {"episodes_crc32": _file_digest(cfg["episodes"])}
    if tcfg.objective == "cpl":
        data = load_preferences(cfg["prefs"], episodes)
        inputs["prefs_crc32"] = _file_digest(cfg["prefs"])
    else:
        data = episodes
    snapshot = dict(cfg, env=env.spec.name, **inputs)
    if tcfg.objective == "bc":
        snapshot.pop("prefs")
    # inputs enter the hash by content digest, not by path
    keyed = {k: v for k, v in snapshot.items() if k not in ("out", "episodes", "prefs")}
    run_dir = Path(cfg["out"]) / f"{tcfg.objective}-{config_hash(keyed)}"
    write_snapshot(run_dir / "config.txt", snapshot)
    total = 0.0
    for seed in cfg["seeds"]:
        result = train(data, replace(tcfg, seed=int(seed)), env.spec.state_dim, env.spec.action_dim,
                       run_dir / f"seed_{int(seed)}")
        total += result.wall_seconds
        last = f"{result.log_rows[-1][1]:.4f}" if result.log_rows else "n/a"
        print(f"seed {seed}: {len(result.checkpoints)} checkpoints, final logged loss {last}, "
              f"{result.wall_seconds:.1f}s")
    print(f"run_dir: {run_dir}")
    print(f"wall time: {total:.1f}s")
    return EXIT_OK


def _read_run_config(run_dir: Path) -> dict:
    path = run_dir / "config.txt"
    if not path.exists():
        raise ConfigError(f"{run_dir} is not a training run directory (no config.txt)")
    return load_kv(path)


def cmd_eval(args) -> int:
    cfg = _resolve(args, EVAL_DEFAULTS)
    if not cfg["run"]:
        raise ConfigError("--run is required")
    run_dir = Path(cfg["run"])
    run_cfg = _read_run_config(run_dir)
    seed_dirs = sorted(run_dir.glob("seed_*"), key=lambda p: int(p.name.split("_")[1]))
    if not seed_dirs:
        raise ConfigError(f"{run_dir} has no seed_* directories")
    rows, series, steps = [], [], None
    for sd in seed_dirs:
        ckpts = []
        for f in sorted(sd.glob("ckpt_*.ppc")):
            params, _, step, _ = load_checkpoint(f)
            ckpts.append((step, params))
        rates = evaluate_checkpoints(ckpts, run_cfg["env"], int(cfg["episodes"]), int(cfg["seed"]))
        this_steps = [s for s, _ in ckpts]
        if steps is not None and this_steps != steps:
            raise MetricError(f"{sd}: checkpoint steps differ from other seeds")
        steps = this_steps
        series.append(rates)
        rows += [(sd.name.split("_")[1], s, r) for s, r in zip(this_steps, rates)]
    with open(run_dir / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "step", "success"])
        for seed, step, rate in rows:
            w.writerow([seed, step, f"{rate:.6f}"])
    window = int(cfg["window"])
    metric = windowed_metric(series, window, cfg["aggregate"])
    other = "per_seed" if cfg["aggregate"] == "seed_mean" else "seed_mean"
    alt = windowed_metric(series, window, other)
    _, std, start = best_window_stats(series, window)
    write_snapshot(run_dir / "metrics.txt", {
        "env": run_cfg["env"], "objective": run_cfg.get("objective"), "window": window,
        "aggregate": cfg["aggregate"], "metric": round(metric, 6), f"metric_{other}": round(alt, 6),
        "std": round(std, 6), "window_start_step": steps[start], "eval_episodes": int(cfg["episodes"]),
        "n_seeds": len(series),
    })
    print(f"windowed metric ({cfg['aggregate']}, W={window}): {metric:.4f} +- {std:.4f}")
    print(f"alternate ({other}): {alt:.4f}")
    return EXIT_OK


def _load_eval(run_dir: Path) -> EvalRecord:
    path = run_dir / "eval.csv"
    if not path.exists():
        raise ConfigError(f"{run_dir} has not been evaluated yet; run `prefpolicy eval --run {run_dir}`")
    by_seed: dict[str, list] = {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            by_seed.setdefault(row["seed"], []).append((int(row["step"]), float(row["success"])))
    seeds = sorted(by_seed, key=int)
    steps = [s for s, _ in by_seed[seeds[0]]]
    success = np.array([[r for _, r in by_seed[s]] for s in seeds])
    metrics = load_kv(run_dir / "metrics.txt") if (run_dir / "metrics.txt").exists() else {}
    env = _read_run_config(run_dir)["env"]
    return EvalRecord(env, int(metrics.get("eval_episodes", 1)), steps, success, [int(s) for s in seeds])


def _find_run(item: str, root: Path) -> Path:
    """A run directory, or an objective name resolved to the newest ``<root>/<name>-*`` run."""
    path = Path(item)
    if path.is_dir():
        return path
    matches = sorted(root.glob(f"{item}-*"), key=lambda p: p.stat().st_mtime)
    if not matches:
        raise ConfigError(f"{item!r} is neither a run directory nor a run name under {root}")
    return matches[-1]


def cmd_report(args) -> int:
    from prefpolicy.plotting import plot_curves
    from prefpolicy.report import write_compare_csv

    cfg = _resolve(args, REPORT_DEFAULTS)
    runs = [_find_run(item, Path(cfg["runs_root"])) for item in cfg["compare"] or []]
    if not runs:
        raise ConfigError("--compare needs at least one run directory")
    names = cfg["names"] or [_read_run_config(r).get("objective", r.name) for r in runs]
    if len(names) != len(runs):
        raise ConfigError("--names must match --compare in length")
    if len(set(names)) != len(names):
        names = [f"{n}:{r.name}" for n, r in zip(names, runs)]
    records = {n: _load_eval(r) for n, r in zip(names, runs)}
    out = Path(cfg["out"])
    table = write_compare_csv(records, out / "compare.csv", int(cfg["window"]))
    fig = plot_curves(records, out / "compare.svg", title=next(iter(records.values())).env)
    print(table.read_text(), end="")
    print(f"figure: {fig}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from prefpolicy.plotting import plot_ablation
    from prefpolicy.report import write_ablation_csv

    cfg = _resolve(args, ABLATE_DEFAULTS)
    axis = cfg["axis"]
    values = cfg["values"]
    if values is None:
        values = [0.1, 0.25, 0.4, 0.5] if axis == "dropout" else [True, False]
    if axis == "equal_pref":
        values = [v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes") for v in values]
    else:
        values = [float(v) for v in values]
    env = make_env(cfg["env"])
    eps = float(cfg["epsilon"]) if cfg["epsilon"] is not None else DEFAULT_EPSILON[env.spec.name]
    steps = int(cfg["steps"])
    base = ExperimentConfig(
        env=env.spec.name, episodes=int(cfg["episodes"]), failure_rate=float(cfg["failure_rate"]),
        expert_noise=float(cfg["expert_noise"]), n_pairs=int(cfg["n"]),
        segment_length=int(cfg["segment_length"]), data_seed=int(cfg["data_seed"]),
        teacher=TeacherConfig(kind=cfg["teacher"], epsilon=eps, p_flip=float(cfg["flip"]), seed=int(cfg["data_seed"])),
        train=CplConfig(
            alpha=float(cfg["alpha"]), lam=float(cfg["lam"]), gamma=float(cfg["gamma"]),
            p_drop=float(cfg["p_drop"]), include_equal=bool(cfg["include_equal"]), lr=float(cfg["lr"]),
            batch_size=int(cfg["batch_size"]), total_steps=steps,
            checkpoint_every=int(cfg["checkpoint_every"]), compute_dtype=cfg["dtype"],
            mean_scale=_mean_scale(cfg, env), bc_warmup_steps=int(cfg["bc_warmup_steps"]),
        ),
        eval_episodes=int(cfg["eval_episodes"]), seeds=tuple(int(s) for s in cfg["seeds"]),
        window=int(cfg["window"]),
    )
    if base.teacher.kind not in ("oracle", "noisy_oracle"):
        raise ConfigError("ablation sweeps support the oracle and noisy_oracle teachers")
    report = run_ablation(axis, values, base, workers=int(cfg["workers"]))
    out = Path(cfg["out"])
    write_snapshot(out / f"ablation_{axis}.config", dict(cfg, epsilon=eps))
    table = write_ablation_csv(report, out / f"ablation_{axis}.csv")
    fig = plot_ablation(report, out / f"ablation_{axis}.svg")
    print(table.read_text(), end="")
    print(f"figure: {fig}")
    failed = [c for c in report.cells if c.status != "ok"]
    return EXIT_RUNTIME if failed else EXIT_OK


# -- parser ------------------------------------------------------------------------


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prefpolicy", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="flat key = value config file")
        sp.set_defaults(func=fn)
        return sp

    c = add("collect", cmd_collect, "roll out the scripted collector into an episode file")
    c.add_argument("--env")
    c.add_argument("--episodes", type=int)
    c.add_argument("--failure-rate", dest="failure_rate", type=float)
    c.add_argument("--expert-noise", dest="expert_noise", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--segment-length", dest="segment_length", type=int)
    c.add_argument("--render", type=_bool, help="record frame handles (default true)")
    c.add_argument("--out")

    lb = add("label", cmd_label, "sample segment pairs and label them with a teacher")
    lb.add_argument("--episodes")
    lb.add_argument("--teacher", choices=["oracle", "noisy_oracle", "vlm", "vlm_mock"])
    lb.add_argument("--n", type=int)
    lb.add_argument("--segment-length", dest="segment_length", type=int)
    lb.add_argument("--epsilon", type=float)
    lb.add_argument("--flip", type=float)
    lb.add_argument("--seed", type=int)
    lb.add_argument("--task")
    lb.add_argument("--endpoint")
    lb.add_argument("--model")
    lb.add_argument("--timeout", type=float)
    lb.add_argument("--max-retries", dest="max_retries", type=int)
    lb.add_argument("--max-concurrency", dest="max_concurrency", type=int)
    lb.add_argument("--stage1-template", dest="stage1_template")
    lb.add_argument("--stage2-template", dest="stage2_template")
    lb.add_argument("--out")

    t = add("train", cmd_train, "train a policy with CPL or behavior cloning")
    t.add_argument("--objective", choices=["cpl", "bc"])
    t.add_argument("--episodes")
    t.add_argument("--prefs")
    t.add_argument("--seeds", type=int, nargs="+")
    t.add_argument("--steps", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--lam", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--p-drop", dest="p_drop", type=float)
    t.add_argument("--include-equal", dest="include_equal", type=_bool)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--bc-batch-size", dest="bc_batch_size", type=int)
    t.add_argument("--hidden", type=int, nargs="+")
    t.add_argument("--mean-scale", dest="mean_scale", type=float, help="tanh bound on the mean; 0 = linear")
    t.add_argument("--bc-warmup-steps", dest="bc_warmup_steps", type=int)
    t.add_argument("--dtype", choices=["float32", "float64"])
    t.add_argument("--out", help="root directory; the run lands in <out>/<objective>-<config hash>")

    e = add("eval", cmd_eval, "evaluate every checkpoint of a run and print the windowed metric")
    e.add_argument("--run")
    e.add_argument("--episodes", type=int)
    e.add_argument("--window", type=int)
    e.add_argument("--aggregate", choices=["seed_mean", "per_seed"])
    e.add_argument("--seed", type=int)

    r = add("report", cmd_report, "compare evaluated runs in a table and a learning-curve figure")
    r.add_argument("--compare", nargs="+", help="run directories or objective names (newest match wins)")
    r.add_argument("--names", nargs="+")
    r.add_argument("--window", type=int)
    r.add_argument("--runs-root", dest="runs_root", help="where bare names like `cpl` are looked up")
    r.add_argument("--out")

    a = add("ablate", cmd_ablate, "sweep equal-preference handling or dropout over seeds")
    a.add_argument("--axis", choices=["equal_pref", "dropout"])
    a.add_argument("--values", nargs="+")
    a.add_argument("--env")
    a.add_argument("--episodes", type=int)
    a.add_argument("--failure-rate", dest="failure_rate", type=float)
    a.add_argument("--n", type=int)
    a.add_argument("--teacher", choices=["oracle", "noisy_oracle"])
    a.add_argument("--epsilon", type=float)
    a.add_argument("--flip", type=float)
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--steps", type=int)
    a.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    a.add_argument("--p-drop", dest="p_drop", type=float)
    a.add_argument("--mean-scale", dest="mean_scale", type=float)
    a.add_argument("--bc-warmup-steps", dest="bc_warmup_steps", type=int)
    a.add_argument("--eval-episodes", dest="eval_episodes", type=int)
    a.add_argument("--dtype", choices=["float32", "float64"])
    a.add_argument("--workers", type=int, help="parallel training processes per cell")
    a.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TeacherNetworkError as exc:
        print(f"network error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except (ConfigError, StorageError, FileNotFoundError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TeacherError as exc:
        print(f"teacher error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except (TrainingError, MetricError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
