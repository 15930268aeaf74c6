"""Command-line front door: ``collect``, ``train``, ``eval``, ``oracle`` and ``analyze``.

Exit codes: 0 success, 1 configuration error, 2 runtime error,
3 certification failure.

Every ``train`` seed gets its own directory ``<out>/seed_<n>/`` holding

* ``config.ini``: the fully resolved configuration,
* ``manifest.json``: config, explicit keys, seed, content hash, desk-scale tags
  and hashes of the produced artifacts,
* ``metrics.csv``: one row per logging interval,
* ``betas.npz``: the logged coefficients of both phases,
* ``checkpoints/offline_end.ckpt`` and ``checkpoints/final.ckpt``,
* ``report.md``: a short human-readable summary.

``train --manifest <run>/manifest.json`` replays a recorded run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, from_mapping, load_config

log = logging.getLogger("famo2o")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CERT = 0, 1, 2, 3
ANALYSES = ("beta_stats", "beta_map", "trajectories", "diff")


class RunError(RuntimeError):
    """Failure after the configuration was accepted."""


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- collect -----------------------------------------------------------------


def cmd_collect(config: RunConfig, seed: int, out: Path) -> Path:
    """Write ``dataset.jsonl`` plus ``returns.csv`` (episode, return, route)."""
    from .datastore import save_jsonl, write_returns_csv
    from .trainer import build_dataset

    if config.dataset_episodes <= 0:
        raise ConfigError("dataset_episodes: must be positive to collect")
    config = config.with_overrides(dataset_path="")
    data, labels = build_dataset(config, seed)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.jsonl"
    save_jsonl(path, data)
    write_returns_csv(out / "returns.csv", data, labels)
    log.info("collected %d transitions into %s", len(data), path)
    return path


# --- train -------------------------------------------------------------------


def _manifest(run, config: RunConfig, run_dir: Path) -> dict:
    desk = config.desk_scale_keys()
    artifacts = {"metrics.csv": file_sha256(run_dir / "metrics.csv")}
    for ckpt in sorted((run_dir / "checkpoints").glob("*.ckpt")):
        artifacts[f"checkpoints/{ckpt.name}"] = file_sha256(ckpt)
    manifest = {
        "seed": run.seed,
        "config": config.to_dict(),
        "explicit": sorted(config.explicit),
        "content_hash": config.content_hash(str(run.seed).encode()),
        "desk_scale": bool(desk),
        "desk_scale_keys": desk,
        "artifacts": artifacts,
    }
    if config.dataset_path:
        manifest["dataset_sha256"] = file_sha256(config.dataset_path)
    return manifest


def _report(run, config: RunConfig) -> str:
    lines = [f"# Run report: seed {run.seed}", "",
             f"- algorithm: {config.algo}, coefficient source: {config.balance}, environment: {config.env}",
             f"- steps: {run.offline_done} offline, {run.online_done} online",
             f"- coefficient range: [{config.beta_min}, {config.beta_max}]"]
    for phase, blog in run.beta_logs.items():
        if blog.count:
            lines.append(f"- {phase} coefficients: mean {blog.mean:.4f}, std {blog.std:.4f}, n {blog.count}")
    if run.evals:
        lines.append(f"- final evaluation return: {run.evals[-1][2]:.4f}")
    lines.append(f"- skipped non-finite samples: {run.n_skipped}")
    desk = config.desk_scale_keys()
    if desk:
        lines += ["", "Desk-scale overrides (value vs reference):", ""]
        lines += [f"- {k}: {v['value']} vs {v['reference']}" for k, v in desk.items()]
    return "\n".join(lines) + "\n"


def train_seed(config: RunConfig, seed: int, out: Path):
    """Train one seed into ``out/seed_<seed>/`` and return the finished run."""
    from .trainer import TrainRun

    if config.dataset_path and not Path(config.dataset_path).exists():
        raise ConfigError(f"dataset_path: file not found: {config.dataset_path}")
    if config.n_offline == 0:
        warnings.warn("n_offline = 0: this is an online-only run", stacklevel=2)
    run_dir = out / f"seed_{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(config.to_ini())
    run = TrainRun(config, seed).run(run_dir)
    run.write_metrics(run_dir / "metrics.csv")
    np.savez(run_dir / "betas.npz", offline=run.beta_logs["offline"].values(),
             online=run.beta_logs["online"].values())
    (run_dir / "report.md").write_text(_report(run, config))
    manifest = _manifest(run, config, run_dir)
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("seed %d finished in %s", seed, run_dir)
    return run


def config_from_manifest(path) -> tuple[RunConfig, int]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"manifest: file not found: {p}")
    try:
        data = json.loads(p.read_text())
        return from_mapping(data["config"], explicit=data["explicit"]), int(data["seed"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"manifest: malformed ({exc})") from None


def cmd_train(config: RunConfig, seeds, out: Path) -> list:
    return [train_seed(config, s, out) for s in seeds]


# --- eval --------------------------------------------------------------------


def load_run(run_dir: Path, checkpoint: str = "final.ckpt"):
    """Rebuild a :class:`TrainRun` from a run directory and load its weights."""
    from .numkit import load_checkpoint
    from .trainer import TrainRun

    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise RunError(f"run directory not found: {run_dir}")
    config, seed = config_from_manifest(run_dir / "manifest.json")
    ckpt = run_dir / "checkpoints" / checkpoint
    if not ckpt.exists():
        raise RunError(f"checkpoint not found: {ckpt}")
    run = TrainRun(config, seed)
    run.load_networks(load_checkpoint(ckpt))
    return run


def evaluate_episodes(run, episodes: int, seed: int = 0) -> dict:
    """Deterministic-mode rollouts from random start states; mean and 95% CI."""
    from .trainer import make_env

    if episodes <= 0:
        raise ConfigError("episodes: must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1234]))
    choose = run.policy("deterministic", np.random.default_rng(np.random.SeedSequence([seed, 99])))
    env = make_env(run.config)
    returns = np.empty(episodes)
    for i in range(episodes):
        s = env.reset(rng)
        total = 0.0
        while True:
            a, _ = choose(s)
            s, r, over, _ = env.step(a)
            total += r
            if over:
                break
        returns[i] = total
    std = float(returns.std(ddof=1)) if episodes > 1 else 0.0
    return {"episodes": episodes, "mean": float(returns.mean()), "std": std,
            "ci95": 1.96 * std / math.sqrt(episodes)}


def cmd_eval(run_dir: Path, episodes: int, seed: int = 0) -> dict:
    result = evaluate_episodes(load_run(run_dir), episodes, seed)
    (Path(run_dir) / "eval.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


# --- oracle ------------------------------------------------------------------


def cmd_oracle(instances: int, seed: int, eps_values=(0.01, 0.1, 0.5), grid_points: int = 10_000,
               grid_tol: float = 1e-3) -> dict:
    """Certify both propositions over random instances; ``passed`` is the overall verdict."""
    from . import oracle as orc

    rng = np.random.default_rng(seed)
    p1_fail = p2_fail = 0
    worst_deficit = worst_gap = worst_excess = worst_shortfall = 0.0
    for _ in range(instances):
        mdp = orc.random_instance(rng)
        adv = orc.advantages(mdp)
        for eps in eps_values:
            rep = orc.verify_prop1(mdp, adv, eps)
            p1_fail += not rep.holds
            worst_deficit = max(worst_deficit, rep.J_dist - rep.J_point_matched)
        eps_s = rng.uniform(0.01, 0.5, size=mdp.n_states)
        rep2 = orc.verify_prop2(mdp, adv, eps_s)
        grid = orc.grid_certify(mdp, adv, eps_s, grid_points)
        ok2 = rep2.max_l1_gap < 1e-6 and grid["max_excess"] <= grid_tol
        p2_fail += not ok2
        worst_gap = max(worst_gap, rep2.max_l1_gap)
        worst_excess = max(worst_excess, grid["max_excess"])
        worst_shortfall = max(worst_shortfall, grid["max_shortfall"])
    asym_mdp, asym_adv = orc.asymmetric_instance()
    asym = orc.verify_prop1(asym_mdp, asym_adv, 0.1)
    sym_mdp, sym_adv = orc.symmetric_instance()
    sym = orc.verify_prop1(sym_mdp, sym_adv, 0.1)
    return {
        "instances": instances,
        "prop1": {"cases": instances * len(eps_values), "failures": p1_fail, "worst_deficit": worst_deficit},
        "prop2": {"instances": instances, "failures": p2_fail, "max_l1_gap": worst_gap,
                  "grid_max_excess": worst_excess, "grid_max_shortfall": worst_shortfall},
        "asymmetric": asym.as_dict(),
        "symmetric": sym.as_dict(),
        "passed": p1_fail == 0 and p2_fail == 0 and asym.holds and sym.holds,
    }


# --- analyze -----------------------------------------------------------------


def cmd_analyze(run_dir: Path, analysis: str, baseline: Path | None = None, bins: int = 10) -> Path:
    """Write ``<run_dir>/analysis/<analysis>.csv`` and return its path."""
    from . import analysis as an

    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise RunError(f"run directory not found: {run_dir}")
    if analysis not in ANALYSES:
        raise ConfigError(f"analysis: must be one of {ANALYSES}, got {analysis!r}")
    out_dir = run_dir / "analysis"
    out_dir.mkdir(exist_ok=True)
    path = out_dir / f"{analysis}.csv"
    if analysis == "beta_stats":
        betas_file = run_dir / "betas.npz"
        if not betas_file.exists():
            raise RunError(f"coefficient log not found: {betas_file}")
        with np.load(betas_file) as data:
            stats = an.beta_statistics({k: data[k] for k in data.files})
        an.write_rows_csv(path, [{"phase": k, "mean_beta": v.mean, "std_beta": v.std, "n": v.count}
                                 for k, v in stats.items()])
        return path
    run = load_run(run_dir)
    if analysis == "beta_map":
        if run.config.env != "maze":
            raise ConfigError("analysis: beta_map needs env = maze")
        spec = run.env.spec
        bmap = an.maze_beta_map(run.policy("deterministic"), spec)
        gfrac = an.guided_fraction_map(run.dataset, spec)
        rows = [{"row": r, "col": c, "mean_beta": float(bmap[r, c]), "guided_fraction": float(gfrac[r, c])}
                for r in range(spec.height) for c in range(spec.width) if not np.isnan(bmap[r, c])]
        an.write_rows_csv(path, rows)
        return path
    rows = an.per_trajectory(run.dataset, run.transition_weights, run.mode_action, run.discrete)
    if analysis == "diff":
        if baseline is None:
            raise ConfigError("baseline: the diff analysis needs --baseline <run_dir>")
        base = load_run(baseline)
        base_rows = an.per_trajectory(run.dataset, base.transition_weights, base.mode_action, base.discrete)
        diffs = an.diff_vs_baseline(rows, base_rows)
        an.write_rows_csv(path, [vars(d) for d in diffs])
        an.write_rows_csv(out_dir / "diff_binned.csv", an.bin_by_return(diffs, bins))
        corr = an.pearson([d.ret for d in diffs], [d.delta_weight for d in diffs])
        log.info("return vs weight difference correlation: %.4f", corr)
        return path
    an.write_rows_csv(path, [vars(r) for r in rows])
    return path


# --- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="famo2o", description="Offline-to-online RL with adaptive balance coefficients.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_config=True):
        if with_config:
            p.add_argument("--config", help="ini configuration file")
            p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                           help="override one configuration key (repeatable)")
        p.add_argument("--seed", type=int, help="seed (defaults to the configured seeds)")
        p.add_argument("--out", help="output directory")

    add_common(sub.add_parser("collect", help="collect an offline dataset"))
    p_train = sub.add_parser("train", help="offline pre-training then online fine-tuning")
    add_common(p_train)
    p_train.add_argument("--manifest", help="replay the run recorded in this manifest")
    p_eval = sub.add_parser("eval", help="evaluate a trained run")
    p_eval.add_argument("run_dir")
    p_eval.add_argument("--episodes", type=int, default=20)
    add_common(p_eval, with_config=False)
    p_oracle = sub.add_parser("oracle", help="certify the constrained-improvement propositions")
    add_common(p_oracle, with_config=False)
    p_oracle.add_argument("--instances", type=int, default=100)
    p_oracle.add_argument("--grid-points", type=int, default=10_000)
    p_an = sub.add_parser("analyze", help="diagnostics for a trained run")
    p_an.add_argument("run_dir")
    p_an.add_argument("analysis", choices=ANALYSES)
    p_an.add_argument("--baseline", help="baseline run directory for the diff analysis")
    p_an.add_argument("--bins", type=int, default=10)
    add_common(p_an, with_config=False)
    return parser


def _dispatch(args) -> int:
    if args.command == "collect":
        config = load_config(args.config, args.override)
        seed = config.seeds[0] if args.seed is None else args.seed
        path = cmd_collect(config, seed, Path(args.out or config.out))
        print(path)
        return EXIT_OK
    if args.command == "train":
        if args.manifest:
            config, seed = config_from_manifest(args.manifest)
            seeds = [seed]
        else:
            config = load_config(args.config, args.override)
            seeds = list(config.seeds) if args.seed is None else [args.seed]
        out = Path(args.out or config.out)
        for run in cmd_train(config, seeds, out):
            print(f"seed {run.seed}: final return {run.final_return():.4f} -> {out / f'seed_{run.seed}'}")
        return EXIT_OK
    if args.command == "eval":
        result = cmd_eval(Path(args.run_dir), args.episodes, args.seed or 0)
        print(json.dumps(result))
        return EXIT_OK
    if args.command == "oracle":
        report = cmd_oracle(args.instances, 0 if args.seed is None else args.seed, grid_points=args.grid_points)
        text = json.dumps(report, indent=2)
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(text + "\n")
        print(text)
        return EXIT_OK if report["passed"] else EXIT_CERT
    path = cmd_analyze(Path(args.run_dir), args.analysis,
                       Path(args.baseline) if args.baseline else None, args.bins)
    print(path)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunError, OSError, ArithmeticError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
