"""Offline pre-training followed by online fine-tuning.

:class:`TrainRun` owns every mutable piece of an experiment: networks,
optimizers, the replay buffer, random streams, counters and the metric log.
Each gradient step samples one minibatch, assigns a balance coefficient per
sample, updates the universal model, then (on schedule) the balance model,
then the value functions of the wrapped base algorithm.

Random streams are independent children of one seed, one per purpose, so
switching the coefficient source (learned, fixed, random, annealed) never
shifts the draws that other components see.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import base_algos as ba
from .config import RunConfig
from .core import (
    BalanceModel,
    QCritic,
    UniversalModel,
    act,
    balance_update,
    sample_offline_beta,
    universal_update,
)
from .datastore import ReplayBuffer, Transition, load_jsonl
from .envs import (
    MazeEnv,
    MazeSpec,
    PointMassEnv,
    PointMassSpec,
    collect_maze_dataset,
    collect_pointmass_dataset,
)
from .numkit import Adam, BalanceSpace, Mlp, NonFiniteError, save_checkpoint

STREAMS = (
    "init_u", "init_b", "init_q", "init_v", "batch", "offline_beta", "batch_beta",
    "balance_noise", "policy_noise", "act_beta", "act_sample", "env", "dataset", "eval",
)

METRIC_COLUMNS = (
    "phase", "step", "mean_beta", "std_beta", "n_beta", "mean_weight", "frac_capped",
    "loss_policy", "objective_balance", "loss_q", "loss_v", "cql_penalty", "eval_return",
    "buffer_size", "skipped",
)

RAW_BETA_CAP = 200_000


def make_env(config: RunConfig):
    if config.env == "maze":
        return MazeEnv(MazeSpec(max_episode_steps=config.max_episode_steps))
    return PointMassEnv(PointMassSpec(max_episode_steps=config.max_episode_steps))


def build_dataset(config: RunConfig, seed: int) -> tuple[list[Transition], dict]:
    """Load ``dataset_path`` or collect a fresh dataset from the configured seed."""
    if config.dataset_path:
        return load_jsonl(config.dataset_path), {}
    data_seed = seed if config.dataset_seed < 0 else config.dataset_seed
    rng = np.random.default_rng(np.random.SeedSequence([data_seed, 7]))
    env = make_env(config)
    if config.env == "maze":
        return collect_maze_dataset(env.spec, config.dataset_episodes, rng, config.dataset_mode)
    return collect_pointmass_dataset(env.spec, config.dataset_episodes, rng)


@dataclass
class BetaLog:
    """Running moments plus a capped raw sample of coefficients for one phase."""

    count: int = 0
    total: float = 0.0
    total_sq: float = 0.0
    lo: float = math.inf
    hi: float = -math.inf
    raw: list = field(default_factory=list)
    n_raw: int = 0

    def add(self, betas: np.ndarray) -> None:
        betas = np.asarray(betas, dtype=np.float64).reshape(-1)
        self.count += betas.size
        self.total += float(betas.sum())
        self.total_sq += float(np.dot(betas, betas))
        self.lo = min(self.lo, float(betas.min()))
        self.hi = max(self.hi, float(betas.max()))
        room = RAW_BETA_CAP - self.n_raw
        if room > 0:
            self.raw.append(betas[:room].copy())
            self.n_raw += min(room, betas.size)

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else float("nan")

    @property
    def std(self) -> float:
        if not self.count:
            return float("nan")
        return math.sqrt(max(self.total_sq / self.count - self.mean ** 2, 0.0))

    def values(self) -> np.ndarray:
        return np.concatenate(self.raw) if self.raw else np.zeros(0)


class _Interval:
    """Accumulates per-step statistics between two metric rows."""

    def __init__(self):
        self.betas = BetaLog()
        self.sums: dict[str, float] = {}
        self.counts: dict[str, int] = {}
        self.skipped = 0

    def add(self, key: str, value: float) -> None:
        if value is None or not math.isfinite(value):
            return
        self.sums[key] = self.sums.get(key, 0.0) + value
        self.counts[key] = self.counts.get(key, 0) + 1

    def mean(self, key: str):
        return self.sums[key] / self.counts[key] if self.counts.get(key) else None


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    if isinstance(value, str):
        return value
    return "%.10g" % value


class TrainRun:
    """Full experiment state for one seed."""

    def __init__(self, config: RunConfig, seed: int | None = None, dataset: list[Transition] | None = None,
                 freeze_beta: float | None = None):
        """``freeze_beta`` collapses the balance interval to one value while
        keeping the chosen coefficient source (and its random draws) intact."""
        self.config = config
        self.seed = config.seeds[0] if seed is None else int(seed)
        children = np.random.SeedSequence(self.seed).spawn(len(STREAMS))
        self.rngs = {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}
        self.env = make_env(config)
        self.discrete = self.env.discrete
        if dataset is None:
            dataset, self.dataset_labels = build_dataset(config, self.seed)
        else:
            self.dataset_labels = {}
        self.dataset = dataset
        self.kind = config.balance_kind
        if self.kind == "fixed" or freeze_beta is not None:
            c = config.fixed_beta if freeze_beta is None else float(freeze_beta)
            self.space = BalanceSpace(c, c, config.enc_dim, config.beta_normalize)
        else:
            self.space = BalanceSpace(config.beta_min, config.beta_max, config.enc_dim, config.beta_normalize)
        env = self.env
        obs_dim, hidden = env.obs_dim, tuple(config.hidden)
        self.u = UniversalModel(obs_dim, self.space, discrete=self.discrete, n_actions=env.n_actions,
                                action_dim=env.action_dim, action_scale=getattr(env, "action_scale", 1.0),
                                hidden=hidden, rng=self.rngs["init_u"])
        self.b = None
        if self.kind == "famo2o":
            self.b = BalanceModel(obs_dim, self.space, config.balance_layers, self.rngs["init_b"],
                                  init_log_std=config.balance_init_log_std)
        self.q = QCritic(obs_dim, discrete=self.discrete, n_actions=env.n_actions,
                         action_dim=env.action_dim, hidden=hidden, rng=self.rngs["init_q"])
        self.q_target = self.q.copy()
        self.v = self.v_target = None
        if config.algo == "iql":
            self.v = Mlp([obs_dim, *hidden, 1], self.rngs["init_v"])
            self.v_target = self.v.copy()
        self.opt_u = Adam(self.u.net.n_params, config.lr)
        self.opt_q = Adam(self.q.net.n_params, config.lr)
        self.opt_v = Adam(self.v.n_params, config.lr) if self.v is not None else None
        self.opt_b = Adam(self.b.net.n_params, config.lr_balance) if self.b is not None else None
        self.buffer = ReplayBuffer(config.buffer_capacity, env.raw_state_dim,
                                   env.action_dim, self.discrete)
        self.buffer.extend(dataset)
        self.step = 0
        self.offline_done = 0
        self.online_done = 0
        self.beta_logs = {"offline": BetaLog(), "online": BetaLog()}
        self.act_betas: list[float] = []
        self.metrics: list[dict] = []
        self.evals: list[tuple[str, int, float]] = []
        self.online_returns: list[float] = []
        self.n_skipped = 0
        self._interval = _Interval()
        self._episode_id = (max((t.episode for t in dataset), default=-1) + 1)
        self._obs = None
        self._ep_return = 0.0
        self._ep_t = 0

    # --- coefficient sources -------------------------------------------------

    def _batch_betas(self, phase: str, obs: np.ndarray) -> np.ndarray:
        n = obs.shape[0]
        if self.kind == "fixed":
            return np.full(n, self.space.beta_min)
        if phase == "offline":
            return sample_offline_beta(self.space, n, self.rngs["offline_beta"])
        if self.kind == "famo2o":
            if self.config.online_beta_sample:
                return self.b.sample(obs, self.rngs["batch_beta"].standard_normal(n))
            return self.b.mean(obs)
        if self.kind == "random":
            return sample_offline_beta(self.space, n, self.rngs["batch_beta"])
        return np.full(n, self._anneal_value())

    def _anneal_value(self) -> float:
        return ba.anneal_beta(self.space.beta_min, self.space.beta_max, self.online_done, self.config.n_online)

    def _acting_beta(self, mode: str, rng: np.random.Generator | None):
        """Constant coefficient for acting (None means: ask the balance model)."""
        if self.kind == "fixed":
            return self.space.beta_min
        if self.kind == "anneal":
            return self._anneal_value()
        if self.kind == "random":
            return float(sample_offline_beta(self.space, 1, rng)[0])
        return None

    # --- one gradient step ---------------------------------------------------

    def _sample_batch(self):
        idx = self.buffer.sample_indices(self.config.batch_size, self.rngs["batch"])
        cols = self.buffer.columns(idx)
        obs = self.env.featurize(cols["s"])
        obs_next = self.env.featurize(cols["s_next"])
        actions = cols["a"][:, 0].astype(np.int64) if self.discrete else cols["a"]
        return obs, actions, cols["r"], obs_next, cols["done"]

    def _gradient_step(self, phase: str) -> None:
        cfg = self.config
        obs, actions, rewards, obs_next, dones = self._sample_batch()
        betas = self._batch_betas(phase, obs)
        self.beta_logs[phase].add(betas)
        self._interval.betas.add(betas)
        iv = self._interval

        # universal model
        q_all = v_fwd = q_sa = None
        if cfg.algo == "cql":
            noise = None if self.discrete else self.rngs["policy_noise"].standard_normal((len(betas), self.u.action_dim))
            iv.add("loss_policy", -ba.cql_universal_update(self.u, self.q, self.opt_u, obs, betas, noise))
        else:
            if cfg.algo == "iql":
                # target-Q and V are untouched until the value step, so their
                # forward passes are shared by every update in this step
                if self.discrete:
                    q_all = self.q_target.all_values(obs)
                    q_sa = q_all[np.arange(len(actions)), actions]
                else:
                    q_sa = self.q_target(obs, actions)
                v_fwd = self.v.forward(obs)
                baseline = v_fwd[0][:, 0]
            else:
                q_sa = self.q(obs, actions)
                baseline = ba.expected_q(self.q, self.u, obs, betas, self.rngs["policy_noise"], ba.N_AWAC_SAMPLES)
            stats = universal_update(self.u, self.opt_u, obs, actions, betas, q_sa, baseline, cfg.w_max)
            iv.add("loss_policy", stats.loss)
            iv.add("mean_weight", stats.mean_weight)
            iv.add("frac_capped", stats.frac_capped)
            iv.skipped += stats.n_skipped
            self.n_skipped += stats.n_skipped

        # balance model
        if self.b is not None and self.step % cfg.balance_update_freq == 0:
            critic = self.q_target if cfg.algo == "iql" else self.q
            n = obs.shape[0]
            noise_b = self.rngs["balance_noise"].standard_normal(n)
            noise_u = None
            if not self.discrete and cfg.balance_action_sample:
                noise_u = self.rngs["balance_noise"].standard_normal((n, self.u.action_dim))
            bstats = balance_update(self.b, self.u, critic, self.opt_b, obs, noise_b, noise_u, q_all)
            iv.add("objective_balance", bstats.loss)

        # value functions
        self._value_step(obs, actions, rewards, obs_next, dones, betas, q_sa, v_fwd)
        self.step += 1

    def _value_step(self, obs, actions, rewards, obs_next, dones, betas, q_target_sa=None, v_fwd=None) -> None:
        cfg = self.config
        iv = self._interval
        if cfg.algo == "iql":
            if q_target_sa is None:
                q_target_sa = self.q_target(obs, actions)
            iv.add("loss_v", ba.iql_value_update(self.v, self.opt_v, obs, q_target_sa, cfg.expectile, v_fwd))
            targets = ba.td_targets(rewards, dones, self.v_target(obs_next)[:, 0], cfg.gamma)
            iv.add("loss_q", ba.td_q_update(self.q, self.opt_q, obs, actions, targets))
            ba.update_target(self.v_target, self.v, cfg.soft_update)
        else:
            next_q = ba.expected_q(self.q_target, self.u, obs_next, betas, self.rngs["policy_noise"])
            targets = ba.td_targets(rewards, dones, next_q, cfg.gamma)
            if cfg.algo == "awac":
                iv.add("loss_q", ba.td_q_update(self.q, self.opt_q, obs, actions, targets))
            else:
                sampled = None
                if not self.discrete:
                    sampled = ba.penalty_actions(self.u, obs, betas, self.rngs["policy_noise"])
                loss, penalty = ba.cql_q_update(self.q, self.opt_q, obs, actions, targets, cfg.alpha_cql, sampled)
                iv.add("loss_q", loss)
                iv.add("cql_penalty", penalty)
        ba.update_target(self.q_target.net, self.q.net, cfg.soft_update)

    # --- phases ----------------------------------------------------------------

    def offline_step(self) -> None:
        if self.buffer.size == 0:
            raise RuntimeError("offline step needs a non-empty buffer")
        self._gradient_step("offline")
        self.offline_done += 1
        self._after_step("offline")

    def _env_step(self) -> None:
        env = self.env
        if self._obs is None:
            self._obs = env.reset(self.rngs["env"])
            self._ep_return, self._ep_t = 0.0, 0
        feat = env.featurize(np.asarray([self._obs], dtype=np.float64))
        beta = self._acting_beta("stochastic", self.rngs["act_beta"])
        action, betas = act(feat, self.u, self.b, "stochastic", rng=self.rngs["act_sample"],
                            beta_rng=self.rngs["act_beta"], beta=beta)
        self.act_betas.append(float(betas[0]))
        a = int(action[0]) if self.discrete else tuple(float(v) for v in action[0])
        nxt, r, over, terminal = env.step(a)
        self.buffer.add(Transition(self._obs, a, float(r), nxt, terminal, self._episode_id, self._ep_t))
        self._ep_return += r
        self._ep_t += 1
        self._obs = nxt
        if over:
            self.online_returns.append(self._ep_return)
            self._episode_id += 1
            self._obs = None

    def online_step(self) -> None:
        for _ in range(self.config.env_steps_per_update):
            self._env_step()
        self._gradient_step("online")
        self.online_done += 1
        self._after_step("online")

    def _after_step(self, phase: str) -> None:
        cfg = self.config
        done_in_phase = self.offline_done if phase == "offline" else self.online_done
        total = cfg.n_offline if phase == "offline" else cfg.n_online
        eval_now = done_in_phase % cfg.eval_interval == 0 or done_in_phase == total
        if done_in_phase % cfg.log_interval == 0 or done_in_phase == total or eval_now:
            eval_return = self.evaluate() if eval_now else None
            if eval_return is not None:
                self.evals.append((phase, done_in_phase, eval_return))
            self._emit(phase, done_in_phase, eval_return)

    def _emit(self, phase: str, step: int, eval_return) -> None:
        iv = self._interval
        row = {
            "phase": phase,
            "step": step,
            "mean_beta": iv.betas.mean if iv.betas.count else None,
            "std_beta": iv.betas.std if iv.betas.count else None,
            "n_beta": iv.betas.count,
            "mean_weight": iv.mean("mean_weight"),
            "frac_capped": iv.mean("frac_capped"),
            "loss_policy": iv.mean("loss_policy"),
            "objective_balance": iv.mean("objective_balance"),
            "loss_q": iv.mean("loss_q"),
            "loss_v": iv.mean("loss_v"),
            "cql_penalty": iv.mean("cql_penalty"),
            "eval_return": eval_return,
            "buffer_size": self.buffer.size,
            "skipped": iv.skipped,
        }
        self.metrics.append(row)
        self._interval = _Interval()

    def run(self, run_dir: Path | None = None) -> "TrainRun":
        """Execute both phases, writing checkpoints into ``run_dir`` when given."""
        ckpt_dir = None
        if run_dir is not None and self.config.checkpoint:
            ckpt_dir = Path(run_dir) / "checkpoints"
            ckpt_dir.mkdir(parents=True, exist_ok=True)
        for _ in range(self.config.n_offline):
            self.offline_step()
        if ckpt_dir is not None:
            self.save(ckpt_dir / "offline_end.ckpt")
        for _ in range(self.config.n_online):
            self.online_step()
        if ckpt_dir is not None:
            self.save(ckpt_dir / "final.ckpt")
        return self

    # --- evaluation ------------------------------------------------------------

    def policy(self, mode: str = "deterministic", rng: np.random.Generator | None = None):
        """``raw_state -> (action, beta)`` closure over the current snapshot."""
        def choose(raw_state):
            feat = self.env.featurize(np.asarray([raw_state], dtype=np.float64))
            beta = self._acting_beta(mode, rng)
            action, betas = act(feat, self.u, self.b, mode, rng=rng, beta_rng=rng, beta=beta)
            a = int(action[0]) if self.discrete else tuple(float(v) for v in action[0])
            return a, float(betas[0])
        return choose

    def evaluate(self, starts=None) -> float:
        """Mean return of deterministic rollouts from the environment's evaluation starts."""
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 99]))
        choose = self.policy("deterministic", rng)
        env = make_env(self.config)
        returns = []
        for start in (starts or env.eval_starts()):
            s = env.reset(start=start)
            total = 0.0
            while True:
                a, _ = choose(s)
                s, r, over, _ = env.step(a)
                total += r
                if over:
                    break
            returns.append(total)
        value = float(np.mean(returns))
        if not math.isfinite(value):
            raise NonFiniteError("evaluation return is not finite")
        return value

    def final_return(self) -> float:
        return self.evals[-1][2] if self.evals else self.evaluate()

    # --- persistence -----------------------------------------------------------

    def networks(self) -> dict[str, Mlp]:
        nets = {"universal": self.u.net, "q": self.q.net, "q_target": self.q_target.net}
        if self.v is not None:
            nets["v"] = self.v
            nets["v_target"] = self.v_target
        if self.b is not None:
            nets["balance"] = self.b.net
        return nets

    def save(self, path) -> None:
        save_checkpoint(path, self.networks())

    def load_networks(self, nets: dict[str, Mlp]) -> None:
        for name, net in self.networks().items():
            if name in nets:
                net.load_params(nets[name].params)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in self.metrics:
            writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
        return buf.getvalue()

    def write_metrics(self, path) -> None:
        Path(path).write_text(self.metrics_csv())

    # --- diagnostics -----------------------------------------------------------

    def state_betas(self, obs: np.ndarray) -> np.ndarray:
        """Deterministic coefficient per featurized state (the balance mean for FamO2O)."""
        if self.b is not None:
            return self.b.mean(obs)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 98]))
        return np.full(obs.shape[0], self._acting_beta("deterministic", rng))

    def transition_weights(self, transitions) -> np.ndarray:
        """Uncapped imitation weights ``exp(beta (Q - V))`` for recorded transitions."""
        from .analysis import imitation_weights

        raw = np.array([t.s for t in transitions], dtype=np.float64)
        obs = self.env.featurize(raw)
        if self.discrete:
            actions = np.array([int(t.a) for t in transitions], dtype=np.int64)
        else:
            actions = np.array([t.a for t in transitions], dtype=np.float64)
        betas = self.state_betas(obs)
        q_sa = self.q(obs, actions)
        if self.v is not None:
            v_s = self.v(obs)[:, 0]
        else:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 97]))
            v_s = ba.expected_q(self.q, self.u, obs, betas, rng, n_samples=ba.N_AWAC_SAMPLES)
        return imitation_weights(betas, q_sa, v_s)

    def mode_action(self, raw_state):
        """Modal action of the deterministic policy at one raw state."""
        return self.policy("deterministic")(raw_state)[0]
