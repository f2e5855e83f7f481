"""Experiment driver: interleaved collection / behavior / target updates, the
fixed-policy sampling-error protocol, seeding and run persistence."""

from __future__ import annotations

import csv
import dataclasses
import io
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .behavior import BehaviorUpdateConfig, update_behavior
from .buffer import TransitionBuffer
from .envs import GAME_IDS, MatrixGame, make_game, step, true_visitation
from .errors import InvalidArgumentError, ParseError, UnsupportedGameError
from .metrics import (
    MetricsRow,
    MleConfig,
    empirical_visitation,
    fit_mle_policy,
    kl_sampling_error,
    reference_logps,
    success_rate,
    tv_distance,
)
from .policy import MODES, init_behavior, init_delta_params, random_joint_policy, sample_joint
from .ppo import PpoConfig, make_critics, ppo_update

ALGORITHMS = ("mappo", "ippo")
STREAMS = ("env", "init", "behavior_init", "sampling", "shuffle", "eval", "bootstrap", "shadow", "metrics")
METRICS_HEADER = ["step", "seed", "success_rate", "tv_joint", "kl_joint", "kl_agent_1", "kl_agent_2"]
PARAMS_MAGIC = b"JSPARAMS"
PARAMS_VERSION = 1

# Per-game defaults: (PPO batch, PPO lr, behavior lr, behavior batch, env-step budget).
_TWO_BY_TWO = (20, 0.1, 0.03, 1, 20_000)
_THREE_BY_THREE = (45, 0.1, 0.3, 1, 20_000)
GAME_DEFAULTS = {
    "lbf": (2048, 0.01, 0.03, 1, 100_000),
    "boulderpush": (4096, 0.003, 0.03, 1, 100_000),
    "gridworld": (256, 0.01, 0.3, 1, 50_000),
}


def game_defaults(game_id: str) -> tuple:
    if game_id in GAME_DEFAULTS:
        return GAME_DEFAULTS[game_id]
    if game_id not in GAME_IDS:
        raise InvalidArgumentError(f"unknown game {game_id!r}")
    return _THREE_BY_THREE if game_id in ("climbing", "penalty") else _TWO_BY_TWO


@dataclass
class ExperimentConfig:
    """Flat, fully typed experiment description.

    ``None`` numeric fields are filled from the per-game defaults by
    :meth:`resolved`. The resolved config is what gets snapshotted.
    """

    game: str = "g1"
    algorithm: str = "mappo"
    sampler: str = "on_policy"
    seed: int = 0
    total_steps: int | None = None
    eval_interval: int | None = None
    eval_episodes: int = 100
    metric_cadence: int = 0  # in target batches; 0 disables sampling-error metrics
    mle_method: str = "auto"
    mle_epochs: int = 200
    batch_size: int | None = None
    lr: float | None = None
    ppo_epochs: int = 4
    ppo_minibatches: int = 4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.01
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    norm_adv: bool = True
    behavior_lr: float | None = None
    behavior_batch: int | None = None
    behavior_clip: float = 0.3
    behavior_kl: float = 6.0
    behavior_epochs: int = 1
    behavior_minibatches: int = 1
    behavior_max_rows: int = 0
    out_dir: str = ""

    def resolved(self) -> "ExperimentConfig":
        n, lr, blr, m, budget = game_defaults(self.game)
        c = dataclasses.replace(
            self,
            batch_size=n if self.batch_size is None else self.batch_size,
            lr=lr if self.lr is None else self.lr,
            behavior_lr=blr if self.behavior_lr is None else self.behavior_lr,
            behavior_batch=m if self.behavior_batch is None else self.behavior_batch,
            total_steps=budget if self.total_steps is None else self.total_steps,
        )
        if c.eval_interval is None:
            c = dataclasses.replace(c, eval_interval=max(c.batch_size, c.total_steps // 20))
        c.validate()
        return c

    def validate(self):
        if self.game not in GAME_IDS:
            raise InvalidArgumentError(f"unknown game {self.game!r}")
        if self.algorithm not in ALGORITHMS:
            raise InvalidArgumentError(f"unknown algorithm {self.algorithm!r}")
        if self.sampler not in MODES:
            raise InvalidArgumentError(f"unknown sampler {self.sampler!r}")
        if self.mle_method not in ("auto", "network", "tabular"):
            raise InvalidArgumentError(f"unknown MLE method {self.mle_method!r}")
        n, m = self.batch_size, self.behavior_batch
        if n is not None and m is not None and (m > n or n % m):
            raise InvalidArgumentError("behavior batch must divide the target batch")
        if self.total_steps is not None and self.total_steps < 1:
            raise InvalidArgumentError("total_steps must be >= 1")
        if self.eval_interval is not None and self.eval_interval < 1:
            raise InvalidArgumentError("eval_interval must be >= 1")
        self.ppo_config()
        self.behavior_config()

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(
            batch_size=self.batch_size or 1, lr=self.lr if self.lr is not None else 0.0, n_epochs=self.ppo_epochs,
            n_minibatches=self.ppo_minibatches, gamma=self.gamma, gae_lambda=self.gae_lambda, clip=self.clip,
            entropy_coef=self.entropy_coef, vf_coef=self.vf_coef, max_grad_norm=self.max_grad_norm,
            norm_adv=self.norm_adv,
        )

    def behavior_config(self) -> BehaviorUpdateConfig:
        return BehaviorUpdateConfig(
            lr=self.behavior_lr if self.behavior_lr is not None else 0.0, clip=self.behavior_clip,
            target_kl=self.behavior_kl, n_epoch=self.behavior_epochs, n_minibatch=self.behavior_minibatches,
            batch_size=self.behavior_batch or 1, max_minibatch_size=self.behavior_max_rows,
        )

    def mle_config(self, game) -> MleConfig:
        method = self.mle_method
        if method == "auto":
            method = "tabular" if isinstance(game, MatrixGame) else "network"
        return MleConfig(epochs=self.mle_epochs, method=method)


# -- config text -----------------------------------------------------------------


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(key: str, text: str):
    kind = _FIELD_TYPES[key]
    if text in ("", "none", "None"):
        if "None" in kind:
            return None
        if kind == "str":
            return ""
        raise ValueError(f"{key} requires a value")
    if kind.startswith("bool"):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"{key} expects a boolean, got {text!r}")
    if kind.startswith("int"):
        return int(text)
    if kind.startswith("float"):
        return float(text)
    return text


def config_from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    updates = {}
    for k, v in values.items():
        if k not in _FIELD_TYPES:
            raise InvalidArgumentError(f"unknown config key {k!r}")
        updates[k] = _parse_value(k, v) if isinstance(v, str) else v
    return dataclasses.replace(base, **updates)


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'' if v is None else repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str, path: str = "config", base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(path, lineno, "expected 'key = value'")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _FIELD_TYPES:
            raise ParseError(path, lineno, f"unknown key {key!r}")
        try:
            values[key] = _parse_value(key, value)
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    try:
        return config_from_mapping(values, base)
    except InvalidArgumentError as exc:
        raise ParseError(path, 0, str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), str(path))


# -- records ---------------------------------------------------------------------


@dataclass
class RunRecord:
    config: ExperimentConfig
    seed: int
    rows: list[MetricsRow] = field(default_factory=list)
    duration: float = 0.0
    shadow_rows: list[MetricsRow] = field(default_factory=list)
    final_params: list[np.ndarray] = field(default_factory=list)
    failed_step: int | None = None
    error: str = ""

    def add_row(self, row: MetricsRow):
        if self.rows and row.step <= self.rows[-1].step:
            raise InvalidArgumentError("metrics rows must be strictly increasing in step")
        self.rows.append(row)


def streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators, one per purpose, derived from one master seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


# -- sampling-error metrics ------------------------------------------------------


def _batch_metrics(game, joint, buffer, cfg: ExperimentConfig, rng, truth_cache: dict) -> tuple:
    """(tv_joint, kl_joint, [kl_agent_1, kl_agent_2]) of a completed batch; None where not applicable."""
    tv = None
    truth = truth_cache.get("truth")
    if truth is None and not truth_cache.get("unsupported"):
        try:
            if isinstance(game, MatrixGame) or game.name == "gridworld":
                truth = true_visitation(game, joint.joint_probs)
                truth_cache["truth"] = truth
            else:
                truth_cache["unsupported"] = True
        except UnsupportedGameError:
            truth_cache["unsupported"] = True
    if truth is not None:
        tv = tv_distance(empirical_visitation(buffer, game.n_joint_actions), truth)
    mle = cfg.mle_config(game)
    kl_joint = kl_sampling_error(buffer, reference_logps(joint, buffer, "joint"),
                                 fit_mle_policy(buffer, game, "joint", mle, rng), "joint")
    kl_agents = [
        kl_sampling_error(buffer, reference_logps(joint, buffer, i), fit_mle_policy(buffer, game, i, mle, rng), i)
        for i in range(game.n_agents)
    ]
    return tv, kl_joint, kl_agents


# -- training ----------------------------------------------------------------------


class _Collector:
    """One environment trajectory stream feeding a buffer."""

    def __init__(self, game, rng):
        self.game = game
        self.rng = rng
        self.state = game.reset(rng)
        self.t = 0

    def collect(self, behavior, buffer, sample_rng):
        idx, actions, logps = sample_joint(behavior, self.state, sample_rng)
        res = step(self.game, self.state, idx, self.rng, self.t)
        buffer.add(self.state, idx, actions, logps, res.rewards, res.next_state, res.done, res.truncated)
        if res.done:
            self.state = self.game.reset(self.rng)
            self.t = 0
        else:
            self.state = res.next_state
            self.t += 1


def _behavior_factory(cfg: ExperimentConfig, game, rng: np.random.Generator):
    """Re-initialization restores one adjustment-network draw made per run.

    Returns ``(fresh, features)``: a constructor for freshly initialized
    behavior policies and the per-state activation cache those share.
    """
    delta0 = init_delta_params(game, rng) if cfg.sampler == "ma_props" else None
    features: dict = {}
    return (lambda joint: init_behavior(cfg.sampler, joint, delta_params=delta0)), features


def run_training(cfg: ExperimentConfig, persist: bool = True, stats: dict | None = None) -> RunRecord:
    """Collect with the behavior policy, adapt it every ``m`` steps and update
    the target policies every ``n`` steps; evaluate periodically."""
    cfg = cfg.resolved()
    rngs = streams(cfg.seed)
    game = make_game(cfg.game)
    joint = random_joint_policy(game, rngs["init"])
    critics = make_critics(game, cfg.algorithm, rngs["init"])
    ppo_cfg, b_cfg = cfg.ppo_config(), cfg.behavior_config()
    n, m = cfg.batch_size, cfg.behavior_batch
    fresh_behavior, features = _behavior_factory(cfg, game, rngs["behavior_init"])
    behavior = fresh_behavior(joint)
    buffer = TransitionBuffer(n, game.n_agents)
    collector = _Collector(game, rngs["env"])
    shadow = None
    if cfg.metric_cadence and cfg.sampler != "on_policy":
        shadow = TransitionBuffer(n, game.n_agents)
        shadow_collector = _Collector(game, rngs["shadow"])
        shadow_sampling = np.random.default_rng(rngs["shadow"].integers(2**63))
    record = RunRecord(cfg, cfg.seed)
    opts = None
    batches = 0
    start = time.perf_counter()
    writer = _IncrementalWriter(cfg.out_dir) if persist and cfg.out_dir else None
    if writer:
        writer.start(cfg)
    stats = stats if stats is not None else {}
    stats.setdefault("behavior_updates", [])
    updates_this_batch = 0
    env_step = 0
    try:
        for env_step in range(1, cfg.total_steps + 1):
            collector.collect(behavior, buffer, rngs["sampling"])
            if shadow is not None:
                shadow_collector.collect(init_behavior("on_policy", joint), shadow, shadow_sampling)
            if cfg.sampler != "on_policy" and env_step % m == 0:
                behavior = fresh_behavior(joint)
                behavior = update_behavior(behavior, joint, buffer, b_cfg, rngs["shuffle"], features)
                updates_this_batch += 1
            if buffer.full:
                batches += 1
                if cfg.metric_cadence and batches % cfg.metric_cadence == 0:
                    tv, klj, kla = _batch_metrics(game, joint, buffer, cfg, rngs["metrics"], {})
                    stats.setdefault("batch_metrics", []).append((env_step, tv, klj, kla))
                    if shadow is not None:
                        stv, sklj, skla = _batch_metrics(game, joint, shadow, cfg, rngs["metrics"], {})
                        record.shadow_rows.append(_row(env_step, cfg.seed, None, stv, sklj, skla))
                    pending = (tv, klj, kla)
                else:
                    pending = None
                joint, critics, opts = ppo_update(joint, critics, buffer, ppo_cfg, rngs["shuffle"], opts, stats)
                stats["behavior_updates"].append(updates_this_batch)
                updates_this_batch = 0
                if shadow is not None:
                    shadow.clear()
                behavior = fresh_behavior(joint)
            else:
                pending = None
            if env_step % cfg.eval_interval == 0 or env_step == cfg.total_steps or pending is not None:
                sr = None
                if env_step % cfg.eval_interval == 0 or env_step == cfg.total_steps:
                    sr = success_rate(joint, game, rngs["eval"], cfg.eval_episodes)
                tv, klj, kla = pending if pending is not None else (None, None, [None] * game.n_agents)
                row = _row(env_step, cfg.seed, sr, tv, klj, kla)
                record.add_row(row)
                if writer:
                    writer.append(row)
    except Exception as exc:
        record.failed_step = env_step
        record.error = f"{type(exc).__name__}: {exc}"
        record.duration = time.perf_counter() - start
        record.final_params = [a.params for a in joint.agents]
        if writer:
            writer.finish(record)
        raise
    record.duration = time.perf_counter() - start
    record.final_params = [a.params for a in joint.agents]
    if writer:
        writer.finish(record)
    return record


def _row(step_, seed, sr, tv, klj, kla) -> MetricsRow:
    return MetricsRow(step_, seed, sr, tv, klj, list(kla))


# -- fixed-policy sampling-error experiment ------------------------------------------


def run_sampling_error(cfg: ExperimentConfig, budget: int, checkpoints, persist: bool = True) -> RunRecord:
    """Hold random target policies fixed and measure sampling error of the
    collected data at each checkpoint sample count."""
    cfg = cfg.resolved()
    checkpoints = sorted(int(c) for c in checkpoints)
    if not checkpoints or checkpoints[0] < 1 or checkpoints[-1] > budget:
        raise InvalidArgumentError("checkpoints must lie in [1, budget]")
    rngs = streams(cfg.seed)
    game = make_game(cfg.game)
    joint = random_joint_policy(game, rngs["init"])
    b_cfg = cfg.behavior_config()
    m = cfg.behavior_batch
    fresh_behavior, features = _behavior_factory(cfg, game, rngs["behavior_init"])
    behavior = fresh_behavior(joint)
    buffer = TransitionBuffer(budget, game.n_agents)
    collector = _Collector(game, rngs["env"])
    record = RunRecord(cfg, cfg.seed)
    cache: dict = {}
    start = time.perf_counter()
    pending = set(checkpoints)
    for t in range(1, budget + 1):
        collector.collect(behavior, buffer, rngs["sampling"])
        if t in pending:
            tv, klj, kla = _batch_metrics(game, joint, buffer, cfg, rngs["metrics"], cache)
            record.add_row(_row(t, cfg.seed, None, tv, klj, kla))
        if cfg.sampler != "on_policy" and t % m == 0 and t < budget:
            behavior = fresh_behavior(joint)
            behavior = update_behavior(behavior, joint, buffer, b_cfg, rngs["shuffle"], features)
    record.duration = time.perf_counter() - start
    record.final_params = [a.params for a in joint.agents]
    if persist and cfg.out_dir:
        persist_run(record, cfg.out_dir)
    return record


# -- persistence -----------------------------------------------------------------------


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _metrics_csv(rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r.step, r.seed, _fmt(r.success_rate), _fmt(r.tv_joint), _fmt(r.kl_joint), *map(_fmt, r.kl_agent)])
    return out.getvalue()


def _encode_params(params: list[np.ndarray]) -> bytes:
    out = [PARAMS_MAGIC, struct.pack("<II", PARAMS_VERSION, len(params))]
    for p in params:
        arr = np.ascontiguousarray(p, dtype="<f8")
        out.append(struct.pack("<Q", arr.size))
        out.append(arr.tobytes())
    return b"".join(out)


def _decode_params(data: bytes, path: str) -> list[np.ndarray]:
    if data[:8] != PARAMS_MAGIC:
        raise ParseError(path, 1, "bad magic header")
    version, count = struct.unpack_from("<II", data, 8)
    if version != PARAMS_VERSION:
        raise ParseError(path, 1, f"unsupported version {version}")
    off, params = 16, []
    for _ in range(count):
        if off + 8 > len(data):
            raise ParseError(path, 1, "truncated file")
        (size,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + 8 * size > len(data):
            raise ParseError(path, 1, "truncated file")
        params.append(np.frombuffer(data, dtype="<f8", count=size, offset=off).astype(np.float64))
        off += 8 * size
    return params


class _IncrementalWriter:
    def __init__(self, out_dir):
        self.dir = Path(out_dir)

    def start(self, cfg):
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config").write_text(format_config(cfg))
        (self.dir / "metrics.csv").write_text(",".join(METRICS_HEADER) + "\n")

    def append(self, row):
        with open(self.dir / "metrics.csv", "a") as fh:
            fh.write(_metrics_csv([row]).split("\n", 1)[1])

    def finish(self, record):
        persist_run(record, self.dir)


def persist_run(record: RunRecord, out_dir) -> Path:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config").write_text(format_config(record.config))
    (d / "metrics.csv").write_text(_metrics_csv(record.rows))
    if record.shadow_rows:
        (d / "shadow_metrics.csv").write_text(_metrics_csv(record.shadow_rows))
    (d / "final_params").write_bytes(_encode_params(record.final_params))
    info = f"seed = {record.seed}\nduration = {record.duration!r}\n"
    if record.failed_step is not None:
        info += f"failed_step = {record.failed_step}\nerror = {record.error}\n"
    (d / "run_info").write_text(info)
    return d


def _read_metrics(path: Path) -> list[MetricsRow]:
    text = path.read_text()
    lines = text.splitlines()
    if not lines or lines[0].split(",") != METRICS_HEADER:
        raise ParseError(str(path), 1, "unexpected header")
    rows = []
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split(",")
        if len(parts) != len(METRICS_HEADER):
            raise ParseError(str(path), lineno, f"expected {len(METRICS_HEADER)} fields")
        try:
            vals = [None if p == "" else float(p) for p in parts[2:]]
            rows.append(MetricsRow(int(parts[0]), int(parts[1]), vals[0], vals[1], vals[2], vals[3:]))
        except (ValueError, InvalidArgumentError) as exc:
            raise ParseError(str(path), lineno, str(exc)) from None
    return rows


def load_run(out_dir) -> RunRecord:
    d = Path(out_dir)
    cfg = load_config(d / "config")
    rows = _read_metrics(d / "metrics.csv")
    shadow = _read_metrics(d / "shadow_metrics.csv") if (d / "shadow_metrics.csv").exists() else []
    params = _decode_params((d / "final_params").read_bytes(), str(d / "final_params"))
    duration, failed, err = 0.0, None, ""
    if (d / "run_info").exists():
        for lineno, line in enumerate((d / "run_info").read_text().splitlines(), 1):
            key, sep, value = (p.strip() for p in line.partition("="))
            if not sep:
                raise ParseError(str(d / "run_info"), lineno, "expected 'key = value'")
            if key == "duration":
                duration = float(value)
            elif key == "failed_step":
                failed = int(value)
            elif key == "error":
                err = value
    return RunRecord(cfg, cfg.seed, rows, duration, shadow, params, failed, err)
