"""Experiment orchestration: base training, strategy chains, references, persistence.

A run walks a timeline episode by episode: train on the new episode under the
configured strategy, then score the resulting model on the test split of every
episode seen so far, filling one row of the lower-triangular MER matrix. Row 0
comes from the base model. Forward transfer and intransigence need two
baseline chains (plain incremental finetuning and joint finetuning), which are
trained once per (timeline, training config, seed) and cached for reuse by
every strategy run on that timeline.

Output directory layout of a run::

    run.json            config echo, environment stamp, wallclock, step counts
    state.json          incremental progress (crash-resume point) + checksums
    mer_matrix.json     lower-triangular MER values (+ mer_matrix.csv)
    metrics.json        per-episode AMER/FWT/BWT/IM series (+ metrics.csv)
    per_batch_mer.json  per-(row, episode, batch) alignment counts
    checkpoints/        ep_00.npz .. ep_NN.npz (model + optimizer + strategy state)
    reference/          the baseline diagonals this run's metrics used

Determinism: (catalog, timeline, config, seeds) fixes every MER entry
bit-exactly; a killed and resumed run reproduces the uninterrupted result
files byte for byte. run.json carries volatile metadata (timestamps,
wallclock) and is excluded from that guarantee, as are checkpoint archives
(their zip containers embed timestamps; their *contents* round-trip
bit-exactly).
"""

from __future__ import annotations

import hashlib
import json
import platform
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ResumeMismatchError, ValidationError
from .manifest import Catalog
from .metrics import MerMatrix, MerScore, ReferenceDiagonals, mer_frames, metric_series
from .micromodel import (
    ModelConfig,
    ModelState,
    add_head,
    decode,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .strategies import (
    StrategyConfig,
    StrategyState,
    TrainSchedule,
    init_episode0_state,
    post_episode_bookkeeping,
    run_training_loop,
    train_episode,
)
from .taskgen import TaskConfig, TaskUniverse, TrainPool
from .timeline import Timeline, timeline_to_bytes

_STATE_VERSION = 1


@dataclass
class TrainConfig:
    """Step counts and learning rates; increments default to half the base LR.

    Joint chains train like base runs (full step budget at the base rate);
    incremental episodes use the shorter schedule at half the rate.
    """

    base_steps: int = 3000
    inc_steps: int = 600
    base_lr: float = 1e-3
    inc_lr: float | None = None
    joint_steps: int | None = None
    joint_lr: float | None = None
    minibatch: int = 8
    temperature: float = 3.0

    def __post_init__(self):
        if self.inc_lr is None:
            self.inc_lr = self.base_lr / 2
        if self.joint_steps is None:
            self.joint_steps = self.base_steps
        if self.joint_lr is None:
            self.joint_lr = self.base_lr
        if min(self.base_steps, self.inc_steps, self.joint_steps, self.minibatch) < 1:
            raise ValidationError("steps and minibatch must be >= 1")

    def to_jsonable(self) -> dict:
        return {
            "base_steps": self.base_steps,
            "inc_steps": self.inc_steps,
            "base_lr": self.base_lr,
            "inc_lr": self.inc_lr,
            "joint_steps": self.joint_steps,
            "joint_lr": self.joint_lr,
            "minibatch": self.minibatch,
            "temperature": self.temperature,
        }

    def base_schedule(self) -> TrainSchedule:
        return TrainSchedule(self.base_steps, self.base_lr, self.minibatch, self.temperature)

    def inc_schedule(self) -> TrainSchedule:
        return TrainSchedule(self.inc_steps, self.inc_lr, self.minibatch, self.temperature)

    def joint_schedule(self) -> TrainSchedule:
        return TrainSchedule(self.joint_steps, self.joint_lr, self.minibatch, self.temperature)


@dataclass
class RunConfig:
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    run_seed: int = 0
    eval_every: int = 1
    include_base_in_amer: bool = True
    joint_from_scratch: bool = False

    def __post_init__(self):
        if self.eval_every < 1:
            raise ValidationError("eval_every must be >= 1")

    def to_jsonable(self) -> dict:
        return {
            "strategy": self.strategy.to_jsonable(),
            "train": self.train.to_jsonable(),
            "task": self.task.to_jsonable(),
            "model": self.model.to_jsonable(),
            "run_seed": self.run_seed,
            "eval_every": self.eval_every,
            "include_base_in_amer": self.include_base_in_amer,
            "joint_from_scratch": self.joint_from_scratch,
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "RunConfig":
        return cls(
            strategy=StrategyConfig(**obj.get("strategy", {})),
            train=TrainConfig(**obj.get("train", {})),
            task=TaskConfig(**obj.get("task", {})),
            model=ModelConfig(**obj.get("model", {})),
            run_seed=int(obj.get("run_seed", 0)),
            eval_every=int(obj.get("eval_every", 1)),
            include_base_in_amer=bool(obj.get("include_base_in_amer", True)),
            joint_from_scratch=bool(obj.get("joint_from_scratch", False)),
        )


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def catalog_sha(catalog: Catalog) -> str:
    canon = "\n".join(
        f"{b.batch_id},{b.language},{b.domain},{b.hours},{b.n_train},{b.n_test}"
        for b in sorted(catalog.batches, key=lambda b: b.batch_id)
    )
    return _sha(canon.encode("utf-8"))


def config_hash(cfg: RunConfig, catalog: Catalog, timeline: Timeline) -> str:
    payload = {
        "config": cfg.to_jsonable(),
        "catalog": catalog_sha(catalog),
        "timeline": _sha(timeline_to_bytes(timeline)),
    }
    return _sha(json.dumps(payload, sort_keys=True).encode("utf-8"))


def shared_cache_key(cfg: RunConfig, catalog: Catalog, timeline: Timeline) -> str:
    """Cache key for strategy-independent artifacts (base model, references)."""
    payload = {
        "train": cfg.train.to_jsonable(),
        "task": cfg.task.to_jsonable(),
        "model": cfg.model.to_jsonable(),
        "run_seed": cfg.run_seed,
        "joint_from_scratch": cfg.joint_from_scratch,
        "catalog": catalog_sha(catalog),
        "timeline": _sha(timeline_to_bytes(timeline)),
    }
    return _sha(json.dumps(payload, sort_keys=True).encode("utf-8"))[:16]


# ---------------------------------------------------------------------------
# evaluation


class _EpisodeEvalSet:
    """Test split of one episode, packed for vectorized scoring."""

    def __init__(self, universe: TaskUniverse, batch_ids: tuple[str, ...], max_frames: int):
        catalog = universe.catalog
        self.batch_ids = sorted(batch_ids)
        self.max_frames = max_frames
        per_language: dict[str, list[str]] = {}
        for bid in self.batch_ids:
            per_language.setdefault(catalog.batch(bid).language, []).append(bid)
        self.languages = sorted(per_language)
        self.features: dict[str, np.ndarray] = {}
        self._scatter_rows: dict[str, np.ndarray] = {}
        self._scatter_cols: dict[str, np.ndarray] = {}
        refs_rows, length_rows, batch_rows = [], [], []
        row = 0
        for lang in self.languages:
            feats, srows, scols = [], [], []
            for bid in per_language[lang]:
                batch_pos = self.batch_ids.index(bid)
                for sample in universe.test_set(bid):
                    t = len(sample.reference)
                    feats.append(sample.features)
                    srows.append(np.full(t, row, dtype=np.int64))
                    scols.append(np.arange(t, dtype=np.int64))
                    padded = np.zeros(max_frames, dtype=np.int64)
                    padded[:t] = sample.reference
                    refs_rows.append(padded)
                    length_rows.append(t)
                    batch_rows.append(batch_pos)
                    row += 1
            self.features[lang] = np.concatenate(feats, axis=0)
            self._scatter_rows[lang] = np.concatenate(srows)
            self._scatter_cols[lang] = np.concatenate(scols)
        self.refs = np.stack(refs_rows)
        self.lengths = np.asarray(length_rows, dtype=np.int64)
        self.batch_index = np.asarray(batch_rows, dtype=np.int64)

    def predict(self, model: ModelState) -> np.ndarray:
        """Padded per-frame hypotheses (N, max_frames) under greedy decoding."""
        hyps = np.zeros_like(self.refs)
        for lang in self.languages:
            tokens = decode(forward(model, self.features[lang], lang))
            hyps[self._scatter_rows[lang], self._scatter_cols[lang]] = tokens
        return hyps

    def per_batch_counts(self, counts: np.ndarray) -> dict[str, list[int]]:
        per_batch: dict[str, list[int]] = {bid: [0, 0, 0, 0] for bid in self.batch_ids}
        for col in range(4):
            sums = np.bincount(self.batch_index, weights=counts[:, col], minlength=len(self.batch_ids))
            for pos, bid in enumerate(self.batch_ids):
                per_batch[bid][col] = int(round(sums[pos]))
        return per_batch


class _Evaluator:
    def __init__(self, universe: TaskUniverse, timeline: Timeline, max_frames: int):
        self.universe = universe
        self.timeline = timeline
        self.max_frames = max_frames
        self._sets: dict[int, _EpisodeEvalSet] = {}

    def episode_set(self, t: int) -> _EpisodeEvalSet:
        if t not in self._sets:
            self._sets[t] = _EpisodeEvalSet(self.universe, self.timeline.episodes[t].batch_ids, self.max_frames)
        return self._sets[t]

    def evaluate_row(self, model: ModelState, t: int) -> tuple[list[float], dict]:
        """Score the model on episodes 0..t with a single alignment sweep."""
        sets = [self.episode_set(i) for i in range(t + 1)]
        refs = np.concatenate([es.refs for es in sets], axis=0)
        lengths = np.concatenate([es.lengths for es in sets])
        hyps = np.concatenate([es.predict(model) for es in sets], axis=0)
        counts = mer_frames(refs, hyps, lengths)
        values, per_batch = [], {}
        offset = 0
        for i, es in enumerate(sets):
            n = es.refs.shape[0]
            chunk = counts[offset : offset + n]
            offset += n
            total = chunk.sum(axis=0)
            values.append(MerScore(*(int(x) for x in total)).mer)
            per_batch[str(i)] = {
                bid: c + [MerScore(*c).mer] for bid, c in es.per_batch_counts(chunk).items()
            }
        return values, per_batch


# ---------------------------------------------------------------------------
# chain execution with persistence and resume


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


@dataclass
class RunResult:
    out_dir: Path
    matrix: MerMatrix | None
    rows: list[dict]
    refs: ReferenceDiagonals | None
    series: list[dict] | None
    config_hash: str
    total_steps: int
    wallclock_sec: float

    def diagonal(self) -> list[float]:
        return [row["values"][row["t"]] for row in self.rows]


class _ChainRunner:
    """Runs one episode chain into a directory, resumable at episode granularity."""

    def __init__(
        self,
        out_dir: Path,
        catalog: Catalog,
        timeline: Timeline,
        cfg: RunConfig,
        kind: str,
        universe: TaskUniverse,
        evaluator: _Evaluator,
        base_model_path: Path,
        restart_episode: int | None = None,
        stop_after_episode: int | None = None,
    ):
        self.out_dir = Path(out_dir)
        self.catalog = catalog
        self.timeline = timeline
        self.cfg = cfg
        self.kind = kind
        self.universe = universe
        self.evaluator = evaluator
        self.base_model_path = base_model_path
        self.restart_episode = restart_episode
        self.stop_after_episode = stop_after_episode
        self.ckpt_dir = self.out_dir / "checkpoints"
        self.state_path = self.out_dir / "state.json"
        self.hash = _sha(
            json.dumps(
                {
                    "kind": kind,
                    "restart": restart_episode,
                    "config": cfg.to_jsonable(),
                    "catalog": catalog_sha(catalog),
                    "timeline": _sha(timeline_to_bytes(timeline)),
                },
                sort_keys=True,
            ).encode()
        )

    # -- persistence helpers

    def _load_state(self) -> dict | None:
        if not self.state_path.exists():
            return None
        state = _read_json(self.state_path)
        if state.get("version") != _STATE_VERSION or state.get("chain_hash") != self.hash:
            raise ResumeMismatchError(
                f"on-disk run at {self.out_dir} was produced by a different configuration"
            )
        return state

    def _save_state(self, state: dict) -> None:
        state["version"] = _STATE_VERSION
        state["chain_hash"] = self.hash
        _write_json(self.state_path, state)

    def _ckpt_path(self, t: int) -> Path:
        return self.ckpt_dir / f"ep_{t:02d}.npz"

    def _save_ckpt(self, t: int, model: ModelState, sstate: StrategyState, state: dict) -> None:
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        arrays, meta = sstate.to_payload()
        save_checkpoint(self._ckpt_path(t), model, None, extra_arrays=arrays, extra_meta={"strategy": meta})
        state.setdefault("checkpoint_sha", {})[str(t)] = _sha(self._ckpt_path(t).read_bytes())

    def _load_ckpt(self, t: int, state: dict) -> tuple[ModelState, StrategyState]:
        path = self._ckpt_path(t)
        if not path.exists():
            raise ResumeMismatchError(f"missing checkpoint {path}")
        recorded = state.get("checkpoint_sha", {}).get(str(t))
        if recorded and _sha(path.read_bytes()) != recorded:
            raise ResumeMismatchError(f"checkpoint {path} fails its checksum; run directory is corrupt")
        model, _, arrays, meta = load_checkpoint(path)
        return model, StrategyState.from_payload(arrays, (meta or {}).get("strategy", {}))

    # -- data plumbing

    def _pool(self, t: int) -> TrainPool:
        return TrainPool.from_episode(self.universe, self.timeline.episodes[t].batch_ids)

    def _ensure_heads(self, model: ModelState, t: int) -> None:
        for bid in self.timeline.episodes[t].batch_ids:
            add_head(model, self.catalog.batch(bid).language)

    def _should_eval(self, t: int) -> bool:
        return t % self.cfg.eval_every == 0 or t == self.timeline.tau

    # -- the chain

    def run(self) -> dict:
        state = self._load_state()
        if state is None:
            state = {"completed": -1, "rows": [], "total_steps": 0}
        if state["completed"] >= self.timeline.tau:
            return state

        if state["completed"] < 0:
            model, sstate, steps = self._episode0()
            state["total_steps"] += steps
            if self._should_eval(0):
                values, per_batch = self.evaluator.evaluate_row(model, 0)
                state["rows"].append({"t": 0, "values": values, "per_batch": per_batch})
            self._save_ckpt(0, model, sstate, state)
            state["completed"] = 0
            self._save_state(state)
        else:
            model, sstate = self._load_ckpt(state["completed"], state)

        history_pools: list[TrainPool] | None = None
        for t in range(state["completed"] + 1, self.timeline.tau + 1):
            if self.stop_after_episode is not None and t > self.stop_after_episode:
                break
            if history_pools is None:
                history_pools = [self._pool(i) for i in range(t)]
            self._ensure_heads(model, t)
            pool = self._pool(t)
            model, sstate, steps = self._episode(t, model, sstate, pool, history_pools)
            state["total_steps"] += steps
            if self._should_eval(t):
                values, per_batch = self.evaluator.evaluate_row(model, t)
                state["rows"].append({"t": t, "values": values, "per_batch": per_batch})
            self._save_ckpt(t, model, sstate, state)
            state["completed"] = t
            self._save_state(state)
            history_pools.append(pool)
        return state

    def _episode0(self) -> tuple[ModelState, StrategyState, int]:
        model, _, _, _ = load_checkpoint(self.base_model_path)
        pool0 = self._pool(0)
        sstate = init_episode0_state(self.cfg.strategy, model, pool0, self.cfg.run_seed)
        return model, sstate, self.cfg.train.base_steps

    def _episode(
        self, t: int, model: ModelState, sstate: StrategyState, pool: TrainPool, history: list[TrainPool]
    ) -> tuple[ModelState, StrategyState, int]:
        cfg = self.cfg
        joint_phase = self.restart_episode is not None and t <= self.restart_episode
        if self.kind == "jointft" or joint_phase:
            if cfg.joint_from_scratch and self.kind == "jointft":
                model = init_model(cfg.model, cfg.run_seed)
                for i in range(t + 1):
                    self._ensure_heads(model, i)
            schedule = cfg.train.joint_schedule()
            merged = TrainPool.merged(history + [pool])
            _assert_superset(merged, pool, t)
            model = run_training_loop(model, merged, schedule, cfg.run_seed, t)
            if joint_phase and self.kind != "jointft":
                post_episode_bookkeeping(cfg.strategy, model, sstate, pool, cfg.run_seed, t)
            sstate.seen_languages |= set(pool.languages())
            return model, sstate, schedule.steps
        schedule = cfg.train.inc_schedule()
        model, sstate = train_episode(
            cfg.strategy,
            model,
            sstate,
            pool,
            history_pools=history,
            schedule=schedule,
            scenario=self.timeline.scenario,
            seed=cfg.run_seed,
            episode_index=t,
        )
        return model, sstate, schedule.steps


def _assert_superset(merged: TrainPool, episode_pool: TrainPool, t: int) -> None:
    """Joint training data must be a multiset superset of the episode's data."""
    merged_sizes = merged.batch_sizes()
    for batch_id, count in episode_pool.batch_sizes().items():
        if merged_sizes.get(batch_id, 0) < count:
            raise ValidationError(
                f"joint pool at episode {t} is missing data of batch {batch_id!r}"
            )


# ---------------------------------------------------------------------------
# public orchestration


def _base_ckpt_path(cache_dir: Path, key: str) -> Path:
    return Path(cache_dir) / key / "base.npz"


def train_base(
    catalog: Catalog, timeline: Timeline, cfg: RunConfig, cache_dir: Path, universe: TaskUniverse | None = None
) -> Path:
    """Train (or reuse) the base model on episode 0; returns the checkpoint path."""
    key = shared_cache_key(cfg, catalog, timeline)
    path = _base_ckpt_path(Path(cache_dir), key)
    if path.exists():
        return path
    universe = universe or TaskUniverse(catalog, cfg.task)
    pool0 = TrainPool.from_episode(universe, timeline.episodes[0].batch_ids)
    if not pool0.total:
        raise ValidationError("episode 0 has no training data")
    model = init_model(cfg.model, cfg.run_seed)
    for lang in pool0.languages():
        add_head(model, lang)
    model = run_training_loop(model, pool0, cfg.train.base_schedule(), cfg.run_seed, 0)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model, None, extra_meta={"role": "base"})
    return path


def _chain_dir(cache_dir: Path, key: str, kind: str) -> Path:
    return Path(cache_dir) / key / kind


def _reference_cfg(cfg: RunConfig, kind: str) -> RunConfig:
    # references are always evaluated at every episode: FWT and IM need the
    # full diagonals
    return RunConfig(
        strategy=StrategyConfig(kind=kind),
        train=cfg.train,
        task=cfg.task,
        model=cfg.model,
        run_seed=cfg.run_seed,
        eval_every=1,
        include_base_in_amer=cfg.include_base_in_amer,
        joint_from_scratch=cfg.joint_from_scratch,
    )


def reference_runs(
    catalog: Catalog,
    timeline: Timeline,
    cfg: RunConfig,
    cache_dir: Path,
    universe: TaskUniverse | None = None,
    evaluator: _Evaluator | None = None,
) -> ReferenceDiagonals:
    """Train (or reuse) both baseline chains and return their diagonals."""
    cache_dir = Path(cache_dir)
    key = shared_cache_key(cfg, catalog, timeline)
    diag_path = cache_dir / key / "diagonals.json"
    if diag_path.exists():
        return ReferenceDiagonals.from_jsonable(_read_json(diag_path))
    universe = universe or TaskUniverse(catalog, cfg.task)
    evaluator = evaluator or _Evaluator(universe, timeline, cfg.task.max_frames)
    base_path = train_base(catalog, timeline, cfg, cache_dir, universe)
    states = {}
    for kind in ("incft", "jointft"):
        chain_cfg = _reference_cfg(cfg, kind)
        runner = _ChainRunner(
            _chain_dir(cache_dir, key, kind),
            catalog,
            timeline,
            chain_cfg,
            kind,
            universe,
            evaluator,
            base_path,
        )
        t0 = time.perf_counter()
        states[kind] = runner.run()
        states[kind]["_wallclock"] = time.perf_counter() - t0
    diagonals = ReferenceDiagonals(
        incft=[row["values"][row["t"]] for row in states["incft"]["rows"]],
        jointft=[row["values"][row["t"]] for row in states["jointft"]["rows"]],
    )
    for kind in ("incft", "jointft"):
        _finalize(
            _chain_dir(cache_dir, key, kind),
            _reference_cfg(cfg, kind),
            catalog,
            timeline,
            states[kind],
            diagonals,
            wallclock=states[kind]["_wallclock"],
        )
    _write_json(diag_path, diagonals.to_jsonable())
    return diagonals


def _finalize(
    out_dir: Path,
    cfg: RunConfig,
    catalog: Catalog,
    timeline: Timeline,
    state: dict,
    refs: ReferenceDiagonals,
    wallclock: float,
) -> RunResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = state["rows"]
    complete = len(rows) == timeline.tau + 1
    matrix = MerMatrix([row["values"] for row in rows]) if complete else None
    series = None
    _write_json(
        out_dir / "mer_matrix.json",
        {"format_version": 1, "tau": timeline.tau, "rows": [[r["t"], r["values"]] for r in rows]},
    )
    with (out_dir / "mer_matrix.csv").open("w", encoding="utf-8") as fh:
        fh.write("episode," + ",".join(f"mer_{i}" for i in range(timeline.tau + 1)) + "\n")
        for row in rows:
            cells = [f"{v!r}" for v in row["values"]] + [""] * (timeline.tau - row["t"])
            fh.write(f"{row['t']}," + ",".join(cells) + "\n")
    if complete and matrix is not None:
        series = metric_series(matrix, refs, include_base=cfg.include_base_in_amer)
        _write_json(
            out_dir / "metrics.json",
            {"format_version": 1, "series": series, "include_base": cfg.include_base_in_amer},
        )
        with (out_dir / "metrics.csv").open("w", encoding="utf-8") as fh:
            fh.write("episode,amer,fwt,bwt,im\n")
            for entry in series:
                cells = [
                    "" if entry[k] is None else repr(entry[k]) for k in ("amer", "fwt", "bwt", "im")
                ]
                fh.write(f"{entry['episode']}," + ",".join(cells) + "\n")
    _write_json(out_dir / "per_batch_mer.json", {str(r["t"]): r["per_batch"] for r in rows})
    (out_dir / "reference").mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "reference" / "diagonals.json", refs.to_jsonable())
    run_hash = config_hash(cfg, catalog, timeline)
    _write_json(
        out_dir / "run.json",
        {
            "format_version": 1,
            "config": cfg.to_jsonable(),
            "config_hash": run_hash,
            "catalog_sha": catalog_sha(catalog),
            "timeline": {
                "scenario": timeline.scenario,
                "seed": timeline.seed,
                "tau": timeline.tau,
                "sha": _sha(timeline_to_bytes(timeline)),
            },
            "environment": {
                "python": platform.python_version(),
                "numpy": np.__version__,
                "platform": platform.platform(),
            },
            "wallclock_sec": wallclock,
            "total_train_steps": state["total_steps"],
            "complete": complete,
        },
    )
    return RunResult(
        out_dir=out_dir,
        matrix=matrix,
        rows=rows,
        refs=refs,
        series=series,
        config_hash=run_hash,
        total_steps=state["total_steps"],
        wallclock_sec=wallclock,
    )


def run_strategy(
    catalog: Catalog,
    timeline: Timeline,
    cfg: RunConfig,
    out_dir: Path,
    cache_dir: Path,
    resume: bool = False,
    stop_after_episode: int | None = None,
) -> RunResult:
    """Execute a full strategy run (references included) into ``out_dir``.

    ``resume=True`` continues a previously interrupted run in the same
    directory; the configuration must match what is on disk. Plain incft and
    jointft runs are served from the shared reference cache (trained there on
    first need) and materialized into ``out_dir``. ``stop_after_episode``
    stops the chain early without finalizing, leaving a resumable directory
    (used to exercise crash recovery).
    """
    out_dir = Path(out_dir)
    cache_dir = Path(cache_dir)
    done = _completed_run_check(out_dir, cfg, catalog, timeline, resume)
    if done is not None:
        return done
    t0 = time.perf_counter()
    universe = TaskUniverse(catalog, cfg.task)
    evaluator = _Evaluator(universe, timeline, cfg.task.max_frames)
    refs = reference_runs(catalog, timeline, cfg, cache_dir, universe, evaluator)
    key = shared_cache_key(cfg, catalog, timeline)
    if (
        cfg.strategy.kind in ("incft", "jointft")
        and stop_after_episode is None
        and not (out_dir / "state.json").exists()
    ):
        _materialize_cached_chain(_chain_dir(cache_dir, key, cfg.strategy.kind), out_dir)
        state = _read_json(out_dir / "state.json")
        return _finalize(out_dir, cfg, catalog, timeline, state, refs, wallclock=time.perf_counter() - t0)
    base_path = _base_ckpt_path(cache_dir, key)
    runner = _ChainRunner(
        out_dir,
        catalog,
        timeline,
        cfg,
        cfg.strategy.kind,
        universe,
        evaluator,
        base_path,
        stop_after_episode=stop_after_episode,
    )
    state = runner.run()
    if stop_after_episode is not None and state["completed"] < timeline.tau:
        return RunResult(
            out_dir=out_dir,
            matrix=None,
            rows=state["rows"],
            refs=refs,
            series=None,
            config_hash=config_hash(cfg, catalog, timeline),
            total_steps=state["total_steps"],
            wallclock_sec=time.perf_counter() - t0,
        )
    return _finalize(out_dir, cfg, catalog, timeline, state, refs, wallclock=time.perf_counter() - t0)


def _completed_run_check(
    out_dir: Path, cfg: RunConfig, catalog: Catalog, timeline: Timeline, resume: bool
) -> RunResult | None:
    """Handle pre-existing run directories.

    A completed run with the same configuration is returned as-is (rerunning
    the command is a no-op); a different configuration raises; a partial run
    requires an explicit resume.
    """
    run_json = out_dir / "run.json"
    if run_json.exists():
        run_obj = _read_json(run_json)
        if run_obj.get("config_hash") != config_hash(cfg, catalog, timeline):
            raise ResumeMismatchError(
                f"{out_dir} holds a run with a different configuration; refusing to touch it"
            )
        if run_obj.get("complete"):
            return load_run_result(out_dir)
    if (out_dir / "state.json").exists() and not resume:
        raise ResumeMismatchError(f"{out_dir} holds a partial run; pass resume to continue it")
    return None


def _materialize_cached_chain(chain_dir: Path, out_dir: Path) -> None:
    if not (chain_dir / "state.json").exists():
        raise ValidationError(f"reference chain missing at {chain_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    for item in chain_dir.iterdir():
        dest = out_dir / item.name
        if item.is_dir():
            shutil.copytree(item, dest, dirs_exist_ok=True)
        else:
            shutil.copy2(item, dest)


def restart_from_joint(
    catalog: Catalog,
    timeline: Timeline,
    cfg: RunConfig,
    restart_episode: int,
    out_dir: Path,
    cache_dir: Path,
    resume: bool = False,
) -> RunResult:
    """Joint training through ``restart_episode``, then the configured strategy.

    The joint phase matches a pure joint chain bit-exactly; strategy
    bookkeeping (anchors, buffers) still runs during it so the continuation
    starts with a consistent carry-over state.
    """
    if not (1 <= restart_episode <= timeline.tau):
        raise ValidationError(f"restart_episode must be in [1, {timeline.tau}]")
    out_dir = Path(out_dir)
    cache_dir = Path(cache_dir)
    done = _completed_run_check(out_dir, cfg, catalog, timeline, resume)
    if done is not None:
        stamped = _read_json(out_dir / "run.json").get("restart_episode")
        if stamped != restart_episode:
            raise ResumeMismatchError(
                f"{out_dir} holds a run with restart point {stamped}, not {restart_episode}"
            )
        return done
    t0 = time.perf_counter()
    universe = TaskUniverse(catalog, cfg.task)
    evaluator = _Evaluator(universe, timeline, cfg.task.max_frames)
    refs = reference_runs(catalog, timeline, cfg, cache_dir, universe, evaluator)
    key = shared_cache_key(cfg, catalog, timeline)
    runner = _ChainRunner(
        out_dir,
        catalog,
        timeline,
        cfg,
        cfg.strategy.kind,
        universe,
        evaluator,
        _base_ckpt_path(cache_dir, key),
        restart_episode=restart_episode,
    )
    state = runner.run()
    result = _finalize(out_dir, cfg, catalog, timeline, state, refs, wallclock=time.perf_counter() - t0)
    run_obj = _read_json(out_dir / "run.json")
    run_obj["restart_episode"] = restart_episode
    _write_json(out_dir / "run.json", run_obj)
    return result


def load_run_result(out_dir: Path) -> RunResult:
    """Reload a finalized run directory."""
    out_dir = Path(out_dir)
    run_obj = _read_json(out_dir / "run.json")
    state = _read_json(out_dir / "state.json")
    refs = None
    ref_path = out_dir / "reference" / "diagonals.json"
    if ref_path.exists():
        refs = ReferenceDiagonals.from_jsonable(_read_json(ref_path))
    series = None
    if (out_dir / "metrics.json").exists():
        series = _read_json(out_dir / "metrics.json")["series"]
    rows = state["rows"]
    matrix = None
    if run_obj.get("complete"):
        matrix = MerMatrix([row["values"] for row in rows])
    return RunResult(
        out_dir=out_dir,
        matrix=matrix,
        rows=rows,
        refs=refs,
        series=series,
        config_hash=run_obj["config_hash"],
        total_steps=run_obj["total_train_steps"],
        wallclock_sec=run_obj["wallclock_sec"],
    )
