"""Continual-learning strategies as uniform episode trainers.

Every strategy consumes (model, carry-over state, episode data) and returns
the trained model plus updated state, warm-starting from the incoming
weights. The shared loop draws language-balanced minibatches with
temperature sampling and runs Adam with a fresh optimizer per episode (each
episode is its own finetuning run, typically at its own learning rate).

* ``incft``    - plain sequential finetuning on the episode data.
* ``jointft``  - finetuning on the union of all episodes seen so far.
* ``ewc``      - quadratic penalty anchored at the previous episode's
  parameters, weighted by a diagonal Fisher estimate that is refreshed at
  each episode end: ``F <- alpha * F + (1 - alpha) * mean(grad log p)^2``.
* ``mas``      - same penalty shape, weighted by the mean absolute gradient
  of the output's squared L2 norm, accumulated as
  ``Omega <- alpha * Omega + Omega_hat``.
* ``er``       - experience replay: a per-episode sample (default 3%,
  stratified per batch, floor-protected to at least one item) is appended to
  a grow-only buffer; training draws from buffer plus current episode with
  probability proportional to their sizes within each language.
* ``adapters`` - language-incremental only: the backbone and all existing
  heads/adapters are frozen and a fresh residual bottleneck adapter plus
  head are trained for the episode's single new language.

Regularization penalties cover the encoder and the heads of previously seen
languages; heads created this episode have no anchor and are unpenalized.
RNG streams for minibatch sampling depend only on (run seed, episode index),
never on the strategy, so degenerate configurations (e.g. a zero penalty
weight) reproduce plain finetuning bit-for-bit. Strategy bookkeeping uses
separate streams and cannot perturb training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CLBenchError, ValidationError
from .micromodel import (
    ModelState,
    OptState,
    adam_step,
    add_adapter,
    loss_and_grad,
    nll_gradient,
    output_norm_gradient,
    temperature_schedule,
)
from .taskgen import TrainPool

_SALT_TRAIN = 0x7A1
_SALT_BOOKKEEP = 0xB00C

STRATEGY_KINDS = ("incft", "jointft", "ewc", "er", "mas", "adapters")


class StrategyError(CLBenchError):
    pass


@dataclass
class StrategyConfig:
    kind: str = "incft"
    ewc_lambda: float = 5.0
    ewc_alpha: float = 0.5
    mas_lambda: float = 0.5
    mas_alpha: float = 1.0
    er_ratio: float = 0.03
    adapter_dim: int = 8
    importance_samples: int = 256

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValidationError(f"unknown strategy {self.kind!r}; supported: {', '.join(STRATEGY_KINDS)}")
        if not (0.0 < self.er_ratio <= 1.0):
            raise ValidationError("er_ratio must be in (0, 1]")
        if self.ewc_lambda < 0 or self.mas_lambda < 0:
            raise ValidationError("penalty weights must be >= 0")
        if not (0.0 <= self.ewc_alpha <= 1.0) or not (0.0 <= self.mas_alpha <= 1.0):
            raise ValidationError("alphas must be in [0, 1]")
        if self.adapter_dim < 1:
            raise ValidationError("adapter_dim must be >= 1")

    def to_jsonable(self) -> dict:
        return {
            "kind": self.kind,
            "ewc_lambda": self.ewc_lambda,
            "ewc_alpha": self.ewc_alpha,
            "mas_lambda": self.mas_lambda,
            "mas_alpha": self.mas_alpha,
            "er_ratio": self.er_ratio,
            "adapter_dim": self.adapter_dim,
            "importance_samples": self.importance_samples,
        }


@dataclass
class TrainSchedule:
    steps: int
    lr: float
    minibatch: int = 8
    temperature: float = 3.0

    def __post_init__(self):
        if self.steps < 1 or self.minibatch < 1:
            raise ValidationError("steps and minibatch must be >= 1")


@dataclass
class StrategyState:
    """Strategy carry-over between episodes.

    ``replay`` holds (batch_id, sample_index, language) references; samples
    rematerialize deterministically from the task universe, which keeps
    checkpoints small while replaying the exact original items.
    """

    anchor: dict[str, np.ndarray] | None = None
    fisher: dict[str, np.ndarray] | None = None
    importance: dict[str, np.ndarray] | None = None
    replay: list[tuple[str, int, str]] = field(default_factory=list)
    seen_languages: set[str] = field(default_factory=set)

    def to_payload(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays: dict[str, np.ndarray] = {}
        for prefix, table in (("anchor", self.anchor), ("fisher", self.fisher), ("importance", self.importance)):
            if table is not None:
                for name, arr in table.items():
                    arrays[f"{prefix}/{name}"] = arr
        meta = {
            "replay": [[b, int(i), l] for b, i, l in self.replay],
            "seen_languages": sorted(self.seen_languages),
            "present": [p for p, t in (("anchor", self.anchor), ("fisher", self.fisher), ("importance", self.importance)) if t is not None],
        }
        return arrays, meta

    @classmethod
    def from_payload(cls, arrays: dict[str, np.ndarray], meta: dict) -> "StrategyState":
        state = cls()
        for prefix in meta.get("present", []):
            table: dict[str, np.ndarray] = {}
            for key, arr in arrays.items():
                if key.startswith(prefix + "/"):
                    table[key[len(prefix) + 1 :]] = arr
            setattr(state, prefix, table)
        state.replay = [(b, int(i), l) for b, i, l in meta.get("replay", [])]
        state.seen_languages = set(meta.get("seen_languages", []))
        return state


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def ewc_penalty(
    params: dict[str, np.ndarray],
    anchor: dict[str, np.ndarray],
    weights: dict[str, np.ndarray],
    lam: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """Quadratic anchor penalty (lam/2) * sum_i w_i (theta_i - theta*_i)^2.

    Used by both EWC (Fisher weights) and MAS (importance weights); returns
    the penalty value and its exact gradient lam * w * (theta - theta*) over
    the parameters present in all three tables.
    """
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, anchored in anchor.items():
        w = weights.get(name)
        p = params.get(name)
        if w is None or p is None:
            continue
        if p.shape != anchored.shape or w.shape != anchored.shape:
            raise ValidationError(f"shape mismatch in penalty for {name!r}")
        diff = p - anchored
        grads[name] = lam * w * diff
        value += 0.5 * lam * float((w * diff * diff).sum())
    return value, grads


def update_fisher(
    model: ModelState,
    data_sample: list,
    old_fisher: dict[str, np.ndarray] | None,
    alpha: float,
) -> dict[str, np.ndarray]:
    """Diagonal Fisher refresh: mean squared per-sample log-likelihood gradients.

    ``F_new = alpha * F_old + (1 - alpha) * F_hat``; a missing old table
    counts as zeros. Entries are nonnegative by construction.
    """
    if not data_sample:
        raise ValidationError("data_sample must not be empty")
    fhat: dict[str, np.ndarray] = {}
    for sample, language in data_sample:
        for name, g in nll_gradient(model, sample, language).items():
            sq = g * g
            if name in fhat:
                fhat[name] += sq
            else:
                fhat[name] = sq
    n = len(data_sample)
    for name in fhat:
        fhat[name] /= n
    old = old_fisher or {}
    out: dict[str, np.ndarray] = {}
    for name in set(old) | set(fhat):
        prev = old.get(name)
        new = fhat.get(name)
        if prev is None:
            out[name] = (1.0 - alpha) * new
        elif new is None:
            out[name] = alpha * prev
        else:
            out[name] = alpha * prev + (1.0 - alpha) * new
    return out


def mas_importance(
    model: ModelState,
    data_sample: list,
    old_omega: dict[str, np.ndarray] | None,
    alpha: float,
) -> dict[str, np.ndarray]:
    """Importance refresh: mean absolute gradient of the squared output norm.

    ``Omega_new = alpha * Omega_old + Omega_hat`` (with alpha = 1 this is
    pure accumulation); a missing old table counts as zeros.
    """
    if not data_sample:
        raise ValidationError("data_sample must not be empty")
    ohat: dict[str, np.ndarray] = {}
    for sample, language in data_sample:
        for name, g in output_norm_gradient(model, sample, language).items():
            a = np.abs(g)
            if name in ohat:
                ohat[name] += a
            else:
                ohat[name] = a
    n = len(data_sample)
    for name in ohat:
        ohat[name] /= n
    old = old_omega or {}
    out: dict[str, np.ndarray] = {}
    for name in set(old) | set(ohat):
        prev = old.get(name)
        new = ohat.get(name)
        if prev is None:
            out[name] = new.copy()
        elif new is None:
            out[name] = alpha * prev
        else:
            out[name] = alpha * prev + new
    return out


def er_extend_buffer(
    buffer: list[tuple[str, int, str]],
    pool: TrainPool,
    ratio: float,
    seed: int,
) -> list[tuple[str, int, str]]:
    """Append a stratified without-replacement sample of the pool to the buffer.

    The episode quota is max(1, round(ratio * pool size)) with half-up
    rounding; it is apportioned across batches proportionally to their sizes
    (largest-remainder), so every batch contributes >= 0 and large batches
    contribute proportionally. Existing entries are never evicted.
    """
    if not (0.0 < ratio <= 1.0):
        raise ValidationError("ratio must be in (0, 1]")
    total = pool.total
    quota = max(1, _round_half_up(ratio * total))
    per_batch: list[tuple[str, str, int, np.ndarray | None]] = []
    for lang in sorted(pool.segments_by_language):
        for seg in pool.segments_by_language[lang]:
            per_batch.append((seg.batch_id, lang, seg.count, seg.indices))
    per_batch.sort(key=lambda item: (item[0], item[1]))
    shares = [quota * count / total for _, _, count, _ in per_batch]
    alloc = [int(math.floor(s)) for s in shares]
    remainder = quota - sum(alloc)
    order = sorted(range(len(per_batch)), key=lambda k: (-(shares[k] - math.floor(shares[k])), per_batch[k][0]))
    for k in range(remainder):
        alloc[order[k % len(per_batch)]] += 1
    rng = np.random.default_rng(np.random.SeedSequence([0xE4, seed]))
    out = list(buffer)
    for (batch_id, lang, count, indices), take in zip(per_batch, alloc):
        if take == 0:
            continue
        picked = np.sort(rng.choice(count, size=min(take, count), replace=False))
        for i in picked:
            idx = int(i) if indices is None else int(indices[int(i)])
            out.append((batch_id, idx, lang))
    return out


def _training_streams(seed: int, episode_index: int):
    root = np.random.SeedSequence([_SALT_TRAIN, seed, episode_index])
    lang_ss, draw_ss = root.spawn(2)
    return lang_ss, np.random.default_rng(draw_ss)


def bookkeeping_rng(seed: int, episode_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([_SALT_BOOKKEEP, seed, episode_index]))


def _draw_minibatch(pool: TrainPool, lang_iter, draw_rng, size: int) -> list:
    batch = []
    for _ in range(size):
        lang = next(lang_iter)
        bid, idx = pool.draw(lang, draw_rng)
        batch.append((pool.materialize(bid, idx), lang))
    return batch


def run_training_loop(
    model: ModelState,
    pool: TrainPool,
    schedule: TrainSchedule,
    seed: int,
    episode_index: int,
    penalty=None,
    trainable: set[str] | None = None,
    use_adapters: bool | None = None,
    step_log: list | None = None,
) -> ModelState:
    """Plain supervised loop shared by every strategy (and base training)."""
    lang_ss, draw_rng = _training_streams(seed, episode_index)
    lang_iter = temperature_schedule(pool.counts_by_language(), schedule.temperature, lang_ss)
    opt = OptState(lr=schedule.lr)
    for step in range(schedule.steps):
        minibatch = _draw_minibatch(pool, lang_iter, draw_rng, schedule.minibatch)
        task_loss, grads = loss_and_grad(model, minibatch, use_adapters=use_adapters)
        penalty_value = 0.0
        if penalty is not None:
            penalty_value, penalty_grads = penalty(model.params())
            for name, g in penalty_grads.items():
                if name in grads:
                    grads[name] += g
        if trainable is not None:
            grads = {name: g for name, g in grads.items() if name in trainable}
        adam_step(model, opt, grads)
        if step_log is not None:
            step_log.append(
                {"step": step, "task_loss": task_loss, "penalty": penalty_value, "objective": task_loss + penalty_value}
            )
    if not model.all_finite():
        raise StrategyError(f"non-finite parameters after episode {episode_index}")
    return model


def _importance_subsample(pool: TrainPool, rng: np.random.Generator, count: int) -> list:
    langs = pool.languages()
    counts = pool.counts_by_language()
    weights = np.array([counts[lang] for lang in langs], dtype=np.float64)
    weights /= weights.sum()
    out = []
    for _ in range(min(count, pool.total)):
        lang = langs[int(rng.choice(len(langs), p=weights))]
        bid, idx = pool.draw(lang, rng)
        out.append((pool.materialize(bid, idx), lang))
    return out


def init_episode0_state(
    cfg: StrategyConfig, model: ModelState, pool0: TrainPool, seed: int
) -> StrategyState:
    """Post-base-training bookkeeping: the state the first increment starts from."""
    state = StrategyState(seen_languages=set(pool0.languages()))
    post_episode_bookkeeping(cfg, model, state, pool0, seed, episode_index=0)
    return state


def post_episode_bookkeeping(
    cfg: StrategyConfig,
    model: ModelState,
    state: StrategyState,
    pool: TrainPool,
    seed: int,
    episode_index: int,
) -> None:
    """End-of-episode state refresh: anchors, Fisher/importance, replay buffer.

    Draws only from the bookkeeping RNG stream, so it can never perturb the
    training trajectory of this or any other strategy.
    """
    rng = bookkeeping_rng(seed, episode_index)
    if cfg.kind == "ewc":
        sample = _importance_subsample(pool, rng, cfg.importance_samples)
        state.fisher = update_fisher(model, sample, state.fisher, cfg.ewc_alpha)
        state.anchor = {k: v.copy() for k, v in model.params().items()}
    elif cfg.kind == "mas":
        sample = _importance_subsample(pool, rng, cfg.importance_samples)
        state.importance = mas_importance(model, sample, state.importance, cfg.mas_alpha)
        state.anchor = {k: v.copy() for k, v in model.params().items()}
    elif cfg.kind == "er":
        state.replay = er_extend_buffer(
            state.replay, pool, cfg.er_ratio, seed=int(rng.integers(2**63))
        )


def adapters_train(
    model: ModelState,
    pool: TrainPool,
    languages_in_episode: list[str],
    adapter_dim: int,
    scenario: str,
    schedule: TrainSchedule,
    seed: int,
    episode_index: int,
    seen_languages: set[str],
    step_log: list | None = None,
) -> ModelState:
    """Freeze everything, add and train one adapter + head for the new language."""
    if scenario != "lil":
        raise StrategyError(
            "adapters strategy is only defined for lil timelines; parameter growth "
            "per episode makes it unsuitable for dil and lidil"
        )
    new = sorted(set(languages_in_episode) - seen_languages)
    if len(new) != 1:
        raise StrategyError(f"adapters episode must introduce exactly one new language, got {new}")
    lang = new[0]
    add_adapter(model, lang, adapter_dim)
    trainable = {
        f"head.{lang}.W",
        f"head.{lang}.b",
        f"adapter.{lang}.Wd",
        f"adapter.{lang}.bd",
        f"adapter.{lang}.Wu",
        f"adapter.{lang}.bu",
    }
    return run_training_loop(
        model,
        pool,
        schedule,
        seed,
        episode_index,
        trainable=trainable,
        use_adapters=None,
        step_log=step_log,
    )


def train_episode(
    cfg: StrategyConfig,
    model: ModelState,
    sstate: StrategyState,
    pool: TrainPool,
    *,
    history_pools: list[TrainPool] | None = None,
    schedule: TrainSchedule,
    scenario: str,
    seed: int,
    episode_index: int,
    step_log: list | None = None,
) -> tuple[ModelState, StrategyState]:
    """Train one incremental episode under the configured strategy.

    The model must already have heads for every language in the episode.
    ``history_pools`` (episodes 0..t-1) is required for jointft and ignored
    otherwise. Returns the trained model and the updated carry-over state.
    """
    episode_languages = pool.languages()
    if cfg.kind == "jointft":
        if history_pools is None:
            raise StrategyError("jointft requires the data of all prior episodes")
        train_pool = TrainPool.merged(list(history_pools) + [pool])
        model = run_training_loop(model, train_pool, schedule, seed, episode_index, step_log=step_log)
    elif cfg.kind == "incft":
        model = run_training_loop(model, pool, schedule, seed, episode_index, step_log=step_log)
    elif cfg.kind == "er":
        train_pool = pool.with_replay(sstate.replay) if sstate.replay else pool
        model = run_training_loop(model, train_pool, schedule, seed, episode_index, step_log=step_log)
    elif cfg.kind in ("ewc", "mas"):
        lam = cfg.ewc_lambda if cfg.kind == "ewc" else cfg.mas_lambda
        weights = sstate.fisher if cfg.kind == "ewc" else sstate.importance
        penalty = None
        if lam > 0 and weights is not None and sstate.anchor is not None:
            anchor, table = sstate.anchor, weights

            def penalty(params, _anchor=anchor, _table=table, _lam=lam):
                return ewc_penalty(params, _anchor, _table, _lam)

        model = run_training_loop(model, pool, schedule, seed, episode_index, penalty=penalty, step_log=step_log)
    elif cfg.kind == "adapters":
        model = adapters_train(
            model,
            pool,
            episode_languages,
            cfg.adapter_dim,
            scenario,
            schedule,
            seed,
            episode_index,
            sstate.seen_languages,
            step_log=step_log,
        )
    else:
        raise StrategyError(f"unknown strategy kind {cfg.kind!r}")

    post_episode_bookkeeping(cfg, model, sstate, pool, seed, episode_index)
    sstate.seen_languages |= set(episode_languages)
    return model, sstate


def degenerate_to_incft(cfg: StrategyConfig) -> bool:
    """True when the configuration cannot differ from plain finetuning."""
    if cfg.kind == "ewc":
        return cfg.ewc_lambda == 0.0
    if cfg.kind == "mas":
        return cfg.mas_lambda == 0.0
    return cfg.kind == "incft"


def expected_buffer_growth(pool_total: int, ratio: float) -> int:
    """The exact per-episode replay quota: max(1, round(ratio * n)), half-up."""
    return max(1, _round_half_up(ratio * pool_total))
