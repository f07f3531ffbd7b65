"""Five strategies on a miniature two-increment timeline, in seconds.

Uses the strategies layer directly (no run directories) on a tiny synthetic
catalog: a base language pair, then two new languages arriving one per
episode. Replay and regularization visibly reduce forgetting relative to
plain finetuning even at this scale.
"""

from decimal import Decimal

from clbench.manifest import BatchMeta, Catalog
from clbench.metrics import combine, mer
from clbench.micromodel import ModelConfig, add_head, decode, forward, init_model
from clbench.strategies import (
    StrategyConfig,
    TrainSchedule,
    init_episode0_state,
    run_training_loop,
    train_episode,
)
from clbench.taskgen import TaskConfig, TaskUniverse, TrainPool

batches = []
for lang in ("aa", "bb", "cc", "dd"):
    for d in range(2):
        batches.append(BatchMeta(f"{lang}-{d}", lang, f"d{d}", Decimal("1.00"), 150, 40))
catalog = Catalog(batches)
universe = TaskUniverse(catalog, TaskConfig(vocab_size=8, feature_dim=8, noise_sigma=0.25, seed=2))

EPISODES = [["aa-0", "aa-1", "bb-0", "bb-1"], ["cc-0", "cc-1"], ["dd-0", "dd-1"]]
SCHEDULE = TrainSchedule(steps=250, lr=2e-3, minibatch=8, temperature=2.0)


def test_mer(model, batch_ids):
    scores = []
    for bid in batch_ids:
        lang = catalog.batch(bid).language
        for s in universe.test_set(bid):
            hyp = decode(forward(model, s, lang))
            scores.append(mer(s.reference.tolist(), hyp.tolist()))
    return combine(scores).mer


def run(kind, **kw):
    cfg = StrategyConfig(kind=kind, **kw)
    model = init_model(ModelConfig(feature_dim=8, hidden_dim=16, vocab_size=8, adapter_dim=4), seed=0)
    pool0 = TrainPool.from_episode(universe, EPISODES[0])
    for lang in pool0.languages():
        add_head(model, lang)
    model = run_training_loop(model, pool0, SCHEDULE, seed=0, episode_index=0)
    sstate = init_episode0_state(cfg, model, pool0, seed=0)
    base_mer = test_mer(model, EPISODES[0])
    pools = [pool0]
    for t, ids in enumerate(EPISODES[1:], start=1):
        pool = TrainPool.from_episode(universe, ids)
        for lang in pool.languages():
            add_head(model, lang)
        model, sstate = train_episode(
            cfg, model, sstate, pool, history_pools=pools,
            schedule=SCHEDULE, scenario="lil", seed=0, episode_index=t,
        )
        pools.append(pool)
    final_on_base = test_mer(model, EPISODES[0])
    final_on_new = test_mer(model, EPISODES[-1])
    return base_mer, final_on_base, final_on_new


print(f"{'strategy':>9}  {'base@t0':>8}  {'base@t2':>8}  {'forgot':>7}  {'new@t2':>7}")
for kind, kw in (
    ("incft", {}),
    ("jointft", {}),
    ("er", {"er_ratio": 0.1}),
    ("ewc", {"ewc_lambda": 20.0}),
    ("mas", {"mas_lambda": 2.0}),
    ("adapters", {"adapter_dim": 4}),
):
    before, after, new = run(kind, **kw)
    print(f"{kind:>9}  {before:8.3f}  {after:8.3f}  {after - before:+7.3f}  {new:7.3f}")
print("\n'forgot' is the MER increase on the base episode after the two increments")
