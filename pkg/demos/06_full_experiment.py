"""A full experiment on the bundled catalog (a few minutes of compute).

Builds a language-incremental timeline, runs plain incremental finetuning
and experience replay (references are trained once and cached), then prints
the aligned AMER series. Equivalent CLI:

    clbench build-timeline --catalog <catalog.csv> --scenario lil --seed 1 --out tl.json
    clbench run --timeline tl.json --catalog <catalog.csv> --strategy incft
    clbench run --timeline tl.json --catalog <catalog.csv> --strategy er
    clbench compare --run-dirs <run-a> <run-b> --metric amer
"""

import tempfile
from pathlib import Path

from clbench import load_bundled_catalog
from clbench.metrics import amer, bwt
from clbench.runner import RunConfig, run_strategy
from clbench.strategies import StrategyConfig
from clbench.timeline import build_lil

catalog = load_bundled_catalog()
timeline = build_lil(catalog, seed=1)
workdir = Path(tempfile.mkdtemp(prefix="clbench-demo-"))
print(f"writing runs under {workdir}")

results = {}
for kind in ("incft", "er"):
    print(f"running {kind} (first run also trains the cached references) ...")
    results[kind] = run_strategy(
        catalog,
        timeline,
        RunConfig(strategy=StrategyConfig(kind=kind), run_seed=1),
        workdir / kind,
        workdir / "cache",
    )

print("\nepisode  incft_amer  er_amer")
for t in range(timeline.tau + 1):
    a = amer(results["incft"].matrix, t)
    b = amer(results["er"].matrix, t)
    print(f"{t:>7}  {a:10.4f}  {b:7.4f}")

t = timeline.tau
print(f"\nfinal backward transfer: incft {bwt(results['incft'].matrix, t):+.4f}, "
      f"er {bwt(results['er'].matrix, t):+.4f}")
print(f"run artifacts: {sorted(p.name for p in (workdir / 'er').iterdir())}")
