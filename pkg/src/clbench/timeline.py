"""Compile a catalog into an episodic timeline for one of three scenarios.

* ``lil``   - language-incremental: the base episode holds the 11 highest-hour
  languages with all their domains; each later episode adds every batch of
  exactly one unseen language, in seeded-random order.
* ``dil``   - domain-incremental: the base episode holds every language with a
  seeded-random half of its domains (rounded up); remaining batches are
  assigned uniformly at random to the later episodes.
* ``lidil`` - both: the base episode holds the 11 highest-hour languages with
  half their domains; everything else (their remaining domains plus all
  batches of the other languages) is spread uniformly over later episodes.

Ranking ties are broken by ascending ISO code. "Half the domains" is rounded
up, so a one-domain language still seeds the base episode. Uniform assignment
draws one episode index per batch; episodes left empty are repaired by moving
a batch out of the largest episode, and episodes that cannot be filled (tiny
catalogs) are dropped, shrinking tau.

Builders are pure functions of (catalog, seed): the same inputs always
produce a byte-identical serialized timeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .manifest import Catalog, language_hours

DEFAULT_TAU = 11
DEFAULT_BASE_LANGUAGES = 11

SCENARIOS = ("lil", "dil", "lidil")


class TimelineError(ValidationError):
    """A scenario's preconditions are not met by the catalog."""


@dataclass(frozen=True)
class Episode:
    """One release step: a disjoint set of batches that arrive together."""

    index: int
    batch_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "batch_ids", tuple(sorted(self.batch_ids)))


@dataclass(frozen=True)
class Timeline:
    scenario: str
    seed: int
    tau: int
    episodes: tuple[Episode, ...]

    def languages_of(self, catalog: Catalog, t: int) -> set[str]:
        return {catalog.batch(b).language for b in self.episodes[t].batch_ids}

    def first_appearances(self, catalog: Catalog) -> list[int]:
        """Count of languages first appearing at each episode."""
        seen: set[str] = set()
        counts = []
        for ep in self.episodes:
            langs = {catalog.batch(b).language for b in ep.batch_ids}
            counts.append(len(langs - seen))
            seen |= langs
        return counts


def _ranked_languages(catalog: Catalog) -> list[str]:
    hours = language_hours(catalog)
    return sorted(hours, key=lambda lang: (-hours[lang], lang))


def _half_domains(catalog: Catalog, language: str, rng: np.random.Generator) -> list[str]:
    batches = sorted(b.batch_id for b in catalog.batches_for_language(language))
    take = (len(batches) + 1) // 2
    picked = rng.choice(len(batches), size=take, replace=False)
    return [batches[i] for i in sorted(picked)]


def _assign_uniform(batch_ids: list[str], tau: int, rng: np.random.Generator) -> list[list[str]]:
    """Spread batches over episodes 1..tau, repairing or dropping empties."""
    slots: list[list[str]] = [[] for _ in range(tau)]
    if batch_ids:
        draws = rng.integers(1, tau + 1, size=len(batch_ids))
        for bid, t in zip(sorted(batch_ids), draws):
            slots[t - 1].append(bid)
    changed = True
    while changed:
        changed = False
        for k, slot in enumerate(slots):
            if slot:
                continue
            sizes = [len(s) for s in slots]
            donor = int(np.argmax(sizes))
            if sizes[donor] < 2:
                continue
            moved = sorted(slots[donor])[-1]
            slots[donor].remove(moved)
            slot.append(moved)
            changed = True
    return [s for s in slots if s]


def _finish(scenario: str, seed: int, base: list[str], later: list[list[str]]) -> Timeline:
    episodes = [Episode(0, tuple(base))]
    for k, ids in enumerate(later, start=1):
        episodes.append(Episode(k, tuple(ids)))
    return Timeline(scenario=scenario, seed=int(seed), tau=len(episodes) - 1, episodes=tuple(episodes))


def build_lil(catalog: Catalog, seed: int, base_languages: int = DEFAULT_BASE_LANGUAGES) -> Timeline:
    """Language-incremental timeline: one new language per later episode."""
    ranked = _ranked_languages(catalog)
    if len(ranked) < base_languages + 1:
        raise TimelineError(
            f"lil needs at least {base_languages + 1} languages, catalog has {len(ranked)}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([0x11C, seed]))
    base_langs = ranked[:base_languages]
    rest = sorted(ranked[base_languages:])
    order = [rest[i] for i in rng.permutation(len(rest))]
    base = [b.batch_id for lang in base_langs for b in catalog.batches_for_language(lang)]
    later = [[b.batch_id for b in catalog.batches_for_language(lang)] for lang in order]
    return _finish("lil", seed, base, later)


def build_dil(catalog: Catalog, seed: int, tau: int = DEFAULT_TAU) -> Timeline:
    """Domain-incremental timeline: all languages seed the base episode."""
    if tau < 1:
        raise TimelineError("tau must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([0xD11, seed]))
    base: list[str] = []
    for lang in sorted(catalog.languages):
        base.extend(_half_domains(catalog, lang, rng))
    chosen = set(base)
    rest = [b.batch_id for b in catalog.batches if b.batch_id not in chosen]
    later = _assign_uniform(rest, tau, rng)
    return _finish("dil", seed, base, later)


def build_lidil(
    catalog: Catalog, seed: int, tau: int = DEFAULT_TAU, base_languages: int = DEFAULT_BASE_LANGUAGES
) -> Timeline:
    """Combined timeline: top-hours languages with half their domains seed E0."""
    ranked = _ranked_languages(catalog)
    if len(ranked) < base_languages + 1:
        raise TimelineError(
            f"lidil needs at least {base_languages + 1} languages, catalog has {len(ranked)}"
        )
    if tau < 1:
        raise TimelineError("tau must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([0x11D11, seed]))
    base_langs = ranked[:base_languages]
    base: list[str] = []
    for lang in sorted(base_langs):
        base.extend(_half_domains(catalog, lang, rng))
    chosen = set(base)
    rest = [b.batch_id for b in catalog.batches if b.batch_id not in chosen]
    later = _assign_uniform(rest, tau, rng)
    return _finish("lidil", seed, base, later)


BUILDERS = {"lil": build_lil, "dil": build_dil, "lidil": build_lidil}


@dataclass
class ValidationReport:
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_timeline(
    timeline: Timeline, catalog: Catalog, base_languages: int = DEFAULT_BASE_LANGUAGES
) -> ValidationReport:
    """Check structural invariants plus the per-scenario rules.

    Violations are returned as data, one message each; nothing raises.
    """
    v: list[str] = []
    seen_ids: dict[str, int] = {}
    for t, ep in enumerate(timeline.episodes):
        if ep.index != t:
            v.append(f"episode at position {t} has index {ep.index}")
        if not ep.batch_ids:
            v.append(f"episode E_{t} is empty")
        for bid in ep.batch_ids:
            if not catalog.has_batch(bid):
                v.append(f"episode E_{t} references unknown batch {bid!r}")
            elif bid in seen_ids:
                v.append(f"batch {bid!r} appears in both E_{seen_ids[bid]} and E_{t}")
            else:
                seen_ids[bid] = t
    missing = {b.batch_id for b in catalog.batches} - set(seen_ids)
    if missing:
        v.append(f"{len(missing)} catalog batches missing from the timeline (e.g. {sorted(missing)[:3]})")
    if timeline.tau != len(timeline.episodes) - 1:
        v.append(f"tau={timeline.tau} does not match episode count {len(timeline.episodes)}")

    langs_by_ep = []
    for ep in timeline.episodes:
        langs_by_ep.append(
            {catalog.batch(b).language for b in ep.batch_ids if catalog.has_batch(b)}
        )
    if not langs_by_ep:
        v.append("timeline has no episodes")
        return ValidationReport(v)
    base_langs = langs_by_ep[0]

    if timeline.scenario == "lil":
        if len(base_langs) != base_languages:
            v.append(f"lil: E_0 has {len(base_langs)} languages, expected {base_languages}")
        for lang in base_langs:
            all_ids = {b.batch_id for b in catalog.batches_for_language(lang)}
            in_base = {b for b in timeline.episodes[0].batch_ids if catalog.has_batch(b) and catalog.batch(b).language == lang}
            if in_base != all_ids:
                v.append(f"lil: E_0 language {lang!r} is missing some of its domains")
        seen = set(base_langs)
        for t in range(1, len(langs_by_ep)):
            new = langs_by_ep[t] - seen
            if len(langs_by_ep[t]) != 1 or len(new) != 1:
                v.append(f"lil: E_{t} must hold exactly one unseen language, has {sorted(langs_by_ep[t])}")
            else:
                lang = next(iter(new))
                all_ids = {b.batch_id for b in catalog.batches_for_language(lang)}
                if set(timeline.episodes[t].batch_ids) != all_ids:
                    v.append(f"lil: E_{t} does not hold all batches of {lang!r}")
            seen |= langs_by_ep[t]
    elif timeline.scenario == "dil":
        if base_langs != set(catalog.languages):
            v.append("dil: E_0 language set differs from the catalog language set")
        for t in range(1, len(langs_by_ep)):
            new = langs_by_ep[t] - base_langs
            if new:
                v.append(f"dil: E_{t} introduces languages absent from E_0: {sorted(new)}")
    elif timeline.scenario == "lidil":
        if len(base_langs) != base_languages:
            v.append(f"lidil: E_0 has {len(base_langs)} languages, expected {base_languages}")
        introduced = set().union(*langs_by_ep[1:]) - base_langs if len(langs_by_ep) > 1 else set()
        if len(catalog.languages) > base_languages and not introduced:
            v.append("lidil: no later episode introduces a new language")
    else:
        v.append(f"unknown scenario {timeline.scenario!r}")
    return ValidationReport(v)


def timeline_to_bytes(timeline: Timeline) -> bytes:
    obj = {
        "format_version": 1,
        "scenario": timeline.scenario,
        "seed": timeline.seed,
        "tau": timeline.tau,
        "episodes": [list(ep.batch_ids) for ep in timeline.episodes],
    }
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


def save_timeline(timeline: Timeline, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(timeline_to_bytes(timeline))


def load_timeline(path: str | Path) -> Timeline:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"timeline file not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"timeline JSON parse error: {exc}") from None
    try:
        episodes = tuple(Episode(t, tuple(ids)) for t, ids in enumerate(obj["episodes"]))
        timeline = Timeline(
            scenario=str(obj["scenario"]),
            seed=int(obj["seed"]),
            tau=int(obj["tau"]),
            episodes=episodes,
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"timeline file is missing fields: {exc}") from None
    if timeline.scenario not in SCENARIOS:
        raise ValidationError(f"unknown scenario {timeline.scenario!r}")
    if timeline.tau != len(episodes) - 1:
        raise ValidationError("timeline tau does not match its episode count")
    return timeline
