"""Synthetic per-(language, domain) sequence-labeling tasks.

Each language owns a set of unit-norm class centroids (one per vocabulary
token). A domain of that language sees the same centroids through its own
orthogonal rotation, class prior and noise level, so two domains of one
language differ only by a covariate shift, never by the label structure.
A sample is a short frame sequence: frame features are the rotated noisy
centroid of that frame's token, the reference is the token sequence.

Every sample is a pure function of (domain, split seed, sample index),
realized with counter-based RNG streams, so individual samples can be
materialized in any order without generating their whole batch. With zero
noise a nearest-centroid decoder recovers the reference exactly, so any
nonzero MER is attributable to the model or strategy under test.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .manifest import Catalog

_SALT_LANG = 0x1A26
_SALT_DOMAIN = 0xD03A
_SALT_SAMPLE = 0x5A3914


@dataclass
class TaskConfig:
    """Knobs of the synthetic task family.

    ``shift_strength`` in [0, 1] scales how far apart domains of one language
    drift (rotation angle and prior skew); ``noise_sigma`` sets the
    per-dimension feature noise and hence the irreducible error floor.
    """

    vocab_size: int = 16
    feature_dim: int = 16
    shift_strength: float = 0.5
    noise_sigma: float = 0.3
    min_frames: int = 8
    max_frames: int = 24
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.shift_strength <= 1.0):
            raise ValidationError(f"shift_strength must be in [0, 1], got {self.shift_strength}")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be nonnegative")
        if not (1 <= self.min_frames <= self.max_frames):
            raise ValidationError("need 1 <= min_frames <= max_frames")

    def to_jsonable(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "feature_dim": self.feature_dim,
            "shift_strength": self.shift_strength,
            "noise_sigma": self.noise_sigma,
            "min_frames": self.min_frames,
            "max_frames": self.max_frames,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class LanguageSpec:
    """Label structure of one language: unit-norm class-conditional means."""

    language: str
    vocab_size: int
    feature_dim: int
    centroids: np.ndarray
    seed: int


@dataclass(frozen=True)
class DomainSpec:
    """One district of a language: a covariate shift over the language spec."""

    language_spec: LanguageSpec
    domain: str
    rotation: np.ndarray
    class_prior: np.ndarray
    noise_sigma: float


@dataclass(frozen=True)
class Sample:
    features: np.ndarray  # (T, feature_dim)
    reference: np.ndarray  # (T,) int64 tokens


def _iso_entropy(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def gen_language(iso: str, master_seed: int, vocab_size: int = 16, feature_dim: int = 16) -> LanguageSpec:
    """Deterministic language spec; distinct ISO codes give distinct centroids."""
    rng = np.random.default_rng(np.random.SeedSequence([_SALT_LANG, master_seed, *_iso_entropy(iso)]))
    centroids = rng.standard_normal((vocab_size, feature_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    return LanguageSpec(iso, vocab_size, feature_dim, centroids, master_seed)


def gen_domain(
    spec: LanguageSpec, domain: str, shift_strength: float, noise_sigma: float = 0.3
) -> DomainSpec:
    """Derive a domain's rotation, class prior and noise from the language spec.

    shift_strength 0 yields the identity rotation and a uniform prior; both
    the rotation angle and the prior skew grow monotonically with it.
    """
    if not (0.0 <= shift_strength <= 1.0):
        raise ValidationError(f"shift_strength must be in [0, 1], got {shift_strength}")
    rng = np.random.default_rng(
        np.random.SeedSequence(
            [_SALT_DOMAIN, spec.seed, *_iso_entropy(spec.language), 0x7C, *_iso_entropy(domain)]
        )
    )
    dim = spec.feature_dim
    rotation = np.eye(dim)
    n_planes = dim // 2
    for _ in range(n_planes):
        i, j = rng.choice(dim, size=2, replace=False)
        theta = shift_strength * rng.uniform(-np.pi / 2, np.pi / 2)
        g = np.eye(dim)
        c, s = np.cos(theta), np.sin(theta)
        g[i, i] = c
        g[j, j] = c
        g[i, j] = -s
        g[j, i] = s
        rotation = g @ rotation
    logits = shift_strength * rng.standard_normal(spec.vocab_size)
    prior = np.exp(logits - logits.max())
    prior /= prior.sum()
    return DomainSpec(spec, domain, rotation, prior, float(noise_sigma))


def _sample_key(dspec: DomainSpec, seed: int) -> np.ndarray:
    ss = np.random.SeedSequence(
        [
            _SALT_SAMPLE,
            seed,
            dspec.language_spec.seed,
            *_iso_entropy(dspec.language_spec.language),
            0x7C,
            *_iso_entropy(dspec.domain),
        ]
    )
    return ss.generate_state(2, np.uint64)


def _sample_from_key(
    dspec: DomainSpec, key: np.ndarray, index: int, min_frames: int, max_frames: int
) -> Sample:
    rng = np.random.Generator(np.random.Philox(key=key, counter=index << 128))
    t = int(rng.integers(min_frames, max_frames + 1))
    cum = np.cumsum(dspec.class_prior)
    tokens = np.searchsorted(cum, rng.random(t) * cum[-1], side="right")
    np.minimum(tokens, dspec.language_spec.vocab_size - 1, out=tokens)
    noise = rng.standard_normal((t, dspec.language_spec.feature_dim))
    features = (dspec.language_spec.centroids[tokens] + dspec.noise_sigma * noise) @ dspec.rotation.T
    return Sample(features=features, reference=tokens.astype(np.int64))


def gen_sample(
    dspec: DomainSpec, seed: int, index: int, min_frames: int = 8, max_frames: int = 24
) -> Sample:
    """Sample ``index`` of the batch keyed by (dspec, seed), generated alone."""
    return _sample_from_key(dspec, _sample_key(dspec, seed), index, min_frames, max_frames)


def gen_batch(
    dspec: DomainSpec, n: int, seed: int, min_frames: int = 8, max_frames: int = 24
) -> list[Sample]:
    """All ``n`` samples of a batch; element i equals ``gen_sample(..., index=i)``."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    key = _sample_key(dspec, seed)
    return [_sample_from_key(dspec, key, i, min_frames, max_frames) for i in range(n)]


def bayes_decode(dspec: DomainSpec, features: np.ndarray) -> np.ndarray:
    """Nearest rotated-centroid decoding (the generative-model optimum)."""
    rotated = dspec.language_spec.centroids @ dspec.rotation.T
    d2 = ((features[:, None, :] - rotated[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def dump_batch(samples: list[Sample], path) -> None:
    """Optional offline dump: concatenated frames plus per-sample lengths."""
    lengths = np.array([len(s.reference) for s in samples], dtype=np.int64)
    np.savez(
        path,
        lengths=lengths,
        features=np.concatenate([s.features for s in samples], axis=0),
        references=np.concatenate([s.reference for s in samples]),
    )


def load_batch(path) -> list[Sample]:
    with np.load(path) as data:
        lengths = data["lengths"]
        features = data["features"]
        references = data["references"]
    out = []
    offset = 0
    for t in lengths:
        out.append(Sample(features=features[offset : offset + t], reference=references[offset : offset + t]))
        offset += int(t)
    return out


# ---------------------------------------------------------------------------
# catalog-backed universe and training pools


class TaskUniverse:
    """Lazy synthetic data universe over a catalog.

    Derives one LanguageSpec per ISO code and one DomainSpec per batch from
    the config seed, and materializes train samples on demand (test splits
    are generated once per batch and cached; they use a separate seed stream
    from the train split).
    """

    _TRAIN, _TEST = 1, 2

    def __init__(self, catalog: Catalog, cfg: TaskConfig):
        self.catalog = catalog
        self.cfg = cfg
        self._lang_specs: dict[str, LanguageSpec] = {}
        self._domain_specs: dict[str, DomainSpec] = {}
        self._keys: dict[tuple[str, int], np.ndarray] = {}
        self._test_cache: dict[str, list[Sample]] = {}

    def language_spec(self, iso: str) -> LanguageSpec:
        if iso not in self._lang_specs:
            self._lang_specs[iso] = gen_language(
                iso, self.cfg.seed, self.cfg.vocab_size, self.cfg.feature_dim
            )
        return self._lang_specs[iso]

    def domain_spec(self, batch_id: str) -> DomainSpec:
        if batch_id not in self._domain_specs:
            meta = self.catalog.batch(batch_id)
            self._domain_specs[batch_id] = gen_domain(
                self.language_spec(meta.language),
                meta.domain,
                self.cfg.shift_strength,
                self.cfg.noise_sigma,
            )
        return self._domain_specs[batch_id]

    def _key(self, batch_id: str, split: int) -> np.ndarray:
        k = (batch_id, split)
        if k not in self._keys:
            self._keys[k] = _sample_key(self.domain_spec(batch_id), self.cfg.seed * 4 + split)
        return self._keys[k]

    def train_sample(self, batch_id: str, index: int) -> Sample:
        meta = self.catalog.batch(batch_id)
        if not (0 <= index < meta.n_train):
            raise IndexError(f"train index {index} out of range for batch {batch_id!r}")
        return _sample_from_key(
            self.domain_spec(batch_id),
            self._key(batch_id, self._TRAIN),
            index,
            self.cfg.min_frames,
            self.cfg.max_frames,
        )

    def test_set(self, batch_id: str) -> list[Sample]:
        if batch_id not in self._test_cache:
            meta = self.catalog.batch(batch_id)
            dspec = self.domain_spec(batch_id)
            key = self._key(batch_id, self._TEST)
            self._test_cache[batch_id] = [
                _sample_from_key(dspec, key, i, self.cfg.min_frames, self.cfg.max_frames)
                for i in range(meta.n_test)
            ]
        return self._test_cache[batch_id]


@dataclass
class _Segment:
    batch_id: str
    language: str
    # either an implicit range [0, count) of train indices, or explicit indices
    count: int
    indices: np.ndarray | None = None


@dataclass
class TrainPool:
    """A weighted collection of train-sample references, grouped by language."""

    universe: TaskUniverse
    segments_by_language: dict[str, list[_Segment]] = field(default_factory=dict)

    @classmethod
    def from_episode(cls, universe: TaskUniverse, batch_ids) -> "TrainPool":
        pool = cls(universe)
        for bid in sorted(batch_ids):
            meta = universe.catalog.batch(bid)
            pool._add(_Segment(bid, meta.language, meta.n_train))
        return pool

    @classmethod
    def merged(cls, pools: list["TrainPool"]) -> "TrainPool":
        assert pools, "need at least one pool"
        out = cls(pools[0].universe)
        for pool in pools:
            for segs in pool.segments_by_language.values():
                for seg in segs:
                    out._add(seg)
        return out

    def _add(self, seg: _Segment) -> None:
        self.segments_by_language.setdefault(seg.language, []).append(seg)

    def with_replay(self, refs: list[tuple[str, int, str]]) -> "TrainPool":
        """Pool extended with explicit (batch_id, index, language) references."""
        out = TrainPool(self.universe, {k: list(v) for k, v in self.segments_by_language.items()})
        grouped: dict[tuple[str, str], list[int]] = {}
        for batch_id, index, language in refs:
            grouped.setdefault((batch_id, language), []).append(index)
        for (batch_id, language), idxs in sorted(grouped.items()):
            out._add(_Segment(batch_id, language, len(idxs), np.asarray(idxs, dtype=np.int64)))
        return out

    def counts_by_language(self) -> dict[str, int]:
        return {
            lang: sum(seg.count for seg in segs)
            for lang, segs in sorted(self.segments_by_language.items())
        }

    @property
    def total(self) -> int:
        return sum(self.counts_by_language().values())

    def languages(self) -> list[str]:
        return sorted(self.segments_by_language)

    def batch_sizes(self) -> dict[str, int]:
        """Per-batch reference counts (summed over segments of the batch)."""
        sizes: dict[str, int] = {}
        for segs in self.segments_by_language.values():
            for seg in segs:
                sizes[seg.batch_id] = sizes.get(seg.batch_id, 0) + seg.count
        return sizes

    def draw(self, language: str, rng: np.random.Generator) -> tuple[str, int]:
        """Uniformly pick one reference of the given language."""
        segs = self.segments_by_language[language]
        total = sum(seg.count for seg in segs)
        pick = int(rng.integers(total))
        for seg in segs:
            if pick < seg.count:
                idx = pick if seg.indices is None else int(seg.indices[pick])
                return seg.batch_id, idx
            pick -= seg.count
        raise AssertionError("unreachable")

    def materialize(self, batch_id: str, index: int) -> Sample:
        return self.universe.train_sample(batch_id, index)

    def iter_refs(self):
        """Every (batch_id, index, language) reference, in deterministic order."""
        for lang in sorted(self.segments_by_language):
            for seg in self.segments_by_language[lang]:
                if seg.indices is None:
                    for i in range(seg.count):
                        yield seg.batch_id, i, lang
                else:
                    for i in seg.indices:
                        yield seg.batch_id, int(i), lang
