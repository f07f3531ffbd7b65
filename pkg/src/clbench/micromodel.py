"""Small differentiable sequence model with analytic gradients.

Architecture: a shared two-layer tanh encoder over frame features, one dense
decoder head per language, and optional per-language bottleneck adapters with
a residual connection, inserted between the encoder and the head::

    h = tanh(W2 tanh(W1 x + b1) + b2)
    z = h + Wu tanh(Wd h + bd) + bu        (only when the adapter is used)
    logits = Wh z + bh

Everything is float64 numpy; gradients are hand-derived and checked against
central finite differences in the test suite. Parameters are addressed by
name ("enc.0.W", "head.hi.W", "adapter.hi.Wd", ...) so optimizers and
regularizers can treat the model as a flat name -> array mapping.

``FULL_SCALE_REFERENCE`` records, for documentation only, the full-scale
training conventions these desk-scale defaults are scaled down from (about
1/50 of the schedule, with widths shrunk to match).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CLBenchError, ValidationError
from .taskgen import Sample

FULL_SCALE_REFERENCE = {
    "encoder": "17 conformer blocks, model dim 512, ~120M parameters",
    "vocab_per_language": 256,
    "adapter_bottleneck": 64,
    "base_steps": 150_000,
    "base_lr": 1e-4,
    "incremental_steps": 30_000,
    "incremental_lr": 5e-5,
    "batch_size": 8,
}


class MissingHeadError(CLBenchError):
    pass


class MissingAdapterError(CLBenchError):
    pass


@dataclass
class ModelConfig:
    feature_dim: int = 16
    hidden_dim: int = 32
    vocab_size: int = 16
    adapter_dim: int = 8

    def to_jsonable(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "hidden_dim": self.hidden_dim,
            "vocab_size": self.vocab_size,
            "adapter_dim": self.adapter_dim,
        }


@dataclass
class ModelState:
    """Shared encoder, per-language heads, optional per-language adapters."""

    cfg: ModelConfig
    encoder: list[tuple[np.ndarray, np.ndarray]]
    heads: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    adapters: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=dict)
    rng_seed: int = 0

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(self.encoder):
            out[f"enc.{i}.W"] = w
            out[f"enc.{i}.b"] = b
        for lang in sorted(self.heads):
            w, b = self.heads[lang]
            out[f"head.{lang}.W"] = w
            out[f"head.{lang}.b"] = b
        for lang in sorted(self.adapters):
            wd, bd, wu, bu = self.adapters[lang]
            out[f"adapter.{lang}.Wd"] = wd
            out[f"adapter.{lang}.bd"] = bd
            out[f"adapter.{lang}.Wu"] = wu
            out[f"adapter.{lang}.bu"] = bu
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def snapshot(self) -> "ModelState":
        return ModelState(
            cfg=self.cfg,
            encoder=[(w.copy(), b.copy()) for w, b in self.encoder],
            heads={k: (w.copy(), b.copy()) for k, (w, b) in self.heads.items()},
            adapters={k: tuple(a.copy() for a in arrs) for k, arrs in self.adapters.items()},  # type: ignore[misc]
            rng_seed=self.rng_seed,
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params().values())


def init_model(cfg: ModelConfig, seed: int) -> ModelState:
    """Fresh encoder with no heads; heads are added at first language exposure."""
    rng = np.random.default_rng(np.random.SeedSequence([0xA0DE1, seed]))
    dims = [cfg.feature_dim, cfg.hidden_dim, cfg.hidden_dim]
    encoder = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        encoder.append((w, np.zeros(fan_out)))
    return ModelState(cfg=cfg, encoder=encoder, rng_seed=seed)


def add_head(model: ModelState, language: str) -> None:
    """Create a head for a new language, seeded by (model seed, language).

    Creation order does not affect the head's initial weights.
    """
    if language in model.heads:
        return
    rng = np.random.default_rng(
        np.random.SeedSequence([0x3EAD, model.rng_seed, *language.encode("utf-8")])
    )
    w = rng.standard_normal((model.cfg.hidden_dim, model.cfg.vocab_size)) / np.sqrt(model.cfg.hidden_dim)
    model.heads[language] = (w, np.zeros(model.cfg.vocab_size))


def add_adapter(model: ModelState, language: str, adapter_dim: int | None = None) -> None:
    """Create a residual bottleneck adapter; starts as an exact identity map."""
    if language in model.adapters:
        return
    a = adapter_dim if adapter_dim is not None else model.cfg.adapter_dim
    if a < 1:
        raise ValidationError("adapter_dim must be >= 1")
    rng = np.random.default_rng(
        np.random.SeedSequence([0xADA4, model.rng_seed, *language.encode("utf-8")])
    )
    h = model.cfg.hidden_dim
    wd = rng.standard_normal((h, a)) / np.sqrt(h)
    # zero up-projection makes the residual path an identity at creation
    model.adapters[language] = (wd, np.zeros(a), np.zeros((a, h)), np.zeros(h))


def _forward_cache(model: ModelState, features: np.ndarray, language: str, use_adapter: bool) -> dict:
    if language not in model.heads:
        raise MissingHeadError(f"no decoder head for language {language!r}")
    if use_adapter and language not in model.adapters:
        raise MissingAdapterError(f"no adapter for language {language!r}")
    x = np.asarray(features, dtype=np.float64)
    (w1, b1), (w2, b2) = model.encoder
    h1 = np.tanh(x @ w1 + b1)
    h2 = np.tanh(h1 @ w2 + b2)
    cache = {"x": x, "h1": h1, "h2": h2, "language": language, "use_adapter": use_adapter}
    z = h2
    if use_adapter:
        wd, bd, wu, bu = model.adapters[language]
        u = np.tanh(h2 @ wd + bd)
        z = h2 + u @ wu + bu
        cache["u"] = u
    wh, bh = model.heads[language]
    cache["z"] = z
    cache["logits"] = z @ wh + bh
    return cache


def forward(
    model: ModelState, sample: Sample | np.ndarray, language: str, use_adapter: bool | None = None
) -> np.ndarray:
    """Per-frame logits (T, vocab). ``use_adapter=None`` uses one if present."""
    features = sample.features if isinstance(sample, Sample) else sample
    if use_adapter is None:
        use_adapter = language in model.adapters
    return _forward_cache(model, features, language, use_adapter)["logits"]


def _backward(model: ModelState, cache: dict, dlogits: np.ndarray, grads: dict[str, np.ndarray]) -> None:
    """Accumulate parameter gradients given d(loss)/d(logits) for one group."""
    language = cache["language"]
    wh, _ = model.heads[language]
    z, h2, h1, x = cache["z"], cache["h2"], cache["h1"], cache["x"]
    _accum(grads, f"head.{language}.W", z.T @ dlogits)
    _accum(grads, f"head.{language}.b", dlogits.sum(axis=0))
    dz = dlogits @ wh.T
    if cache["use_adapter"]:
        wd, _, wu, _ = model.adapters[language]
        u = cache["u"]
        du = dz @ wu.T
        _accum(grads, f"adapter.{language}.Wu", u.T @ dz)
        _accum(grads, f"adapter.{language}.bu", dz.sum(axis=0))
        dpre = du * (1.0 - u * u)
        _accum(grads, f"adapter.{language}.Wd", h2.T @ dpre)
        _accum(grads, f"adapter.{language}.bd", dpre.sum(axis=0))
        dh2 = dz + dpre @ wd.T
    else:
        dh2 = dz
    (w1, _), (w2, _) = model.encoder
    dpre2 = dh2 * (1.0 - h2 * h2)
    _accum(grads, "enc.1.W", h1.T @ dpre2)
    _accum(grads, "enc.1.b", dpre2.sum(axis=0))
    dh1 = dpre2 @ w2.T
    dpre1 = dh1 * (1.0 - h1 * h1)
    _accum(grads, "enc.0.W", x.T @ dpre1)
    _accum(grads, "enc.0.b", dpre1.sum(axis=0))


def _accum(grads: dict[str, np.ndarray], name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(
    model: ModelState,
    minibatch: list[tuple[Sample, str]],
    use_adapters: bool | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-frame cross-entropy over the minibatch, plus its gradients.

    Gradients cover the encoder, exactly the heads of languages present in
    the minibatch, and the adapters actually used. ``use_adapters=None``
    uses a language's adapter whenever the model has one.
    """
    if not minibatch:
        raise ValidationError("minibatch must not be empty")
    groups: dict[tuple[str, bool], list[Sample]] = {}
    for sample, language in minibatch:
        use = (language in model.adapters) if use_adapters is None else use_adapters
        if language not in model.heads:
            raise MissingHeadError(f"no decoder head for language {language!r}")
        if use and language not in model.adapters:
            raise MissingAdapterError(f"no adapter for language {language!r}")
        groups.setdefault((language, use), []).append(sample)

    # one encoder pass over all frames; heads and adapters run per group
    ordered = sorted(groups.items())
    feats_list, tokens_list, slices = [], [], []
    cursor = 0
    for (_, _), samples in ordered:
        n = sum(len(s.reference) for s in samples)
        feats_list.extend(s.features for s in samples)
        tokens_list.extend(s.reference for s in samples)
        slices.append(slice(cursor, cursor + n))
        cursor += n
    total_frames = cursor
    x = np.concatenate(feats_list, axis=0)
    (w1, b1), (w2, b2) = model.encoder
    h1 = np.tanh(x @ w1 + b1)
    h2 = np.tanh(h1 @ w2 + b2)

    grads: dict[str, np.ndarray] = {}
    dh2 = np.empty_like(h2)
    loss_sum = 0.0
    token_cursor = 0
    for ((language, use), samples), span in zip(ordered, slices):
        n = span.stop - span.start
        tokens = np.concatenate(tokens_list[token_cursor : token_cursor + len(samples)])
        token_cursor += len(samples)
        h2g = h2[span]
        z = h2g
        u = None
        if use:
            wd, bd, wu, bu = model.adapters[language]
            u = np.tanh(h2g @ wd + bd)
            z = h2g + u @ wu + bu
        wh, bh = model.heads[language]
        logits = z @ wh + bh
        probs = _softmax(logits)
        picked = probs[np.arange(n), tokens]
        loss_sum += -np.log(np.maximum(picked, 1e-300)).sum()
        dlogits = probs
        dlogits[np.arange(n), tokens] -= 1.0
        dlogits /= total_frames
        _accum(grads, f"head.{language}.W", z.T @ dlogits)
        _accum(grads, f"head.{language}.b", dlogits.sum(axis=0))
        dz = dlogits @ wh.T
        if use:
            wd, _, wu, _ = model.adapters[language]
            du = dz @ wu.T
            _accum(grads, f"adapter.{language}.Wu", u.T @ dz)
            _accum(grads, f"adapter.{language}.bu", dz.sum(axis=0))
            dpre = du * (1.0 - u * u)
            _accum(grads, f"adapter.{language}.Wd", h2g.T @ dpre)
            _accum(grads, f"adapter.{language}.bd", dpre.sum(axis=0))
            dh2[span] = dz + dpre @ wd.T
        else:
            dh2[span] = dz
    dpre2 = dh2 * (1.0 - h2 * h2)
    grads["enc.1.W"] = h1.T @ dpre2
    grads["enc.1.b"] = dpre2.sum(axis=0)
    dh1 = dpre2 @ w2.T
    dpre1 = dh1 * (1.0 - h1 * h1)
    grads["enc.0.W"] = x.T @ dpre1
    grads["enc.0.b"] = dpre1.sum(axis=0)
    return loss_sum / total_frames, grads


def nll_gradient(
    model: ModelState, sample: Sample, language: str, use_adapter: bool | None = None
) -> dict[str, np.ndarray]:
    """Gradient of the sample's mean-frame negative log-likelihood."""
    if use_adapter is None:
        use_adapter = language in model.adapters
    cache = _forward_cache(model, sample.features, language, use_adapter)
    probs = _softmax(cache["logits"])
    t = len(sample.reference)
    dlogits = probs
    dlogits[np.arange(t), sample.reference] -= 1.0
    dlogits /= t
    grads: dict[str, np.ndarray] = {}
    _backward(model, cache, dlogits, grads)
    return grads


def output_norm_gradient(
    model: ModelState, sample: Sample, language: str, use_adapter: bool | None = None
) -> dict[str, np.ndarray]:
    """Gradient of the mean-over-frames squared L2 norm of the output logits."""
    if use_adapter is None:
        use_adapter = language in model.adapters
    cache = _forward_cache(model, sample.features, language, use_adapter)
    t = cache["logits"].shape[0]
    dlogits = 2.0 * cache["logits"] / t
    grads: dict[str, np.ndarray] = {}
    _backward(model, cache, dlogits, grads)
    return grads


def output_norm_value(
    model: ModelState, sample: Sample, language: str, use_adapter: bool | None = None
) -> float:
    if use_adapter is None:
        use_adapter = language in model.adapters
    logits = _forward_cache(model, sample.features, language, use_adapter)["logits"]
    return float((logits**2).sum(axis=1).mean())


def decode(logits: np.ndarray) -> np.ndarray:
    """Per-frame argmax; ties resolve to the lowest token index."""
    return np.argmax(logits, axis=1)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptState:
    """Adam accumulators, keyed like the model's parameter names.

    ``step`` counts optimizer calls; bias correction uses per-parameter step
    counts so a head first updated late in training still gets a properly
    corrected first step (parameters absent from a step's gradients are left
    untouched, moments included).
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    key_steps: dict[str, int] = field(default_factory=dict)


def adam_step(
    model: ModelState, opt: OptState, grads: dict[str, np.ndarray]
) -> tuple[ModelState, OptState]:
    """Standard bias-corrected Adam update over the keys present in ``grads``."""
    params = model.params()
    opt.step += 1
    for name, g in grads.items():
        p = params.get(name)
        if p is None:
            raise ValidationError(f"gradient for unknown parameter {name!r}")
        if p.shape != g.shape:
            raise ValidationError(f"shape mismatch for {name!r}: {p.shape} vs {g.shape}")
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
            opt.key_steps[name] = 0
        opt.key_steps[name] += 1
        t = opt.key_steps[name]
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        m_hat = m / (1.0 - opt.beta1**t)
        v_hat = v / (1.0 - opt.beta2**t)
        p -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
        if not np.isfinite(p).all():
            raise CLBenchError(f"non-finite values in {name!r} after Adam step {opt.step}")
    return model, opt


# ---------------------------------------------------------------------------
# language sampling


def temperature_probs(batch_sizes: dict[str, int], temperature: float) -> dict[str, float]:
    """P(language) proportional to count^(1/temperature)."""
    if not batch_sizes:
        raise ValidationError("batch_sizes must not be empty")
    if temperature < 1.0:
        raise ValidationError("temperature must be >= 1")
    for lang, count in batch_sizes.items():
        if count <= 0:
            raise ValidationError(f"count for {lang!r} must be positive")
    langs = sorted(batch_sizes)
    weights = np.array([batch_sizes[lang] for lang in langs], dtype=np.float64) ** (1.0 / temperature)
    weights /= weights.sum()
    return dict(zip(langs, weights))


def temperature_schedule(batch_sizes: dict[str, int], temperature: float, seed):
    """Infinite deterministic language sampler with temperature flattening.

    ``seed`` may be an int or a numpy SeedSequence.
    """
    probs = temperature_probs(batch_sizes, temperature)
    langs = sorted(probs)
    p = np.array([probs[lang] for lang in langs])
    if isinstance(seed, np.random.SeedSequence):
        rng = np.random.default_rng(seed)
    else:
        rng = np.random.default_rng(np.random.SeedSequence([0x7E3, seed]))
    while True:
        for idx in rng.choice(len(langs), size=512, p=p):
            yield langs[idx]


# ---------------------------------------------------------------------------
# checkpoints


_CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    model: ModelState,
    opt: OptState | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
    extra_meta: dict | None = None,
) -> None:
    """Versioned binary checkpoint; load(save(x)) restores x bit-exactly."""
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.params().items():
        arrays[f"model/{name}"] = p
    meta = {
        "version": _CHECKPOINT_VERSION,
        "model_cfg": model.cfg.to_jsonable(),
        "rng_seed": model.rng_seed,
        "heads": sorted(model.heads),
        "adapters": {lang: int(arrs[0].shape[1]) for lang, arrs in sorted(model.adapters.items())},
        "opt": None,
        "extra": extra_meta,
    }
    if opt is not None:
        meta["opt"] = {
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "step": opt.step,
            "key_steps": opt.key_steps,
        }
        for name, arr in opt.m.items():
            arrays[f"opt.m/{name}"] = arr
        for name, arr in opt.v.items():
            arrays[f"opt.v/{name}"] = arr
    for name, arr in (extra_arrays or {}).items():
        arrays[f"extra/{name}"] = arr
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[ModelState, OptState | None, dict[str, np.ndarray], dict | None]:
    """Returns (model, opt, extra_arrays, extra_meta)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta["version"] != _CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {meta['version']}")
        cfg = ModelConfig(**meta["model_cfg"])
        model = ModelState(cfg=cfg, encoder=[], rng_seed=meta["rng_seed"])
        n_layers = len({k for k in data.files if k.startswith("model/enc.")}) // 2
        for i in range(n_layers):
            model.encoder.append((data[f"model/enc.{i}.W"].copy(), data[f"model/enc.{i}.b"].copy()))
        for lang in meta["heads"]:
            model.heads[lang] = (data[f"model/head.{lang}.W"].copy(), data[f"model/head.{lang}.b"].copy())
        for lang in meta["adapters"]:
            model.adapters[lang] = tuple(
                data[f"model/adapter.{lang}.{leaf}"].copy() for leaf in ("Wd", "bd", "Wu", "bu")
            )
        opt = None
        if meta["opt"] is not None:
            om = meta["opt"]
            opt = OptState(lr=om["lr"], beta1=om["beta1"], beta2=om["beta2"], eps=om["eps"], step=om["step"])
            opt.key_steps = {k: int(v) for k, v in om["key_steps"].items()}
            for k in data.files:
                if k.startswith("opt.m/"):
                    opt.m[k[len("opt.m/") :]] = data[k].copy()
                elif k.startswith("opt.v/"):
                    opt.v[k[len("opt.v/") :]] = data[k].copy()
        extra = {k[len("extra/") :]: data[k].copy() for k in data.files if k.startswith("extra/")}
        return model, opt, extra, meta["extra"]
