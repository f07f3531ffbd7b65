import math

import numpy as np
import pytest

from clbench.errors import ValidationError
from clbench.metrics import combine, mer
from clbench.micromodel import (
    MissingAdapterError,
    MissingHeadError,
    ModelConfig,
    OptState,
    adam_step,
    add_adapter,
    add_head,
    decode,
    forward,
    load_checkpoint,
    loss_and_grad,
    nll_gradient,
    output_norm_gradient,
    output_norm_value,
    save_checkpoint,
    temperature_probs,
    temperature_schedule,
    init_model,
)
from clbench.taskgen import Sample, TaskConfig, gen_batch, gen_domain, gen_language


def tiny_model(seed=0, langs=("hi",), adapters=(), feature_dim=3, hidden=4, vocab=3, adapter_dim=2):
    cfg = ModelConfig(feature_dim=feature_dim, hidden_dim=hidden, vocab_size=vocab, adapter_dim=adapter_dim)
    model = init_model(cfg, seed)
    for lang in langs:
        add_head(model, lang)
    for lang in adapters:
        add_adapter(model, lang)
    return model


def rand_sample(rng, t, feature_dim, vocab):
    return Sample(
        features=rng.standard_normal((t, feature_dim)),
        reference=rng.integers(0, vocab, size=t).astype(np.int64),
    )


def fd_gradient(fn, model, name, h=1e-5):
    """Central finite differences of scalar fn w.r.t. the named parameter."""
    p = model.params()[name]
    grad = np.zeros_like(p)
    it = np.nditer(p, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = p[idx]
        p[idx] = orig + h
        f_plus = fn()
        p[idx] = orig - h
        f_minus = fn()
        p[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2 * h)
        it.iternext()
    return grad


def assert_grads_close(analytic, numeric, rel=1e-4):
    denom = max(np.abs(numeric).max(), 1e-8)
    assert np.abs(analytic - numeric).max() / denom < rel


class TestForward:
    def test_zero_weight_model_uniform(self):
        model = tiny_model()
        for i, (w, b) in enumerate(model.encoder):
            model.encoder[i] = (np.zeros_like(w), np.zeros_like(b))
        w, b = model.heads["hi"]
        model.heads["hi"] = (np.zeros_like(w), np.zeros_like(b))
        rng = np.random.default_rng(0)
        s = rand_sample(rng, 5, 3, 3)
        logits = forward(model, s, "hi")
        assert np.all(logits == 0.0)

    def test_missing_head(self):
        model = tiny_model()
        rng = np.random.default_rng(0)
        with pytest.raises(MissingHeadError):
            forward(model, rand_sample(rng, 2, 3, 3), "ta")

    def test_missing_adapter(self):
        model = tiny_model()
        rng = np.random.default_rng(0)
        with pytest.raises(MissingAdapterError):
            forward(model, rand_sample(rng, 2, 3, 3), "hi", use_adapter=True)

    def test_deterministic(self):
        model = tiny_model(seed=3)
        rng = np.random.default_rng(1)
        s = rand_sample(rng, 6, 3, 3)
        a = forward(model, s, "hi")
        b = forward(model, s, "hi")
        assert np.array_equal(a, b)

    def test_zero_adapter_is_identity(self):
        model = tiny_model(adapters=("hi",))
        rng = np.random.default_rng(2)
        s = rand_sample(rng, 4, 3, 3)
        with_adapter = forward(model, s, "hi", use_adapter=True)
        without = forward(model, s, "hi", use_adapter=False)
        # freshly created adapters have a zero up-projection
        assert np.array_equal(with_adapter, without)

    def test_fully_zeroed_adapter_is_identity(self):
        model = tiny_model(adapters=("hi",))
        model.adapters["hi"] = tuple(np.zeros_like(a) for a in model.adapters["hi"])
        rng = np.random.default_rng(2)
        s = rand_sample(rng, 4, 3, 3)
        assert np.array_equal(
            forward(model, s, "hi", use_adapter=True), forward(model, s, "hi", use_adapter=False)
        )


class TestLossAndGrad:
    def test_uniform_logits_loss_is_log_vocab(self):
        model = tiny_model(vocab=16, feature_dim=4, hidden=5)
        for i, (w, b) in enumerate(model.encoder):
            model.encoder[i] = (np.zeros_like(w), np.zeros_like(b))
        w, b = model.heads["hi"]
        model.heads["hi"] = (np.zeros_like(w), np.zeros_like(b))
        rng = np.random.default_rng(0)
        s = rand_sample(rng, 7, 4, 16)
        loss, _ = loss_and_grad(model, [(s, "hi")])
        assert loss == pytest.approx(math.log(16), abs=1e-12)

    def test_head_isolation(self):
        model = tiny_model(langs=("hi", "ta"))
        rng = np.random.default_rng(5)
        s = rand_sample(rng, 5, 3, 3)
        _, grads = loss_and_grad(model, [(s, "hi")])
        assert "head.hi.W" in grads
        assert "head.ta.W" not in grads and "head.ta.b" not in grads

    @pytest.mark.parametrize("instance", range(20))
    def test_gradients_match_finite_differences(self, instance):
        rng = np.random.default_rng(100 + instance)
        model = tiny_model(seed=instance, langs=("hi", "ta"), adapters=("ta",))
        # give the adapter a nonzero up-projection so its gradient is generic
        wd, bd, wu, bu = model.adapters["ta"]
        model.adapters["ta"] = (wd, bd, rng.standard_normal(wu.shape) * 0.3, rng.standard_normal(bu.shape) * 0.1)
        minibatch = [
            (rand_sample(rng, int(rng.integers(2, 5)), 3, 3), "hi"),
            (rand_sample(rng, int(rng.integers(2, 5)), 3, 3), "ta"),
        ]
        _, grads = loss_and_grad(model, minibatch)

        def loss_fn():
            return loss_and_grad(model, minibatch)[0]

        for name in grads:
            numeric = fd_gradient(loss_fn, model, name)
            assert_grads_close(grads[name], numeric)

    def test_empty_minibatch(self):
        with pytest.raises(ValidationError):
            loss_and_grad(tiny_model(), [])


class TestAuxGradients:
    @pytest.mark.parametrize("instance", range(20))
    def test_output_norm_gradient_matches_fd(self, instance):
        rng = np.random.default_rng(300 + instance)
        use_adapter = instance % 2 == 0
        model = tiny_model(seed=instance, adapters=("hi",) if use_adapter else ())
        if use_adapter:
            wd, bd, wu, bu = model.adapters["hi"]
            model.adapters["hi"] = (wd, bd, rng.standard_normal(wu.shape) * 0.3, bu)
        s = rand_sample(rng, 3, 3, 3)
        grads = output_norm_gradient(model, s, "hi")

        def value_fn():
            return output_norm_value(model, s, "hi")

        for name in grads:
            numeric = fd_gradient(value_fn, model, name)
            assert_grads_close(grads[name], numeric)

    def test_nll_gradient_matches_loss_grad_single_sample(self):
        rng = np.random.default_rng(9)
        model = tiny_model(seed=4)
        s = rand_sample(rng, 4, 3, 3)
        a = nll_gradient(model, s, "hi")
        _, b = loss_and_grad(model, [(s, "hi")])
        for name in a:
            assert np.allclose(a[name], b[name], atol=1e-12)

    def test_zero_output_norm_gradient_for_final_bias(self):
        model = tiny_model()
        w, b = model.heads["hi"]
        model.heads["hi"] = (np.zeros_like(w), np.zeros_like(b))
        rng = np.random.default_rng(2)
        s = rand_sample(rng, 4, 3, 3)
        grads = output_norm_gradient(model, s, "hi")
        # d||f||^2/db = 2f = 0 when the output is identically zero
        assert np.all(grads["head.hi.b"] == 0.0)


class TestAdam:
    def test_zero_gradient_no_move(self):
        model = tiny_model()
        opt = OptState(lr=0.01)
        before = {k: v.copy() for k, v in model.params().items()}
        grads = {k: np.zeros_like(v) for k, v in model.params().items()}
        adam_step(model, opt, grads)
        assert opt.step == 1
        for k, v in model.params().items():
            assert np.array_equal(v, before[k])

    def test_constant_gradient_moves_against_sign(self):
        model = tiny_model()
        opt = OptState(lr=0.01)
        name = "enc.0.W"
        start = model.params()[name].copy()
        g = np.ones_like(start)
        for _ in range(50):
            adam_step(model, opt, {name: g.copy()})
        assert np.all(model.params()[name] < start)

    def test_first_step_magnitude_is_lr(self):
        # with zero moments, one bias-corrected step moves by ~lr*sign(g)
        model = tiny_model()
        opt = OptState(lr=0.01)
        name = "enc.1.W"
        start = model.params()[name].copy()
        rng = np.random.default_rng(3)
        g = rng.standard_normal(start.shape)
        adam_step(model, opt, {name: g})
        moved = model.params()[name] - start
        expected = -opt.lr * g / (np.abs(g) + opt.eps)
        assert np.allclose(moved, expected, atol=1e-12)

    def test_shape_mismatch(self):
        model = tiny_model()
        with pytest.raises(ValidationError):
            adam_step(model, OptState(), {"enc.0.W": np.zeros(3)})

    def test_untouched_keys_keep_state(self):
        model = tiny_model(langs=("hi", "ta"))
        opt = OptState(lr=0.01)
        rng = np.random.default_rng(1)
        ta_before = model.heads["ta"][0].copy()
        for _ in range(10):
            g = {"head.hi.W": rng.standard_normal(model.heads["hi"][0].shape)}
            adam_step(model, opt, g)
        assert np.array_equal(model.heads["ta"][0], ta_before)
        assert "head.ta.W" not in opt.m


class TestDecode:
    def test_unique_maxima(self):
        logits = np.array([[0.1, 0.9, 0.0], [2.0, 1.0, 0.0]])
        assert decode(logits).tolist() == [1, 0]

    def test_tie_goes_to_lowest_index(self):
        logits = np.zeros((3, 4))
        assert decode(logits).tolist() == [0, 0, 0]

    def test_matches_row_scan(self):
        rng = np.random.default_rng(7)
        logits = rng.standard_normal((50, 9))
        got = decode(logits)
        for t in range(50):
            best, arg = -np.inf, -1
            for k in range(9):
                if logits[t, k] > best:
                    best, arg = logits[t, k], k
            assert got[t] == arg


class TestTemperature:
    def test_temperature_one_is_proportional(self):
        probs = temperature_probs({"a": 90, "b": 10}, 1.0)
        assert probs["a"] == pytest.approx(0.9)
        assert probs["b"] == pytest.approx(0.1)

    def test_high_temperature_flattens(self):
        probs = temperature_probs({"a": 90, "b": 10}, 1e9)
        assert probs["a"] == pytest.approx(0.5, abs=1e-6)

    def test_derived_example(self):
        # normalize (100^0.5, 10^0.5) = (10, 3.1623) -> (0.760, 0.240)
        probs = temperature_probs({"a": 100, "b": 10}, 2.0)
        assert probs["a"] == pytest.approx(10 / (10 + math.sqrt(10)), abs=1e-12)
        assert probs["a"] == pytest.approx(0.760, abs=5e-4)
        assert probs["b"] == pytest.approx(0.240, abs=5e-4)

    def test_sampler_deterministic(self):
        a = temperature_schedule({"x": 5, "y": 7}, 2.0, seed=3)
        b = temperature_schedule({"x": 5, "y": 7}, 2.0, seed=3)
        assert [next(a) for _ in range(40)] == [next(b) for _ in range(40)]

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValidationError):
            temperature_probs({}, 1.0)
        with pytest.raises(ValidationError):
            temperature_probs({"a": 5}, 0.5)
        with pytest.raises(ValidationError):
            temperature_probs({"a": 0}, 2.0)


class TestTrainingSanity:
    def test_noise_free_single_domain_learnable(self):
        # 200 Adam steps on a separable task: loss trends down, held-out MER < 0.05
        task = TaskConfig(vocab_size=8, feature_dim=8, noise_sigma=0.0, seed=5)
        spec = gen_language("xx", task.seed, task.vocab_size, task.feature_dim)
        dspec = gen_domain(spec, "d1", 0.5, noise_sigma=0.0)
        train = gen_batch(dspec, 64, seed=1)
        held_out = gen_batch(dspec, 32, seed=2)
        model = init_model(ModelConfig(feature_dim=8, hidden_dim=16, vocab_size=8), seed=0)
        add_head(model, "xx")
        opt = OptState(lr=5e-3)
        rng = np.random.default_rng(0)
        losses = []
        for _ in range(200):
            batch = [(train[i], "xx") for i in rng.integers(0, len(train), size=8)]
            loss, grads = loss_and_grad(model, batch)
            losses.append(loss)
            adam_step(model, opt, grads)
        assert np.mean(losses[-50:]) < np.mean(losses[:50])
        assert model.all_finite()
        scores = []
        for s in held_out:
            hyp = decode(forward(model, s, "xx"))
            scores.append(mer(s.reference.tolist(), hyp.tolist()))
        assert combine(scores).mer < 0.05


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = tiny_model(seed=9, langs=("hi", "ta"), adapters=("ta",))
        opt = OptState(lr=0.02)
        rng = np.random.default_rng(0)
        s = rand_sample(rng, 5, 3, 3)
        for _ in range(3):
            _, grads = loss_and_grad(model, [(s, "hi")])
            adam_step(model, opt, grads)
        extra = {"fisher/enc.0.W": rng.standard_normal(model.params()["enc.0.W"].shape)}
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, model, opt, extra_arrays=extra, extra_meta={"note": 1})
        loaded, lopt, lextra, lmeta = load_checkpoint(path)
        for k, v in model.params().items():
            assert np.array_equal(loaded.params()[k], v)
        assert lopt is not None and lopt.step == opt.step and lopt.lr == opt.lr
        for k in opt.m:
            assert np.array_equal(lopt.m[k], opt.m[k])
            assert np.array_equal(lopt.v[k], opt.v[k])
        assert np.array_equal(lextra["fisher/enc.0.W"], extra["fisher/enc.0.W"])
        assert lmeta == {"note": 1}

    def test_snapshot_independent(self):
        model = tiny_model()
        snap = model.snapshot()
        model.encoder[0][0][0, 0] += 1.0
        assert snap.encoder[0][0][0, 0] != model.encoder[0][0][0, 0]
