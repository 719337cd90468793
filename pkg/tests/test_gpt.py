import math

import numpy as np
import pytest

from shadowgen.dataset import DatasetManifest, ShadowDataset, tokenize_arrays
from shadowgen.gpt import (
    AdamW,
    DivergenceError,
    ModelConfig,
    NumericalError,
    TrainConfig,
    backward,
    cosine_warm_restarts,
    embed,
    forward_embedded,
    init_params,
    log_probs,
    loss,
    loss_and_grad,
    record_log_likelihood,
    sample_outcomes,
    train,
)
from shadowgen.gpt import checkpoint

SMALL = ModelConfig(n_qubits=4, param_dim=1, d_model=16, n_layers=2, n_heads=4, d_ff=32)


def random_tokens(rng, batch, n):
    bases = rng.integers(0, 3, (batch, n))
    outcomes = rng.choice([1, -1], (batch, n))
    return tokenize_arrays(bases, outcomes)


def jittered(cfg, seed=0, scale=0.3):
    """Parameters away from the symmetric init so every path carries signal."""
    rng = np.random.default_rng(seed + 100)
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in init_params(cfg, seed).items()}


@pytest.fixture
def batch():
    rng = np.random.default_rng(3)
    return rng.random(6), random_tokens(rng, 6, SMALL.n_qubits)


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(n_qubits=4, param_dim=1, d_model=10, n_heads=4)

    def test_defaults(self):
        cfg = ModelConfig(n_qubits=10, param_dim=3)
        assert (cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.vocab_size) == (128, 4, 8, 512, 5)
        assert cfg.max_seq == 21


class TestEmbed:
    def test_length(self, batch):
        g, tok = batch
        p = init_params(SMALL)
        assert embed(p, SMALL, g, tok).shape == (6, 2 * SMALL.n_qubits + 1, SMALL.d_model)

    def test_g_only_touches_position_zero(self, batch):
        _, tok = batch
        p = jittered(SMALL)
        a = embed(p, SMALL, np.full(6, 0.1), tok)
        b = embed(p, SMALL, np.full(6, 0.9), tok)
        assert not np.allclose(a[:, 0], b[:, 0])
        np.testing.assert_array_equal(a[:, 1:], b[:, 1:])

    def test_zero_encoder_is_bias_path(self, batch):
        _, tok = batch
        p = jittered(SMALL)
        p["g_w1"][:] = 0
        p["g_w2"][:] = 0
        a = embed(p, SMALL, np.full(6, 0.2), tok)
        b = embed(p, SMALL, np.full(6, 0.7), tok)
        np.testing.assert_array_equal(a[:, 0], b[:, 0])
        np.testing.assert_array_equal(a[0, 0], p["g_b2"])

    def test_param_dim_mismatch(self, batch):
        _, tok = batch
        with pytest.raises(ValueError, match="dimension"):
            embed(init_params(SMALL), SMALL, np.ones((6, 3)), tok)


class TestForward:
    def test_normalized(self, batch):
        g, tok = batch
        lp = log_probs(jittered(SMALL), SMALL, g, tok)
        assert lp.shape == (6, SMALL.n_qubits, 2)
        np.testing.assert_allclose(np.exp(lp).sum(-1), 1.0, atol=1e-6)

    def test_full_length_sequence_gives_same_outputs(self, batch):
        g, tok = batch
        p = jittered(SMALL)
        full = forward_embedded(p, SMALL, embed(p, SMALL, g, tok))
        np.testing.assert_array_equal(full, log_probs(p, SMALL, g, tok))

    def test_causality_exact(self, batch):
        g, tok = batch
        p = jittered(SMALL)
        x = embed(p, SMALL, g, tok)
        base = forward_embedded(p, SMALL, x)
        for pos in range(1, x.shape[1]):
            x2 = x.copy()
            x2[:, pos] = 0.0
            out = forward_embedded(p, SMALL, x2)
            # output slot i sits at position 2i+1
            earlier = [i for i in range(SMALL.n_qubits) if 2 * i + 1 < pos]
            np.testing.assert_array_equal(out[:, earlier], base[:, earlier])
            later = [i for i in range(SMALL.n_qubits) if 2 * i + 1 >= pos]
            if later:
                assert not np.array_equal(out[:, later], base[:, later])

    def test_last_outcome_token_changes_nothing(self, batch):
        g, tok = batch
        p = jittered(SMALL)
        flipped = tok.copy()
        flipped[:, -1] ^= 1
        np.testing.assert_array_equal(log_probs(p, SMALL, g, tok), log_probs(p, SMALL, g, flipped))

    def test_deterministic(self, batch):
        g, tok = batch
        p = jittered(SMALL)
        np.testing.assert_array_equal(log_probs(p, SMALL, g, tok), log_probs(p, SMALL, g, tok))

    def test_nonfinite_reports_layer(self, batch):
        g, tok = batch
        p = jittered(SMALL)
        p["layers.1.b_ff2"][0] = np.inf
        with pytest.raises(NumericalError, match="layer 1"):
            log_probs(p, SMALL, g, tok)


class TestLoss:
    def test_zero_head_gives_uniform(self, batch):
        g, tok = batch
        p = jittered(SMALL)
        p["head_w2"][:] = 0
        p["head_b2"][:] = 0
        assert loss(p, SMALL, g, tok) == pytest.approx(SMALL.n_qubits * math.log(2), abs=1e-12)

    def test_batch_order_invariant(self, batch):
        g, tok = batch
        p = jittered(SMALL)
        perm = np.random.default_rng(0).permutation(len(g))
        assert loss(p, SMALL, g[perm], tok[perm]) == pytest.approx(loss(p, SMALL, g, tok), abs=1e-12)

    def test_matches_loss_and_grad(self, batch):
        g, tok = batch
        p = jittered(SMALL)
        assert loss_and_grad(p, SMALL, g, tok)[0] == pytest.approx(loss(p, SMALL, g, tok), abs=1e-12)


class TestBackward:
    def test_finite_differences(self, batch):
        g, tok = batch
        cfg = ModelConfig(n_qubits=4, param_dim=3, d_model=16, n_layers=2, n_heads=4, d_ff=32)
        rng = np.random.default_rng(5)
        g3 = rng.dirichlet(np.ones(3), size=len(tok))
        p = jittered(cfg, 1)
        grads = backward(p, cfg, g3, tok)
        names = list(p)
        worst = 0.0
        for _ in range(60):
            name = names[rng.integers(len(names))]
            idx = tuple(int(rng.integers(s)) for s in p[name].shape)
            old = p[name][idx]
            p[name][idx] = old + 1e-5
            up = loss(p, cfg, g3, tok)
            p[name][idx] = old - 1e-5
            down = loss(p, cfg, g3, tok)
            p[name][idx] = old
            fd = (up - down) / 2e-5
            worst = max(worst, abs(fd - grads[name][idx]) / max(abs(fd), abs(grads[name][idx]), 1e-5))
        assert worst < 1e-4

    def test_unused_position_slot_has_zero_gradient(self, batch):
        g, tok = batch
        grads = backward(jittered(SMALL), SMALL, g, tok)
        # pos_emb row 2N-1 belongs to the b_N slot, which no read-out attends to
        assert np.all(grads["pos_emb"][-1] == 0.0)
        assert np.any(grads["pos_emb"][:-1] != 0.0)

    def test_duplicated_batch_same_gradient(self, batch):
        g, tok = batch
        p = jittered(SMALL)
        a = backward(p, SMALL, g, tok)
        b = backward(p, SMALL, np.concatenate([g, g]), np.concatenate([tok, tok]))
        for k in a:
            np.testing.assert_allclose(b[k], a[k], rtol=1e-10, atol=1e-14)

    def test_nonfinite_gradient_raises(self, batch):
        g, tok = batch
        p = jittered(SMALL)
        p["head_w2"][0, 0] = 1e308
        with pytest.raises(NumericalError):
            backward(p, SMALL, g, tok)


class TestSchedule:
    def test_closed_form(self):
        spe, t0, mult, lo, hi = 7, 5, 2, 1e-6, 3e-4
        boundaries = [0, 35, 105, 245, 525]
        for step in range(525):
            c = max(i for i, b in enumerate(boundaries) if b <= step)
            t_i = boundaries[c + 1] - boundaries[c]
            expected = lo + (hi - lo) * (1 + math.cos(math.pi * (step - boundaries[c]) / t_i)) / 2
            assert abs(cosine_warm_restarts(step, spe, t0, mult, lo, hi) - expected) <= 1e-12

    def test_restart_resets_to_max(self):
        assert cosine_warm_restarts(35, 7, 5, 2, 1e-6, 3e-4) == 3e-4


class TestAdamW:
    def test_single_step_matches_formula(self):
        p = {"w_a": np.array([1.0, -2.0]), "bias": np.array([0.5])}
        g = {"w_a": np.array([0.1, 0.2]), "bias": np.array([-0.3])}
        opt = AdamW(lr=0.1, weight_decay=0.5)
        opt.step(p, g)
        # first step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        np.testing.assert_allclose(p["w_a"], np.array([1.0, -2.0]) * (1 - 0.05) - 0.1 * np.sign([0.1, 0.2]), rtol=1e-6)
        np.testing.assert_allclose(p["bias"], [0.5 + 0.1], rtol=1e-6)


def one_record_dataset(n, count, outcome=1, basis=None, g=0.5, val_fraction=0.0):
    rng = np.random.default_rng(0)
    bases = rng.integers(0, 3, (count, n)) if basis is None else np.tile(basis, (count, 1))
    toks = tokenize_arrays(bases, np.full((count, n), outcome))
    man = DatasetManifest("tfim", n, [(g,)], count, 0, 1, count, val_fraction=val_fraction)
    return ShadowDataset(man, np.full((count, 1), g), toks)


TINY = ModelConfig(n_qubits=3, param_dim=1, d_model=32, n_layers=2, n_heads=4, d_ff=64)


class TestTrain:
    def test_overfit_single_record(self):
        ds = one_record_dataset(3, 8, basis=[2, 0, 1])
        hp = TrainConfig(epochs=500, batch_size=8, lr_max=3e-3, lr_min=1e-4, t0_epochs=500, t_mult=1)
        res = train(ds, TINY, hp, seed=0)
        val = [r["val_loss"] for r in res.log if r["kind"] == "epoch"]
        assert res.initial_loss == pytest.approx(3 * math.log(2), abs=0.05)
        assert min(val) < 0.01
        steps = [r["train_loss"] for r in res.log if r["kind"] == "step"]
        assert steps[-1] < steps[0]

    def test_sampling_follows_overfit_model(self):
        ds = one_record_dataset(3, 64)
        hp = TrainConfig(epochs=60, batch_size=64, lr_max=3e-3, lr_min=1e-4, t0_epochs=60, t_mult=1)
        res = train(ds, TINY, hp, seed=0)
        rng = np.random.default_rng(1)
        bases = rng.integers(0, 3, (500, 3))
        out = sample_outcomes(res.params, TINY, 0.5, bases, rng)
        assert (out == 1).mean() > 0.99

    def test_lr_trace_matches_schedule(self):
        ds = one_record_dataset(3, 40, val_fraction=0.2)
        hp = TrainConfig(epochs=7, batch_size=8, t0_epochs=2, t_mult=2)
        res = train(ds, TINY, hp, seed=0)
        steps = [r for r in res.log if r["kind"] == "step"]
        spe = res.log[0]["steps_per_epoch"]
        for r in steps:
            assert abs(r["lr"] - hp.lr(r["step"], spe)) <= 1e-12

    def test_resume_is_bit_continuous(self, tmp_path):
        ds = one_record_dataset(3, 40, val_fraction=0.2)
        hp = TrainConfig(epochs=4, batch_size=16, t0_epochs=1)
        full = train(ds, TINY, hp, seed=2, out_dir=tmp_path / "full")
        train(ds, TINY, hp, seed=2, out_dir=tmp_path / "part", max_epochs=2)
        resumed = train(ds, TINY, hp, seed=2, out_dir=tmp_path / "part", resume=True)
        for k in full.params:
            np.testing.assert_array_equal(full.params[k], resumed.params[k])
        for name in ("last.ckpt", "best.ckpt", "train_log.jsonl"):
            assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()

    def test_divergence_aborts(self):
        ds = one_record_dataset(3, 32, val_fraction=0.25)
        hp = TrainConfig(epochs=6, batch_size=8, divergence_factor=0.0, divergence_patience=3)
        with pytest.raises(DivergenceError) as err:
            train(ds, TINY, hp, seed=0)
        assert err.value.report["epoch"] == 2

    def test_family_mismatch(self):
        ds = one_record_dataset(3, 8)
        with pytest.raises(ValueError, match="does not match"):
            train(ds, ModelConfig(n_qubits=4, param_dim=1, d_model=16, n_heads=4), TrainConfig(epochs=1))


class TestSampling:
    def test_reproducible_and_well_formed(self):
        p = jittered(SMALL)
        bases = np.random.default_rng(0).integers(0, 3, (50, SMALL.n_qubits))
        a = sample_outcomes(p, SMALL, 0.3, bases, np.random.default_rng(9))
        b = sample_outcomes(p, SMALL, 0.3, bases, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) <= {-1, 1}
        tok = tokenize_arrays(bases, a)
        assert np.all(tok[:, 0::2] >= 2) and np.all(tok[:, 1::2] <= 1)

    def test_trajectory_probability_matches_loss(self):
        p = jittered(SMALL)
        rng = np.random.default_rng(4)
        bases = rng.integers(0, 3, (20, SMALL.n_qubits))
        out = sample_outcomes(p, SMALL, 0.6, bases, rng)
        tok = tokenize_arrays(bases, out)
        # product of the per-step conditionals along each sampled path
        prod = np.ones(20)
        for i in range(SMALL.n_qubits):
            lp = log_probs(p, SMALL, np.full(20, 0.6), tok)[:, i]
            prod *= np.exp(np.where(out[:, i] > 0, lp[:, 0], lp[:, 1]))
        np.testing.assert_allclose(prod, np.exp(record_log_likelihood(p, SMALL, 0.6 * np.ones(20), tok)), atol=1e-8)

    def test_sampled_frequencies_match_model(self):
        p = jittered(SMALL, scale=0.5)
        bases = np.tile([2, 0, 1, 2], (20000, 1))
        out = sample_outcomes(p, SMALL, 0.4, bases, np.random.default_rng(0))
        lp = log_probs(p, SMALL, np.array([0.4]), tokenize_arrays(bases[:1], out[:1]))
        p_plus = np.exp(lp[0, 0, 0])
        assert abs((out[:, 0] == 1).mean() - p_plus) < 4 * math.sqrt(p_plus * (1 - p_plus) / 20000)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        p = jittered(SMALL)
        opt = AdamW()
        opt.step(p, backward(p, SMALL, np.ones(2), random_tokens(np.random.default_rng(0), 2, 4)))
        sha = checkpoint.save(tmp_path / "m.ckpt", SMALL, p, opt.state_arrays(), {"step": 1})
        cfg, q, optim, meta = checkpoint.load(tmp_path / "m.ckpt")
        assert cfg == SMALL and meta == {"step": 1}
        assert list(q) == list(p)
        for k in p:
            np.testing.assert_array_equal(p[k], q[k])
        assert set(optim) == set(opt.state_arrays())
        assert checkpoint.file_sha256(tmp_path / "m.ckpt") == sha

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"nope")
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load(tmp_path / "bad.ckpt")

    def test_float32_mode(self, batch):
        g, tok = batch
        cfg = ModelConfig(n_qubits=4, param_dim=1, d_model=16, n_layers=2, n_heads=4, d_ff=32, dtype="float32")
        p = init_params(cfg)
        lossv, grads = loss_and_grad(p, cfg, g, tok)
        assert all(v.dtype == np.float32 for v in grads.values())
        np.testing.assert_allclose(np.exp(log_probs(p, cfg, g, tok)).sum(-1), 1.0, atol=1e-6)
