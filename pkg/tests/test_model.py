import struct

import numpy as np
import pytest

from conftest import random_model
from persianrug import kernels
from persianrug.datagen import DataConfig, sample_batch
from persianrug.model import (
    ModelFormatError,
    ToyModel,
    TrainConfig,
    TrainingDiverged,
    forward,
    load_model,
    loss,
    loss_and_grad,
    save_model,
    should_stop,
    train,
)


class TestForward:
    def test_identity_model_reproduces_input(self, rng):
        n = 16
        m = ToyModel(np.eye(n), np.eye(n), np.zeros(n))
        x = rng.random((10, n))
        np.testing.assert_array_equal(forward(m, x), x)

    def test_large_negative_bias_silences_output(self, rng):
        m = random_model(rng, 12, 4)
        m.b[:] = -1e6
        assert not forward(m, rng.random((20, 12))).any()

    def test_two_by_one_by_two_hand_example(self):
        m = ToyModel(np.array([[1.0, 1.0]]), np.array([[1.0], [1.0]]), np.array([-0.5, -0.5]))
        np.testing.assert_allclose(forward(m, np.array([[1.0, 0.0]])), [[0.5, 0.5]])

    def test_outputs_nonnegative(self, rng):
        m = random_model(rng, 20, 5)
        assert np.all(forward(m, rng.random((30, 20))) >= 0)

    def test_dimension_mismatch(self, rng):
        m = random_model(rng, 8, 2)
        with pytest.raises(ValueError):
            forward(m, np.zeros((3, 7)))
        with pytest.raises(ValueError):
            loss_and_grad(m, np.zeros((3, 9)))


class TestLoss:
    def test_perfect_reconstruction_is_zero(self, rng):
        m = ToyModel(np.eye(6), np.eye(6), np.zeros(6))
        assert loss(m, rng.random((5, 6))) == 0.0

    def test_zero_output_gives_second_moment(self):
        n_s = 64
        m = ToyModel(np.zeros((4, n_s)), np.zeros((n_s, 4)), np.zeros(n_s))
        x = sample_batch(DataConfig(1.0, n_s, 4), 20_000)
        assert loss(m, x, per_feature=True) == pytest.approx(1 / 3, rel=3e-3)

    def test_matches_naive_per_sample_sum(self, rng):
        m = random_model(rng, 9, 3)
        x = sample_batch(DataConfig(0.3, 9, 1), 40)
        total = 0.0
        for row in x:
            out = [max(0.0, sum(sum(m.W_out[i, k] * m.W_in[k, j] for k in range(3)) * row[j]
                                for j in range(9)) + m.b[i]) for i in range(9)]
            total += sum((row[i] - out[i]) ** 2 for i in range(9))
        naive = total / len(x)
        assert loss(m, x) == pytest.approx(naive, rel=1e-12)
        assert loss(m, x, per_feature=True) == pytest.approx(naive / 9, rel=1e-12)
        assert loss_and_grad(m, x)[0] == pytest.approx(naive, rel=1e-12)


def _central_difference(model, x, which, idx, h=1e-5):
    arr = getattr(model, which)
    old = arr[idx]
    arr[idx] = old + h
    up = loss(model, x)
    arr[idx] = old - h
    down = loss(model, x)
    arr[idx] = old
    return (up - down) / (2 * h)


@pytest.mark.parametrize("backend", kernels.AVAILABLE)
def test_gradient_matches_finite_differences(rng, backend):
    m = random_model(rng, 24, 6, bias=0.05)
    x = sample_batch(DataConfig(0.3, 24, 11), 64)
    _, grads = loss_and_grad(m, x, backend=backend)
    worst = 0.0
    for which, g in zip(("W_in", "W_out", "b"), grads):
        for _ in range(7):
            idx = tuple(rng.integers(0, s) for s in g.shape)
            fd = _central_difference(m, x, which, idx)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-7))
    assert worst < 1e-4


def test_dead_region_has_zero_gradient(rng):
    m = random_model(rng, 10, 3)
    m.b[:] = -1e3
    value, (g_in, g_out, g_b) = loss_and_grad(m, rng.random((8, 10)))
    assert value > 0
    assert not g_in.any() and not g_out.any() and not g_b.any()


def test_bias_gradient_is_mean_residual_on_active_units(rng):
    m = random_model(rng, 10, 10)
    m.b[:] = 2.0  # every unit active
    x = rng.random((16, 10))
    _, (_, _, g_b) = loss_and_grad(m, x)
    np.testing.assert_allclose(g_b, np.mean(2 * (forward(m, x) - x), axis=0), rtol=1e-12, atol=1e-14)


@pytest.mark.skipif(len(kernels.AVAILABLE) < 2, reason="compiled extension not built")
@pytest.mark.parametrize("p", [0.02, 0.5])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree(rng, p, dtype):
    n_s, n_d = 96, 24
    enc = rng.standard_normal((n_s, n_d)).astype(dtype)
    dec = rng.standard_normal((n_s, n_d)).astype(dtype)
    b = (-0.2 * np.ones(n_s)).astype(dtype)
    x = sample_batch(DataConfig(p, n_s, 3), 128, dtype=dtype)
    out = {}
    for backend in kernels.AVAILABLE:
        g = [np.empty_like(enc), np.empty_like(dec), np.empty_like(b)]
        total = kernels.loss_grad(enc, dec, b, x, *g, backend=backend)
        out[backend] = (total, g, kernels.batch_loss(enc, dec, b, x, backend=backend))
    tol = 1e-12 if dtype == np.float64 else 2e-5
    (t0, g0, l0), (t1, g1, l1) = out.values()
    assert t1 == pytest.approx(t0, rel=tol) and l1 == pytest.approx(l0, rel=tol)
    assert t0 == pytest.approx(l0, rel=tol)
    for a, c in zip(g0, g1):
        np.testing.assert_allclose(c, a, rtol=0, atol=tol * 10 * np.abs(a).max())


@pytest.mark.skipif(len(kernels.AVAILABLE) < 2, reason="compiled extension not built")
def test_adam_backends_agree(rng):
    res = []
    for backend in kernels.AVAILABLE:
        q = np.linspace(-1, 1, 50)
        m = np.zeros(50)
        v = np.zeros(50)
        for t in range(1, 6):
            g = np.sin(q * t)
            kernels.adam_update(q, g, m, v, 1e-2, 0.9, 0.999, 1e-8, t, backend=backend)
        res.append(q)
    np.testing.assert_allclose(res[0], res[1], rtol=1e-14)


def test_adam_first_step_moves_by_learning_rate():
    q = np.array([1.0, -2.0])
    kernels.adam_update(q, np.array([3.0, -0.5]), np.zeros(2), np.zeros(2), 0.1, 0.9, 0.999, 0.0, 1)
    np.testing.assert_allclose(q, [0.9, -1.9])


class TestStoppingRule:
    def test_needs_two_windows(self):
        assert not should_stop([1.0])

    def test_stops_when_not_lower(self):
        assert should_stop([1.0, 1.0])
        assert should_stop([1.0, 1.1])
        assert not should_stop([1.0, 0.99])


class TestTrain:
    def test_full_width_learns_identity(self):
        model, rep = train(DataConfig(0.5, 64, 1), 64, TrainConfig(max_steps=3000, seed=1))
        assert rep.final_loss_per_feature < 1e-3
        assert rep.steps_taken <= 3000
        assert all(np.isfinite(v) and v >= 0 for _, v in rep.loss_trace)

    def test_deterministic(self):
        cfg = TrainConfig(max_steps=300, window=50, seed=5, batch_size=256)
        m1, r1 = train(DataConfig(0.1, 32, 2), 8, cfg)
        m2, r2 = train(DataConfig(0.1, 32, 2), 8, cfg)
        assert r1 == r2
        assert m1.W_in.tobytes() == m2.W_in.tobytes()
        assert m1.b.tobytes() == m2.b.tobytes()

    def test_stopping_rule_cadence(self):
        _, rep = train(DataConfig(0.1, 32, 2), 8, TrainConfig(max_steps=5000, window=20, batch_size=64))
        assert rep.steps_taken % 20 == 0
        if rep.stopped_early:
            means = [v for _, v in rep.loss_trace]
            assert means[-1] >= means[-2]
            assert all(b < a for a, b in zip(means[:-2], means[1:-1]))

    def test_max_steps_bounds_run(self):
        _, rep = train(DataConfig(0.1, 16, 2), 4, TrainConfig(max_steps=37, window=100, batch_size=32))
        assert rep.steps_taken == 37 and not rep.stopped_early

    def test_divergence_is_reported(self):
        init = ToyModel(np.full((4, 16), 1e160), np.full((16, 4), 1e160), np.zeros(16))
        with pytest.raises(TrainingDiverged) as info:
            train(DataConfig(0.5, 16, 0), 4, TrainConfig(max_steps=10, dtype="float64"), init=init)
        assert info.value.step == 1

    def test_fan_in_init_available(self):
        m = ToyModel.initialize(64, 16, seed=3, scheme="fan_in")
        assert m.W_in.std() == pytest.approx(1 / 8, rel=0.1)
        assert m.W_out.std() == pytest.approx(1 / 4, rel=0.1)
        assert not m.b.any()

    def test_tied_init_starts_with_unit_diagonal(self):
        m = ToyModel.initialize(256, 64, seed=3)
        np.testing.assert_array_equal(m.W_out, m.W_in.T)
        assert np.diag(m.W_out @ m.W_in).mean() == pytest.approx(1.0, rel=0.05)


class TestSerialization:
    def test_round_trip_is_bitwise(self, rng, tmp_path):
        m = random_model(rng, 13, 5)
        path = tmp_path / "m.tmsw"
        save_model(m, path)
        back = load_model(path)
        for a, b in ((m.W_in, back.W_in), (m.W_out, back.W_out), (m.b, back.b)):
            assert a.tobytes() == b.tobytes()

    def test_layout(self, tmp_path):
        m = ToyModel(np.arange(6.0).reshape(2, 3), np.arange(6.0, 12.0).reshape(3, 2), np.array([-1.0, -2.0, -3.0]))
        path = tmp_path / "m.tmsw"
        save_model(m, path)
        raw = path.read_bytes()
        assert raw[:4] == b"TMSW" and raw[4] == 1
        assert struct.unpack_from("<II", raw, 5) == (3, 2)
        vals = struct.unpack_from("<15d", raw, 13)
        assert vals == tuple(range(12)) + (-1.0, -2.0, -3.0)
        assert len(raw) == 13 + 15 * 8

    def test_wrong_magic(self, rng, tmp_path):
        path = tmp_path / "m.tmsw"
        save_model(random_model(rng, 4, 2), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(ModelFormatError, match="magic"):
            load_model(path)

    def test_truncated_payload_reports_position(self, rng, tmp_path):
        path = tmp_path / "m.tmsw"
        save_model(random_model(rng, 4, 2), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:40])
        with pytest.raises(ModelFormatError, match="truncated at byte 40"):
            load_model(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "m.tmsw"
        path.write_bytes(b"TMSW\x01")
        with pytest.raises(ModelFormatError, match="header"):
            load_model(path)

    def test_dimension_overflow(self, tmp_path):
        path = tmp_path / "m.tmsw"
        path.write_bytes(struct.pack("<4sBII", b"TMSW", 1, 2**20, 2**20))
        with pytest.raises(ModelFormatError, match="overflow"):
            load_model(path)

    def test_bad_version_and_trailing_bytes(self, rng, tmp_path):
        path = tmp_path / "m.tmsw"
        save_model(random_model(rng, 4, 2), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:4] + b"\x02" + raw[5:])
        with pytest.raises(ModelFormatError, match="version"):
            load_model(path)
        path.write_bytes(raw + b"\x00")
        with pytest.raises(ModelFormatError, match="trailing"):
            load_model(path)
