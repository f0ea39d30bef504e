import numpy as np
import pytest

from ctcbridge import tensor as tt
from ctcbridge.connector import (
    ConnectorConfig,
    blank_downscale,
    reconstruct,
    reconstruct_adapter,
    reconstruct_full,
    reconstruct_topP,
    reconstruct_topS,
)
from ctcbridge.lexicon import LogitGram
from ctcbridge.rng import CounterRng


V, D, T = 6, 5, 4
WIDTH = V + 1


@pytest.fixture
def rng():
    return CounterRng(42)


@pytest.fixture
def table(rng):
    return tt.Tensor(rng.child("table").normals(WIDTH * D).reshape(WIDTH, D))


@pytest.fixture
def z(rng):
    return LogitGram(tt.Tensor(rng.child("z").normals(T * WIDTH).reshape(T, WIDTH) * 2.0))


class TestConfig:
    def test_defaults(self):
        cfg = ConnectorConfig()
        assert cfg.tau == 1.0 and cfg.blk_downscale == 1.0
        assert cfg.apply_tau_at == "inference_only"

    def test_validation(self):
        with pytest.raises(ValueError):
            ConnectorConfig(tau=0.0)
        with pytest.raises(ValueError):
            ConnectorConfig(blk_downscale=0.5)
        with pytest.raises(ValueError):
            ConnectorConfig(mode="topS")  # k missing
        with pytest.raises(ValueError):
            ConnectorConfig(mode="nope")

    def test_tau_held_back_during_training(self):
        cfg = ConnectorConfig(tau=2.0)
        assert cfg.effective_tau(at_inference=False) == 1.0
        assert cfg.effective_tau(at_inference=True) == 2.0
        always = ConnectorConfig(tau=2.0, apply_tau_at="always")
        assert always.effective_tau(at_inference=False) == 2.0


class TestBlankDownscale:
    def test_factor_one_is_identity(self, z):
        assert blank_downscale(z, 1.0) is z

    def test_shifts_blank_by_log_factor(self, z):
        out = blank_downscale(z, 1e4)
        np.testing.assert_allclose(
            z.logits.data[:, -1] - out.logits.data[:, -1], np.log(1e4), rtol=1e-5
        )
        np.testing.assert_array_equal(out.logits.data[:, :-1], z.logits.data[:, :-1])

    def test_factor_below_one_rejected(self, z):
        with pytest.raises(ValueError):
            blank_downscale(z, 0.99)

    def test_huge_factor_kills_blank_mass(self, z, table):
        cfg = ConnectorConfig(blk_downscale=1e12)
        out = reconstruct_full(z, table, cfg)
        p_nb = tt.softmax(tt.Tensor(z.logits.data[:, :V])).data
        manual = p_nb @ table.data[:V]
        np.testing.assert_allclose(out.data, manual, atol=1e-6)


class TestReconstructFull:
    def test_saturated_softmax_returns_row(self, table):
        logits = np.zeros((1, WIDTH))
        logits[0, 3] = 40.0
        out = reconstruct_full(LogitGram(tt.Tensor(logits)), table, ConnectorConfig())
        np.testing.assert_allclose(out.data[0], table.data[3], atol=1e-6)

    def test_huge_tau_gives_column_mean(self, z, table):
        out = reconstruct_full(z, table, ConnectorConfig(tau=1e6))
        np.testing.assert_allclose(out.data, table.data.mean(axis=0)[None, :].repeat(T, 0),
                                   atol=1e-4)

    def test_width_mismatch_rejected(self, z):
        with pytest.raises(ValueError):
            reconstruct_full(z, tt.Tensor(np.zeros((WIDTH + 1, D))), ConnectorConfig())

    def test_linear_in_table(self, z, rng):
        cfg = ConnectorConfig(blk_downscale=3.0, tau=0.7)
        e1 = rng.child("e1").normals(WIDTH * D).reshape(WIDTH, D)
        e2 = rng.child("e2").normals(WIDTH * D).reshape(WIDTH, D)
        a, b = 0.3, -1.7
        lhs = reconstruct_full(z, tt.Tensor(a * e1 + b * e2), cfg).data
        rhs = a * reconstruct_full(z, tt.Tensor(e1), cfg).data \
            + b * reconstruct_full(z, tt.Tensor(e2), cfg).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_gradient_wrt_table(self, z):
        cfg = ConnectorConfig(blk_downscale=2.0)

        def f(et):
            return tt.reduce_sum(reconstruct_full(z, et, cfg))

        assert tt.finite_diff_check(f, np.ones((WIDTH, D)) * 0.3) < 1e-3

    def test_gradient_outer_product_structure(self, z, table):
        # d s_t / d E[i] = o_t[i] * I, checked through the tape
        p = tt.Parameter(table.data)
        tape = tt.GradTape()
        out = reconstruct_full(z, tape.watch(p), ConnectorConfig())
        # pick out s_2[1]: gradient wrt E should be o_2 on column 1
        probe = np.zeros((T, D))
        probe[2, 1] = 1.0
        tape.backward(tt.reduce_sum(tt.mul(out, tt.Tensor(probe))))
        o = tt.softmax(z.logits).data
        np.testing.assert_allclose(p.grad[:, 1], o[2], atol=1e-6)
        assert np.abs(np.delete(p.grad, 1, axis=1)).max() == 0.0


class TestTopS:
    def test_full_k_equals_full(self, z, table):
        cfg = ConnectorConfig()
        full = reconstruct_full(z, table, cfg).data
        tops = reconstruct_topS(z, table, WIDTH, cfg).data
        np.testing.assert_allclose(tops, full, atol=1e-6)

    def test_k1_is_argmax_row_exact(self, z, table):
        out = reconstruct_topS(z, table, 1, ConnectorConfig())
        rows = table.data[np.argmax(z.logits.data, axis=1)]
        np.testing.assert_array_equal(out.data, rows)

    def test_k2_matches_masking_oracle(self, z, table):
        cfg = ConnectorConfig()
        out = reconstruct_topS(z, table, 2, cfg).data
        masked = z.logits.data.copy()
        for t in range(T):
            keep = np.argsort(-masked[t], kind="stable")[:2]
            row = np.full(WIDTH, tt.LOG_ZERO)
            row[keep] = masked[t, keep]
            masked[t] = row
        oracle = reconstruct_full(LogitGram(tt.Tensor(masked)), table, cfg).data
        np.testing.assert_allclose(out, oracle, atol=1e-6)

    def test_k_out_of_range(self, z, table):
        for bad in (0, WIDTH + 1):
            with pytest.raises(ValueError):
                reconstruct_topS(z, table, bad, ConnectorConfig())

    def test_gradient_wrt_table(self, z):
        def f(et):
            return tt.reduce_sum(reconstruct_topS(z, et, 3, ConnectorConfig()))

        assert tt.finite_diff_check(f, np.full((WIDTH, D), 0.2)) < 1e-3


class TestTopP:
    def test_k1_identity_projection(self, z, table):
        out = reconstruct_topP(z, table, 1, tt.Tensor(np.eye(D)), ConnectorConfig())
        rows = table.data[np.argmax(z.logits.data, axis=1)]
        np.testing.assert_allclose(out.data, rows, atol=1e-6)

    def test_zero_projection(self, z, table):
        out = reconstruct_topP(z, table, 2, tt.Tensor(np.zeros((2 * D, D))), ConnectorConfig())
        assert np.abs(out.data).max() == 0.0

    def test_matches_manual_concat(self, z, table, rng):
        k = 3
        proj = rng.child("proj").normals(k * D * D).reshape(k * D, D)
        out = reconstruct_topP(z, table, k, tt.Tensor(proj), ConnectorConfig())
        proj32 = tt.Tensor(proj).data.astype(np.float64)
        for t in range(T):
            idx = np.argsort(-z.logits.data[t], kind="stable")[:k]
            manual = table.data[idx].reshape(-1).astype(np.float64) @ proj32
            np.testing.assert_allclose(out.data[t], manual, atol=1e-5)

    def test_shape_mismatch_rejected(self, z, table):
        with pytest.raises(ValueError):
            reconstruct_topP(z, table, 2, tt.Tensor(np.zeros((D, D))), ConnectorConfig())

    def test_gradient_wrt_projection(self, z, table):
        def f(p):
            return tt.reduce_sum(reconstruct_topP(z, table, 2, p, ConnectorConfig()))

        assert tt.finite_diff_check(f, np.full((2 * D, D), 0.1)) < 1e-3


class TestAdapter:
    def test_degenerate_match_equals_full(self, z, table):
        cfg = ConnectorConfig()
        np.testing.assert_array_equal(
            reconstruct_adapter(z, table, cfg).data,
            reconstruct_full(z, table, cfg).data,
        )

    def test_onehot_returns_adapter_row(self, rng):
        adapter = tt.Tensor(rng.child("a").normals(4 * D).reshape(4, D))
        logits = np.zeros((1, 4))
        logits[0, 2] = 40.0
        out = reconstruct_adapter(LogitGram(tt.Tensor(logits)), adapter, ConnectorConfig())
        np.testing.assert_allclose(out.data[0], adapter.data[2], atol=1e-6)

    def test_gradient_wrt_adapter(self, z):
        def f(at):
            return tt.reduce_sum(reconstruct_adapter(z, at, ConnectorConfig()))

        assert tt.finite_diff_check(f, np.full((WIDTH, D), 0.4)) < 1e-3


class TestOrderOfOperations:
    def test_nonblank_argmax_invariant_to_knobs(self, z, table):
        base = None
        for tau in (1e-4, 0.5, 1.0, 2.0, 1e4):
            for blk in (1.0, 10.0, 1e4, 1e12):
                cfg = ConnectorConfig(tau=tau, blk_downscale=blk)
                zd = blank_downscale(z, blk)
                probs = tt.softmax(zd.logits, tau=cfg.effective_tau(True)).data
                am = np.argmax(probs[:, :V], axis=1)
                if base is None:
                    base = am
                np.testing.assert_array_equal(am, base)

    def test_downscale_applied_before_temperature(self, z, table):
        # with the documented order, tau rescales the downscaled gap:
        # logit gap between blank and a token shrinks by log(blk)/tau
        tau, blk = 2.0, 100.0
        cfg = ConnectorConfig(tau=tau, blk_downscale=blk)
        zd = blank_downscale(z, blk)
        expect = tt.softmax(zd.logits, tau=tau).data
        got = tt.softmax(blank_downscale(z, blk).logits, tau=cfg.effective_tau(True)).data
        np.testing.assert_allclose(got, expect)
        # and the fused entry point agrees
        full = reconstruct_full(z, table, cfg).data
        np.testing.assert_allclose(full, expect @ table.data.astype(np.float64), atol=1e-5)

    def test_dispatch(self, z, table, rng):
        cfg = ConnectorConfig(mode="topP", k=2)
        with pytest.raises(ValueError):
            reconstruct(z, cfg, table)  # projection missing
        proj = tt.Tensor(rng.child("p2").normals(2 * D * D).reshape(2 * D, D))
        out = reconstruct(z, cfg, table, proj=proj)
        np.testing.assert_allclose(
            out.data, reconstruct_topP(z, table, 2, proj, cfg).data
        )
