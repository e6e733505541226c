import numpy as np
import pytest

from spironet import blocks as B
from spironet import tensor as T
from spironet.blocks import ParamRegistry
from spironet.fourier import amplitude_phase, from_amplitude_phase, irfft2, rfft2
from spironet.tensor import ShapeError, Tensor


def tens(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


def make_spatial(cin, cout, seed=0):
    reg = ParamRegistry(np.float64)
    return B.init_spatial_block(reg, np.random.default_rng(seed), "b", cin, cout), reg


def make_freq(cin, cout, seed=0):
    reg = ParamRegistry(np.float64)
    return B.init_frequency_block(reg, np.random.default_rng(seed), "b", cin, cout), reg


class TestSpatialBlock:
    def test_zero_input_zero_bias_gives_zero(self):
        p, _ = make_spatial(2, 3)
        out = B.spatial_encoder_block(tens(np.zeros((1, 2, 4, 4))), p, train=True)
        assert np.abs(out.data).max() == 0.0

    def test_degenerate_second_conv_passes_relu(self):
        p, _ = make_spatial(3, 3, seed=1)
        assert p.proj is None  # identity residual
        p.cb2.conv.w.data[...] = 0.0
        p.cb2.conv.b.data[...] = 0.0
        rng = np.random.default_rng(2)
        f = rng.standard_normal((2, 3, 4, 4))
        out = B.spatial_encoder_block(tens(f), p, train=True)
        assert np.abs(out.data - np.maximum(f, 0)).max() < 1e-12

    def test_matches_op_composition(self):
        p, _ = make_spatial(2, 4, seed=3)
        rng = np.random.default_rng(4)
        f = tens(rng.standard_normal((1, 2, 6, 6)))
        got = B.spatial_encoder_block(f, p, train=True).data

        h = T.relu(T.batchnorm2d(
            T.conv2d(f, p.cb1.conv.w, p.cb1.conv.b, padding=1),
            p.cb1.bn.gamma, p.cb1.bn.beta,
            p.cb1.bn.running_mean.copy(), p.cb1.bn.running_var.copy(), True))
        y = T.batchnorm2d(
            T.conv2d(h, p.cb2.conv.w, p.cb2.conv.b, padding=1),
            p.cb2.bn.gamma, p.cb2.bn.beta,
            p.cb2.bn.running_mean.copy(), p.cb2.bn.running_var.copy(), True)
        res = T.conv2d(f, p.proj.w, p.proj.b)
        expect = T.relu(T.add(y, res)).data
        assert np.abs(got - expect).max() < 1e-12


def zero_filters(p):
    for stack in (p.amp1, p.pha1):
        stack.conv.w.data[...] = 0.0
        stack.conv.b.data[...] = 0.0
    for conv in (p.amp2, p.pha2):
        conv.w.data[...] = 0.0
        conv.b.data[...] = 0.0


def identity_channel_conv(p, c):
    p.chan.w.data[...] = 0.0
    for i in range(c):
        p.chan.w.data[i, i, 0, 0] = 1.0
    p.chan.b.data[...] = 0.0


class TestFrequencyBlock:
    def test_zero_filters_identity_channel_doubles_input(self):
        p, _ = make_freq(3, 3, seed=5)
        zero_filters(p)
        identity_channel_conv(p, 3)
        rng = np.random.default_rng(6)
        f = rng.standard_normal((2, 3, 8, 8))
        out = B.frequency_encoder_block(tens(f), p, train=True)
        assert np.abs(out.data - 2 * f).max() < 1e-9

    def test_doubling_identity_holds_in_f32(self):
        reg = ParamRegistry(np.float32)
        p = B.init_frequency_block(reg, np.random.default_rng(7), "b", 2, 2)
        zero_filters(p)
        identity_channel_conv(p, 2)
        f = np.random.default_rng(8).standard_normal((1, 2, 16, 16)).astype(np.float32)
        out = B.frequency_encoder_block(Tensor(f), p, train=True)
        assert np.abs(out.data - 2 * f).max() < 1e-3  # f32 at matching tolerance

    def test_constant_input_doubles_constant(self):
        p, _ = make_freq(1, 1, seed=9)
        zero_filters(p)
        identity_channel_conv(p, 1)
        out = B.frequency_encoder_block(tens(np.full((1, 1, 8, 8), 0.7)), p, train=True)
        assert np.abs(out.data - 1.4).max() < 1e-9

    def test_constant_input_spectrum_is_dc_only(self):
        spec = rfft2(tens(np.full((1, 1, 8, 8), 0.7)))
        amp, pha = amplitude_phase(spec)
        assert amp.data[0, 0, 0, 0] > 0
        amp.data[0, 0, 0, 0] = 0.0
        assert np.abs(amp.data).max() < 1e-9
        assert np.abs(pha.data).max() < 1e-6

    def test_matches_fourier_op_composition(self):
        p, _ = make_freq(2, 3, seed=10)
        rng = np.random.default_rng(11)
        f = tens(rng.standard_normal((1, 2, 8, 8)))
        got = B.frequency_encoder_block(f, p, train=True).data

        spec = rfft2(f)
        amp, pha = amplitude_phase(spec)
        amp_fuse = T.add(B._filter_stack(amp, p.amp1, p.amp2, True), amp)
        pha_fuse = T.add(B._filter_stack(pha, p.pha1, p.pha2, True), pha)
        x_ = irfft2(from_amplitude_phase(amp_fuse, pha_fuse, 8))
        expect = T.conv2d(T.add(x_, f), p.chan.w, p.chan.b).data
        # independent recomposition reuses the same params but fresh BN buffers
        assert np.abs(got - expect).max() < 1e-9

    def test_non_power_of_two_raises(self):
        p, _ = make_freq(1, 1)
        with pytest.raises(ShapeError, match="powers of two"):
            B.frequency_encoder_block(tens(np.zeros((1, 1, 6, 6))), p, train=True)


class TestPpm:
    def test_single_bin_is_global_mean(self):
        rng = np.random.default_rng(12)
        f = rng.standard_normal((2, 3, 4, 4))
        out = B.ppm_sample(tens(f), bins=(1,))
        assert out.data.shape == (2, 1, 3)
        assert np.abs(out.data - f.mean(axis=(2, 3))[:, None, :]).max() < 1e-12

    def test_constant_input_identical_tokens(self):
        f = np.full((1, 2, 8, 8), 1.5)
        out = B.ppm_sample(tens(f), bins=(1, 2, 4))
        assert out.data.shape == (1, 21, 2)
        assert np.abs(out.data - 1.5).max() < 1e-12

    def test_hand_computed_block_means(self):
        f = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out = B.ppm_sample(tens(f), bins=(1, 2))
        means = [
            f.mean(),
            f[0, 0, :2, :2].mean(), f[0, 0, :2, 2:].mean(),
            f[0, 0, 2:, :2].mean(), f[0, 0, 2:, 2:].mean(),
        ]
        assert out.data.shape == (1, 5, 1)
        assert np.abs(out.data[0, :, 0] - means).max() < 1e-12

    def test_default_bins_token_count(self):
        f = np.zeros((1, 2, 8, 8))
        out = B.ppm_sample(tens(f), bins=(1, 2, 4, 8))
        assert out.data.shape[1] == 85

    def test_empty_bins_raises(self):
        with pytest.raises(ShapeError, match="empty bin"):
            B.ppm_sample(tens(np.zeros((1, 1, 4, 4))), bins=())


class TestCrossAttention:
    def make(self, c=2, d0=4, seed=13):
        reg = ParamRegistry(np.float64)
        return B.init_cross_attention(reg, np.random.default_rng(seed), "ca", c, d0)

    def test_constant_inputs_give_uniform_output(self):
        p = self.make()
        fs = tens(np.full((1, 2, 4, 4), 0.3))
        ff = tens(np.full((1, 2, 4, 4), -0.2))
        out = B.cross_attention_fuse(fs, ff, p, bins=(1, 2), train=False)
        per_channel = out.data.reshape(1, 2, -1)
        assert np.abs(per_channel - per_channel[..., :1]).max() < 1e-12

    def test_attention_rows_stochastic(self):
        p = self.make(seed=14)
        rng = np.random.default_rng(15)
        fs = tens(rng.standard_normal((2, 2, 4, 4)))
        ff = tens(rng.standard_normal((2, 2, 4, 4)))
        attn, _ = B.attention_weights(fs, ff, p, bins=(1, 2), train=True)
        assert np.abs(attn.data.sum(axis=-1) - 1.0).max() < 1e-9
        assert (attn.data >= 0).all()

    def test_single_key_closed_form(self):
        p = self.make(seed=16)
        rng = np.random.default_rng(17)
        fs = tens(rng.standard_normal((1, 2, 4, 4)))
        ff = tens(rng.standard_normal((1, 2, 4, 4)))
        attn, v = B.attention_weights(fs, ff, p, bins=(1,), train=False)
        assert attn.data.shape == (1, 16, 1)
        assert np.abs(attn.data - 1.0).max() == 0.0  # softmax of one logit
        out = B.cross_attention_fuse(fs, ff, p, bins=(1,), train=False)
        # CA broadcasts the single value token everywhere
        ca = np.tile(v.data[0, 0][:, None, None], (1, 4, 4))[None]
        expect = T.conv2d(Tensor(ca), p.wout.w, p.wout.b).data + fs.data + ff.data
        assert np.abs(out.data - expect).max() < 1e-12

    def test_stream_shape_mismatch_raises(self):
        p = self.make()
        with pytest.raises(ShapeError, match="stream shapes"):
            B.cross_attention_fuse(
                tens(np.zeros((1, 2, 4, 4))), tens(np.zeros((1, 2, 8, 8))), p, (1,), False
            )


class TestAdjacency:
    def test_identical_channels_all_ones(self):
        e = tens(np.tile([[1.0, 2.0, 3.0]], (4, 1))[None])
        adj = B.cosine_adjacency(e)
        assert np.abs(adj.data - 1.0).max() < 1e-12

    def test_orthogonal_supports(self):
        e = tens(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        adj = B.cosine_adjacency(e).data[0]
        assert adj[0, 1] == 0.0 and adj[1, 0] == 0.0
        assert adj[0, 0] == 1.0 and adj[1, 1] == 1.0

    def test_hand_computed_cosine(self):
        e = tens(np.array([[[1.0, 1.0], [1.0, 0.0]]]))
        adj = B.cosine_adjacency(e).data[0]
        assert abs(adj[0, 1] - 1 / np.sqrt(2)) < 1e-12

    def test_zero_norm_convention(self):
        e = tens(np.array([[[0.0, 0.0], [1.0, 2.0]]]))
        adj = B.cosine_adjacency(e).data[0]
        assert adj[0, 0] == 1.0 and adj[0, 1] == 0.0 and adj[1, 0] == 0.0

    def test_exact_symmetry_and_unit_diagonal(self):
        rng = np.random.default_rng(18)
        e = tens(np.abs(rng.standard_normal((3, 8, 10))))
        adj = B.cosine_adjacency(e).data
        assert np.array_equal(adj, adj.swapaxes(-1, -2))
        di = np.arange(8)
        assert np.array_equal(adj[:, di, di], np.ones((3, 8)))
        assert adj.min() >= 0.0 and adj.max() <= 1.0 + 1e-12


class TestLaplacian:
    def test_single_channel_vanishes(self):
        lap = B.improved_laplacian(tens(np.ones((1, 1, 1))))
        assert lap.data[0, 0, 0] == 0.0

    def test_all_ones_adjacency(self):
        c = 5
        lap = B.improved_laplacian(tens(np.ones((1, c, c)))).data[0]
        expect = np.eye(c) - (np.ones((c, c)) + np.eye(c)) / (c + 1)
        assert np.abs(lap - expect).max() < 1e-12
        assert np.abs(lap.sum(axis=1)).max() < 1e-12

    def test_identity_adjacency_gives_zero(self):
        lap = B.improved_laplacian(tens(np.eye(4)[None])).data[0]
        assert np.abs(lap).max() < 1e-15

    def test_symmetry_and_eigenvalue_range(self):
        rng = np.random.default_rng(19)
        for c in (2, 5, 16):
            e = tens(np.abs(rng.standard_normal((1, c, 7))))
            adj = B.cosine_adjacency(e)
            lap = B.improved_laplacian(adj).data[0]
            assert np.abs(lap - lap.T).max() < 1e-12
            eig = np.linalg.eigvalsh(np.eye(c) - lap)
            assert eig.min() >= -1 - 1e-12 and eig.max() <= 1 + 1e-12


class TestTci:
    def make(self, c, d, seed=20):
        reg = ParamRegistry(np.float64)
        return B.init_tci(reg, np.random.default_rng(seed), "tci", c, d)

    def test_theta_zero_residual_identity(self):
        p = self.make(3, 4)
        p.theta.data[...] = 0.0
        rng = np.random.default_rng(21)
        x = rng.standard_normal((2, 3, 8, 8))
        out = B.tci_forward(tens(x), p, train=True)
        assert np.array_equal(out.data, x)

    def test_single_channel_identity(self):
        p = self.make(1, 4, seed=22)
        rng = np.random.default_rng(23)
        x = rng.standard_normal((1, 1, 8, 8))
        f = T.reshape(T.maxpool2d(tens(x), 4, 4), (1, 1, 4))
        lap = B.improved_laplacian(B.channel_cosine_adjacency(f, p.embed_w, p.embed_b))
        assert np.abs(lap.data).max() == 0.0
        out = B.tci_forward(tens(x), p, train=True)
        assert np.array_equal(out.data, x)  # zero-init upsample keeps exact identity

    def test_matches_dense_matrix_oracle(self):
        c, hw = 4, 8
        p = self.make(c, (hw // 4) ** 2, seed=24)
        p.up_w.data = np.random.default_rng(25).standard_normal(p.up_w.data.shape)
        rng = np.random.default_rng(26)
        x = rng.standard_normal((1, c, hw, hw))
        got = B.tci_forward(tens(x), p, train=True).data

        # dense recomposition with plain numpy
        pooled = np.zeros((1, c, 2, 2))
        for i in range(2):
            for j in range(2):
                pooled[0, :, i, j] = x[0, :, 4 * i : 4 * i + 4, 4 * j : 4 * j + 4].reshape(c, -1).max(axis=1)
        f = pooled.reshape(1, c, 4)
        e = np.maximum(p.embed_w.data @ f[0] + p.embed_b.data[:, None], 0.0)
        norms = np.linalg.norm(e, axis=1)
        ehat = np.divide(e, norms[:, None], out=np.zeros_like(e), where=norms[:, None] > 0)
        adj = 0.5 * ((ehat @ ehat.T) + (ehat @ ehat.T).T)
        np.fill_diagonal(adj, 1.0)
        atil = adj + np.eye(c)
        deg = atil.sum(axis=1)
        lap = np.eye(c) - atil / np.sqrt(deg[:, None] * deg[None, :])
        hout = np.maximum(lap @ f[0] @ p.theta.data, 0.0).reshape(c, 2, 2)
        up = np.zeros((c, 8, 8))
        for i in range(2):
            for j in range(2):
                up[:, 4 * i : 4 * i + 4, 4 * j : 4 * j + 4] = (
                    hout[:, i, j][:, None, None] * p.up_w.data
                )
        expect = (up + p.up_b.data[:, None, None])[None] + x
        assert np.abs(got - expect).max() < 1e-9

    def test_permutation_equivariance_of_core(self):
        # conjugating the embedding by the same channel permutation must permute
        # the graph output rows identically
        c, d = 5, 4
        p = self.make(c, d, seed=27)
        rng = np.random.default_rng(28)
        f = rng.standard_normal((1, c, d))
        perm = rng.permutation(c)

        base = B.tci_core(tens(f), p).data[0]

        pp = self.make(c, d, seed=29)
        pp.theta.data = p.theta.data.copy()
        pp.embed_w.data = p.embed_w.data[np.ix_(perm, perm)]
        pp.embed_b.data = p.embed_b.data[perm]
        permuted = B.tci_core(tens(f[:, perm, :]), pp).data[0]
        assert np.abs(permuted - base[perm]).max() < 1e-10

    def test_not_divisible_by_four_raises(self):
        p = self.make(1, 1)
        with pytest.raises(ShapeError, match="divisible by 4"):
            B.tci_forward(tens(np.zeros((1, 1, 6, 6))), p, train=True)

    def test_factorized_theta_shapes(self):
        reg = ParamRegistry(np.float64)
        p = B.init_tci(reg, np.random.default_rng(30), "tci", 2, 16, inner=4)
        assert p.theta.data.shape == (16, 4) and p.theta2.data.shape == (4, 16)
        out = B.tci_forward(tens(np.random.default_rng(31).standard_normal((1, 2, 16, 16))), p, True)
        assert out.data.shape == (1, 2, 16, 16)
