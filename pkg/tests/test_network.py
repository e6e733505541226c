import numpy as np
import pytest

from spironet import network as N
from spironet import reference as R
from spironet import tensor as T
from spironet.checkpoint import CheckpointError
from spironet.network import SpiroNetConfig, variant_from_table1
from spironet.optim import SgdMomentum
from spironet.tensor import ShapeError, Tensor

TOY = dict(input_size=8, stages=2, base_channels=4, precision="f64")


def toy_config(**kw):
    merged = {**TOY, **kw}
    return SpiroNetConfig(**merged)


class TestBuild:
    def test_same_seed_bit_identical(self):
        p1 = N.build(toy_config(), rng_seed=3)
        p2 = N.build(toy_config(), rng_seed=3)
        for name, t1 in p1.named_parameters().items():
            assert np.array_equal(t1.data, p2.named_parameters()[name].data), name

    def test_different_seed_differs(self):
        p1 = N.build(toy_config(), rng_seed=3)
        p2 = N.build(toy_config(), rng_seed=4)
        assert not np.array_equal(p1.stem.conv.w.data, p2.stem.conv.w.data)

    def test_variant_i_has_no_frequency_fusion_tci_params(self):
        cfg = variant_from_table1("I", **TOY)
        p = N.build(cfg, rng_seed=0)
        names = list(p.named_parameters())
        assert not any(n.startswith(("enc_freq", "fuse", "tci")) for n in names)
        assert any(n.startswith("enc_spa") for n in names)

    def test_param_count_closed_form(self):
        # hand-summed layer arithmetic for the toy config (base 4, stages 2, 8x8)
        cfg = toy_config()
        p = N.build(cfg, rng_seed=0)

        def conv(cout, cin, k, bias=True):
            return cout * cin * k * k + (cout if bias else 0)

        def bn(c):
            return 2 * c  # learnable gamma/beta only

        def conv_bn(cout, cin, k):
            return conv(cout, cin, k) + bn(cout)

        def spatial(cin, cout):
            total = conv_bn(cout, cin, 3) + conv_bn(cout, cout, 3)
            if cin != cout:
                total += conv(cout, cin, 1)
            return total

        def freq(cin, cout):
            return 2 * (conv_bn(cin, cin, 3) + conv(cin, cin, 3)) + conv(cout, cin, 1)

        def fuse(c, d0):
            return 4 * conv_bn(d0, c, 1) + conv_bn(d0, 2 * c, 1) + conv(c, d0, 1)

        chans = [4, 8]
        d0s = [max(8, c // 2) for c in chans]
        expected = conv_bn(4, 1, 3)  # stem
        cin = 4
        for c, d0 in zip(chans, d0s):
            expected += spatial(cin, c) + freq(cin, c) + fuse(c, d0)
            cin = c
        expected += spatial(8, 8)  # bottleneck
        prev = 8
        for c in reversed(chans):
            expected += prev * c * 4 + c  # 2x2 transposed conv
            expected += spatial(2 * c, c)
            prev = c
        d = (8 // 4) ** 2
        expected += 4 * 4 + 4 + d * d + 4 * 16 + 4  # tci: embed, theta, upsample
        expected += conv(1, 4, 1)  # head
        assert N.count_params(p) == expected

    def test_invalid_configs_rejected(self):
        with pytest.raises(N.ConfigError, match="power of two"):
            SpiroNetConfig(input_size=48).validate()
        with pytest.raises(N.ConfigError, match="at least one encoder"):
            SpiroNetConfig(use_spatial_encoder=False, use_frequency_encoder=False).validate()
        with pytest.raises(N.ConfigError, match="requires both encoders"):
            SpiroNetConfig(use_frequency_encoder=False, use_cross_attention=True).validate()
        with pytest.raises(N.ConfigError, match="2\\^stages"):
            SpiroNetConfig(input_size=8, stages=4).validate()


class TestForward:
    def test_output_shape_matches_input(self):
        p = N.build(toy_config(), rng_seed=1)
        x = Tensor(np.random.default_rng(0).random((2, 1, 8, 8)))
        out = N.forward(p, x, train=True)
        assert out.data.shape == (2, 1, 8, 8)

    def test_zero_params_give_half_probability(self):
        p = N.build(toy_config(), rng_seed=1)
        for t in p.parameters():
            t.data[...] = 0.0
        x = Tensor(np.random.default_rng(1).random((1, 1, 8, 8)))
        logits = N.forward(p, x, train=True)
        assert np.abs(logits.data).max() == 0.0
        probs = T.sigmoid(logits)
        assert np.array_equal(probs.data, np.full_like(probs.data, 0.5))

    def test_forward_reproducible_bit_exact(self):
        x_arr = np.random.default_rng(2).random((2, 1, 8, 8))
        outs = []
        for _ in range(2):
            p = N.build(toy_config(), rng_seed=7)
            outs.append(N.forward(p, Tensor(x_arr.copy()), train=True).data.copy())
        assert np.array_equal(outs[0], outs[1])

    def test_wrong_size_raises(self):
        p = N.build(toy_config(), rng_seed=1)
        with pytest.raises(ShapeError, match="spatial size"):
            N.forward(p, Tensor(np.zeros((1, 1, 16, 16))), train=False)

    @pytest.mark.parametrize("name", ["I", "II", "III", "IV", "V", "VI", "VII", "full"])
    def test_all_variants_run(self, name):
        cfg = variant_from_table1(name, **TOY)
        p = N.build(cfg, rng_seed=0)
        out = N.forward(p, Tensor(np.random.default_rng(3).random((1, 1, 8, 8))), train=True)
        assert out.data.shape == (1, 1, 8, 8)


class TestLoss:
    def test_zero_logits_gives_log_two(self):
        logits = Tensor(np.zeros((2, 1, 4, 4)))
        gt = (np.random.default_rng(4).random((2, 1, 4, 4)) > 0.5).astype(float)
        loss = N.loss_bce(logits, gt)
        assert abs(float(loss.data) - np.log(2)) < 1e-12

    def test_saturated_correct_is_tiny(self):
        gt = (np.random.default_rng(5).random((1, 1, 4, 4)) > 0.5).astype(float)
        logits = Tensor(np.where(gt == 1, 20.0, -20.0))
        assert float(N.loss_bce(logits, gt).data) < 1e-8

    def test_matches_naive_formula(self):
        rng = np.random.default_rng(6)
        z = rng.standard_normal((2, 1, 4, 4)) * 3
        gt = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
        got = float(N.loss_bce(Tensor(z), gt).data)
        assert abs(got - R.naive_bce(z, gt)) < 1e-9

    def test_non_binary_target_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            N.loss_bce(Tensor(np.zeros((1, 1, 2, 2))), np.full((1, 1, 2, 2), 0.3))


class TestPredict:
    def test_tie_at_half_goes_to_one(self):
        # zero logits mean p = 0.5 exactly; the >= 0.5 rule emits foreground
        p = N.build(toy_config(), rng_seed=1)
        for t in p.parameters():
            t.data[...] = 0.0
        mask = N.predict(p, Tensor(np.random.default_rng(7).random((1, 1, 8, 8))))
        assert np.array_equal(mask, np.ones_like(mask))

    def test_sign_thresholding(self):
        rng = np.random.default_rng(8)
        z = rng.standard_normal((1, 1, 6, 6)) * 2
        expect = (1 / (1 + np.exp(-z)) >= 0.5).astype(np.uint8)
        assert np.array_equal((z >= 0).astype(np.uint8), expect)


class TestVariantTable:
    def test_rows(self):
        rows = {
            "I": (True, False, False, False),
            "IV": (True, True, True, False),
            "VII": (True, True, False, True),
            "full": (True, True, True, True),
        }
        for name, (se, fe, ca, tci) in rows.items():
            cfg = variant_from_table1(name, **TOY)
            assert (cfg.use_spatial_encoder, cfg.use_frequency_encoder,
                    cfg.use_cross_attention, cfg.use_tci) == (se, fe, ca, tci)

    def test_unknown_variant(self):
        with pytest.raises(N.ConfigError, match="unknown variant"):
            variant_from_table1("VIII")


class TestInvariants:
    def test_additive_fusion_equals_zeroed_attention(self):
        # variant III == variant IV with the attention output projection zeroed
        cfg4 = variant_from_table1("IV", **TOY)
        cfg3 = variant_from_table1("III", **TOY)
        p4 = N.build(cfg4, rng_seed=11)
        for f in p4.fuse:
            f.wout.w.data[...] = 0.0
            f.wout.b.data[...] = 0.0
        p3 = N.build(cfg3, rng_seed=12)
        shared = p3.named_parameters()
        for name, src in p4.named_parameters().items():
            if name in shared:
                shared[name].data = src.data.copy()
        for name, src in p4.named_buffers().items():
            if name in p3.named_buffers():
                p3.named_buffers()[name][...] = src
        x = Tensor(np.random.default_rng(13).random((2, 1, 8, 8)))
        out4 = N.forward(p4, x, train=False).data
        out3 = N.forward(p3, Tensor(x.data.copy()), train=False).data
        assert np.abs(out4 - out3).max() < 1e-9

    def test_one_step_decreases_loss_over_seeds(self):
        rng = np.random.default_rng(14)
        x_arr = rng.random((4, 1, 8, 8))
        gt = (rng.random((4, 1, 8, 8)) > 0.6).astype(float)
        for seed in range(5):
            p = N.build(toy_config(), rng_seed=seed)
            opt = SgdMomentum(p.parameters(), lr=1e-3)
            loss0 = N.loss_bce(N.forward(p, Tensor(x_arr.copy()), train=True), gt)
            loss0.backward()
            opt.step()
            loss1 = N.loss_bce(N.forward(p, Tensor(x_arr.copy()), train=True), gt)
            assert float(loss1.data) < float(loss0.data), f"seed {seed}"

    def test_eval_forward_batch_size_independent(self):
        p = N.build(toy_config(), rng_seed=15)
        rng = np.random.default_rng(16)
        # shift running stats away from init so eval mode is non-trivial
        for _ in range(3):
            N.forward(p, Tensor(rng.random((4, 1, 8, 8))), train=True)
        batch = Tensor(rng.random((3, 1, 8, 8)))
        with T.no_grad():
            joint = N.forward(p, batch, train=False).data
            single = N.forward(p, Tensor(batch.data[1:2].copy()), train=False).data
        assert np.abs(joint[1:2] - single).max() < 1e-9


class TestCheckpoint:
    def test_round_trip_bit_identical_forward(self, tmp_path):
        p = N.build(toy_config(), rng_seed=17)
        rng = np.random.default_rng(18)
        N.forward(p, Tensor(rng.random((2, 1, 8, 8))), train=True)  # move BN stats
        path = tmp_path / "model.spiro"
        N.save_checkpoint(path, p, extra={"seed": "17"})
        p2, meta = N.load_checkpoint(path)
        assert meta["seed"] == "17"
        for name, t in p.named_parameters().items():
            assert np.array_equal(t.data, p2.named_parameters()[name].data), name
        for name, buf in p.named_buffers().items():
            assert np.array_equal(buf, p2.named_buffers()[name]), name
        x = Tensor(rng.random((1, 1, 8, 8)))
        with T.no_grad():
            a = N.forward(p, x, train=False).data
            b = N.forward(p2, Tensor(x.data.copy()), train=False).data
        assert np.array_equal(a, b)

    def test_save_is_deterministic_bytes(self, tmp_path):
        p = N.build(toy_config(), rng_seed=19)
        N.save_checkpoint(tmp_path / "a.spiro", p)
        N.save_checkpoint(tmp_path / "b.spiro", p)
        assert (tmp_path / "a.spiro").read_bytes() == (tmp_path / "b.spiro").read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.spiro"
        path.write_bytes(b"NOTSPIRO" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            N.load_checkpoint(path)

    def test_f32_round_trip(self, tmp_path):
        p = N.build(toy_config(precision="f32"), rng_seed=20)
        path = tmp_path / "m32.spiro"
        N.save_checkpoint(path, p)
        p2, _ = N.load_checkpoint(path)
        assert p2.config.precision == "f32"
        for name, t in p.named_parameters().items():
            assert np.array_equal(t.data, p2.named_parameters()[name].data)
