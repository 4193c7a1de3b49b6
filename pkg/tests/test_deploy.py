import numpy as np
import pytest

from ldcvsa import nn
from ldcvsa.core import LDCModel
from ldcvsa.deploy import (FoldError, ModelFormatError, PackedModel, cdc_estimate, fold_bn,
                           folded_bits, infer_packed, inject_bit_errors, load_packed,
                           memory_bits, memory_footprint, pack_model, save_packed, threshold_bits)
from ldcvsa.trainer import TrainConfig, train_ldc


def random_bn(rng, D, N):
    bn = nn.BatchNorm.create(D)
    bn.running_mean = rng.normal(0, N / 4, D)
    bn.running_var = rng.uniform(0, N, D) ** 2 * rng.uniform(0, 1, D)
    bn.w = rng.normal(0, 1, D)
    bn.b = rng.normal(0, 1, D) * rng.choice([0.01, 1.0, 100.0], D)
    return bn


def reference_bits(bn, alpha, y):
    return nn.bn_eval(alpha * y, bn.running_mean, bn.running_var, bn.w, bn.b, bn.eps) >= 0


@pytest.fixture(scope="module")
def trained(blobs):
    train, test = blobs
    out = {}
    for norm in ("batch", "none"):
        c = TrainConfig(dim=16, value_dim=4, n_levels=16, batch_size=32, epochs=6, lr0=1e-2,
                        normalizer=norm)
        out[norm], _ = train_ldc(c, train, test)
    return out


class TestFold:
    def test_trivial_positive_rescale(self):
        bn = nn.BatchNorm.create(1)
        bn.running_var[:] = 1.0 - bn.eps
        theta, flip, cmask, _ = fold_bn(bn, np.ones(1), 10)
        assert theta[0] == 0 and not flip[0] and not cmask[0]

    def test_negative_weight_flips(self):
        bn = nn.BatchNorm.create(1)
        bn.w[:] = -2.0
        bn.b[:] = 0.5
        N = 12
        theta, flip, cmask, csign = fold_bn(bn, np.array([0.3]), N)
        assert flip[0]
        y = np.arange(-N, N + 1)[:, None]
        np.testing.assert_array_equal(folded_bits(y, theta, flip, cmask, csign),
                                      reference_bits(bn, np.array([0.3]), y))

    def test_zero_weight_is_constant(self):
        bn = nn.BatchNorm.create(2)
        bn.w[:] = 0.0
        bn.b[:] = [-0.1, 0.0]
        theta, flip, cmask, csign = fold_bn(bn, np.ones(2), 5)
        assert cmask.all()
        np.testing.assert_array_equal(csign, [False, True])

    def test_degenerate_alpha(self):
        with pytest.raises(FoldError):
            fold_bn(nn.BatchNorm.create(2), np.array([1.0, 0.0]), 5)

    def test_ceil_boundary_is_inclusive(self):
        """E = 3 with alpha = 1 puts the BN zero exactly on y = 3: sign(0) = +1 needs theta = 3."""
        bn = nn.BatchNorm.create(1)
        bn.running_mean[:] = 3.0
        theta, _, _, _ = fold_bn(bn, np.ones(1), 10)
        assert theta[0] == 3

    @pytest.mark.parametrize("N", [1, 2, 29, 100])
    def test_exhaustive_random(self, N):
        rng = np.random.default_rng(N)
        y = np.arange(-N, N + 1)[:, None]
        for _ in range(50):
            bn = random_bn(rng, 8, N)
            bn.w[rng.random(8) < 0.1] = 0.0
            alpha = rng.uniform(1e-3, 1, 8)
            theta, flip, cmask, csign = fold_bn(bn, alpha, N)
            assert np.all(np.abs(theta) <= N + 1)
            np.testing.assert_array_equal(folded_bits(y, theta, flip, cmask, csign),
                                          reference_bits(bn, alpha, y))


class TestPacked:
    @pytest.mark.parametrize("norm", ["batch", "none"])
    def test_matches_reference_model(self, trained, blobs, norm):
        _, test = blobs
        model = trained[norm]
        pm = pack_model(model)
        assert pm.has_thresholds == (norm == "batch")
        np.testing.assert_array_equal(pm.predict(test.features), model.predict(test.features))

    def test_matches_reference_random_models(self):
        rng = np.random.default_rng(3)
        X = rng.integers(0, 8, size=(1000, 9))
        for seed in range(3):
            model = LDCModel(9, 5, 24, 6, 8, normalizer="batch", seed=seed)
            for _ in range(3):
                model.forward(X[rng.integers(0, 1000, 64)], train=True)
            model.norm.w[rng.random(24) < 0.3] *= -1
            pm = pack_model(model)
            np.testing.assert_array_equal(pm.predict(X), model.predict(X))

    def test_lut_is_valuebox(self, trained):
        model = trained["batch"]
        pm = pack_model(model)
        for level in range(model.n_levels):
            np.testing.assert_array_equal(np.where(pm.lut[level], 1.0, -1.0), model.vb(level)[0])

    def test_accumulation_parity_and_range(self, trained, blobs):
        _, test = blobs
        pm = pack_model(trained["batch"])
        y = pm.accumulate(test.features)
        N = pm.dims["N"]
        assert np.all(np.abs(y) <= N) and np.all((y + N) % 2 == 0)
        model = trained["batch"]
        vfull = model.vb.expand(model.vb.lut())
        fb = np.where(model.F.values >= 0, 1, -1)
        brute = np.array([[sum(fb[i, d] * vfull[x[i], d] for i in range(N)) for d in range(16)]
                          for x in test.features[:20]])
        np.testing.assert_array_equal(y[:20], brute)

    def test_self_similarity(self):
        D, N = 16, 3
        lut = np.ones((2, 4), bool)
        fbits = np.ones((N, D), bool)
        pm = PackedModel(lut, fbits, np.ones((3, D), bool) * [[1], [0], [1]], np.zeros(D),
                         np.zeros(D), np.zeros(D), np.zeros(D), True)
        labels, z = infer_packed(pm, np.zeros((1, N), int))
        assert labels[0] == 0 and z[0, 0] == D and z[0, 1] == -D

    def test_flipping_class_bits_negates(self, trained, blobs):
        _, test = blobs
        pm = pack_model(trained["batch"])
        z = pm.scores(test.features)
        neg = PackedModel(pm.lut, pm.fbits, ~pm.cbits, pm.theta, pm.flip, pm.const_mask,
                          pm.const_sign, pm.has_thresholds)
        np.testing.assert_array_equal(neg.scores(test.features), -z)
        np.testing.assert_array_equal(neg.predict(test.features), np.argmin(z, axis=1))

    def test_rejects_per_sample_normalizers(self):
        with pytest.raises(FoldError):
            pack_model(LDCModel(4, 2, 8, 4, 4, normalizer="layer"))

    def test_input_validation(self, trained):
        pm = pack_model(trained["batch"])
        with pytest.raises(ValueError):
            pm.predict(np.zeros((1, 3), int))
        with pytest.raises(ValueError):
            pm.predict(np.full((1, pm.dims["N"]), 16))


class TestModelFile:
    @pytest.mark.parametrize("norm", ["batch", "none"])
    def test_round_trip(self, trained, tmp_path, norm):
        pm = pack_model(trained[norm])
        save_packed(pm, tmp_path / "m.ldcv")
        again = load_packed(tmp_path / "m.ldcv")
        assert again == pm
        save_packed(again, tmp_path / "m2.ldcv")
        assert (tmp_path / "m.ldcv").read_bytes() == (tmp_path / "m2.ldcv").read_bytes()

    def test_layout(self, trained, tmp_path):
        pm = pack_model(trained["batch"])
        save_packed(pm, tmp_path / "m.ldcv")
        raw = (tmp_path / "m.ldcv").read_bytes()
        d = pm.dims
        assert raw[:4] == b"LDCV" and int.from_bytes(raw[4:6], "little") == 1
        assert [int.from_bytes(raw[6 + 4 * k:10 + 4 * k], "little") for k in range(5)] == \
            [d["N"], d["D"], d["D_v"], d["M"], d["K"]]
        assert raw[26] == 1
        rb = lambda cols: (cols + 7) // 8
        size = 27 + d["M"] * rb(d["D_v"]) + (d["N"] + d["K"]) * rb(d["D"]) + 4 * d["D"] + 3 * rb(d["D"])
        assert len(raw) == size

    def test_errors(self, trained, tmp_path):
        pm = pack_model(trained["batch"])
        save_packed(pm, tmp_path / "m.ldcv")
        raw = (tmp_path / "m.ldcv").read_bytes()
        (tmp_path / "t.ldcv").write_bytes(raw[:-1])
        with pytest.raises(ModelFormatError, match="unexpected end of file"):
            load_packed(tmp_path / "t.ldcv")
        (tmp_path / "b.ldcv").write_bytes(b"NOPE" + raw[4:])
        with pytest.raises(ModelFormatError, match="magic"):
            load_packed(tmp_path / "b.ldcv")
        with pytest.raises(FileNotFoundError):
            load_packed(tmp_path / "missing.ldcv")


ISOLET = {"N": 617, "D": 64, "D_v": 16, "M": 256, "K": 26}


class TestEstimates:
    def test_components(self):
        bits = memory_bits(ISOLET, True)
        assert bits == {"lut": 4096, "feature": 617 * 64, "class": 26 * 64,
                        "threshold": 64 * threshold_bits(617), "flags": 128}
        assert threshold_bits(617) == 12  # [-618, 618] needs 11 magnitude bits + sign
        assert memory_footprint(ISOLET, False) == pytest.approx((4096 + 617 * 64 + 26 * 64) / 8192)

    def test_doubling_dimension(self):
        small = memory_bits(ISOLET, True)
        big = memory_bits({**ISOLET, "D": 128}, True)
        for k in ("feature", "class", "threshold", "flags"):
            assert big[k] == 2 * small[k]
        assert big["lut"] == small["lut"]

    def test_cdc(self):
        values = [cdc_estimate({**ISOLET, "D": D}) for D in (64, 256, 512)]
        assert values[0] < values[1] < values[2]
        assert values == [83, 97, 104]
        k1 = cdc_estimate({**ISOLET, "K": 1})
        assert k1 == cdc_estimate(ISOLET) - 5 * 8  # ceil(log2 26) * ceil(log2 129)

    def test_cdc_same_for_folded_and_plain(self, trained):
        assert cdc_estimate(pack_model(trained["batch"])) == cdc_estimate(pack_model(trained["none"]))


class TestBitErrors:
    def test_extremes(self, trained):
        pm = pack_model(trained["batch"])
        assert inject_bit_errors(pm, 0.0, 1) == pm
        flipped = inject_bit_errors(pm, 1.0, 1)
        assert np.array_equal(flipped.fbits, ~pm.fbits) and np.array_equal(flipped.lut, ~pm.lut)
        assert np.array_equal(flipped.cbits, ~pm.cbits) and np.array_equal(flipped.theta, pm.theta)
        with pytest.raises(ValueError):
            inject_bit_errors(pm, 1.5, 0)

    def test_deterministic_per_seed(self, trained):
        pm = pack_model(trained["batch"])
        assert inject_bit_errors(pm, 0.1, 4) == inject_bit_errors(pm, 0.1, 4)
        assert inject_bit_errors(pm, 0.1, 4) != inject_bit_errors(pm, 0.1, 5)

    def test_rate_is_respected(self, trained):
        pm = pack_model(trained["batch"])
        noisy = inject_bit_errors(pm, 0.2, 0)
        rate = np.mean(noisy.fbits != pm.fbits)
        assert abs(rate - 0.2) < 0.05

    def test_accuracy_degrades(self, trained, blobs):
        _, test = blobs
        pm = pack_model(trained["batch"])
        means = []
        for p in (0.0, 1e-3, 1e-2, 5e-2, 1e-1):
            accs = [np.mean(inject_bit_errors(pm, p, s).predict(test.features) == test.labels)
                    for s in range(5)]
            means.append(np.mean(accs))
        assert all(b <= a + 1e-12 for a, b in zip(means, means[1:])), means
        half = [np.mean(inject_bit_errors(pm, 0.5, s).predict(test.features) == test.labels)
                for s in range(10)]
        assert abs(np.mean(half) - 1 / 3) < 0.12
