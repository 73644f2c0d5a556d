import struct

import numpy as np
import pytest

from se_explain import checkpoint as ckpt
from se_explain.model import (
    GAP, SE, Conv2d, Dense, MaxPool2, ModelGraph, ModelShapeError, ReLU, build_smallcnn, channel_mask, forward,
    forward_ablated, predict_proba,
)
from se_explain.se import SEBlockParams, bottleneck_width

from oracles import conv2d_einsum, se_straight_line


class TestArchitecture:
    def test_parameter_counts(self):
        plain = build_smallcnn(10, se_enabled=False)
        with_se = build_smallcnn(10, se_enabled=True)
        assert plain.parameter_count() == 140714
        assert with_se.parameter_count() - plain.parameter_count() == 2 * 128 * 8

    @pytest.mark.parametrize("r", [1, 4, 8, 16, 32, 200])
    def test_se_overhead_for_reduction(self, r):
        plain = build_smallcnn(10, se_enabled=False).parameter_count()
        with_se = build_smallcnn(10, se_enabled=True, reduction=r).parameter_count()
        assert with_se - plain == 2 * 128 * bottleneck_width(128, r)

    def test_output_and_captured_shapes(self, rng):
        model = build_smallcnn(10, (3, 32, 32))
        res = forward(model, rng.random((2, 3, 32, 32)).astype(np.float32))
        assert res.logits.shape == (2, 10)
        assert res.captured.shape == (2, 128, 8, 8)
        assert res.se.s.shape == (2, 128)

    def test_grayscale_input(self, rng):
        model = build_smallcnn(10, (1, 28, 28), se_enabled=False)
        res = forward(model, rng.random((1, 1, 28, 28)))
        assert res.logits.shape == (1, 10) and res.se is None
        assert res.captured.shape == (1, 128, 7, 7)

    def test_bad_input_extent(self):
        with pytest.raises(ModelShapeError):
            build_smallcnn(10, (3, 30, 30))

    def test_wrong_batch_shape(self, small_se_model):
        with pytest.raises(ModelShapeError) as exc:
            forward(small_se_model, np.zeros((1, 3, 32, 32)))
        assert exc.value.axis == "input"

    def test_chain_mismatch_names_layer(self):
        layers = [Conv2d(np.zeros((4, 3, 3, 3)), np.zeros(4)), ReLU(), GAP(), Dense(np.zeros((2, 5)), np.zeros(2))]
        with pytest.raises(ModelShapeError) as exc:
            ModelGraph(layers, 2, (3, 8, 8))
        assert "layer 3" in str(exc.value)


class TestForward:
    def test_zero_model_gives_uniform(self):
        model = build_smallcnn(10, (3, 16, 16), zero=True)
        probs = predict_proba(model, np.random.default_rng(0).random((3, 3, 16, 16)))
        np.testing.assert_array_equal(probs, 0.1)

    def test_duplicate_samples_identical(self, small_se_model, rng):
        img = rng.random((3, 16, 16)).astype(np.float32)
        res = forward(small_se_model, np.stack([img, img, img]))
        assert res.logits[0].tobytes() == res.logits[1].tobytes() == res.logits[2].tobytes()

    def test_batch_partition_independent(self, small_se_model, rng):
        batch = rng.random((5, 3, 16, 16)).astype(np.float32)
        full = forward(small_se_model, batch).logits
        for i in range(5):
            assert full[i].tobytes() == forward(small_se_model, batch[i]).logits[0].tobytes()

    def test_replay_with_reference_ops(self, small_se_model, rng):
        model = small_se_model
        img = rng.random((1, 3, 16, 16)).astype(np.float32)
        x = (img.astype(np.float64) - model.mean[:, None, None]) / model.std[:, None, None]
        for layer in model.layers:
            if layer.kind == "conv":
                x = conv2d_einsum(x, layer.weight, layer.bias)
            elif layer.kind == "relu":
                x = np.maximum(x, 0)
            elif layer.kind == "maxpool":
                n, c, h, w = x.shape
                x = x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))
            elif layer.kind == "se":
                x, s_ref = se_straight_line(x, layer.se.w1, layer.se.w2)
            elif layer.kind == "gap":
                x = x.mean(axis=(2, 3))
            else:
                x = x @ layer.weight.T.astype(np.float64) + layer.bias
        res = forward(model, img)
        np.testing.assert_allclose(res.logits, x, atol=1e-4)
        np.testing.assert_allclose(res.se.s, s_ref, atol=1e-5)

    def test_normalisation_inside(self, rng):
        model = build_smallcnn(10, (3, 16, 16), se_enabled=False, seed=1)
        img = rng.random((1, 3, 16, 16)).astype(np.float32)
        model.mean = np.array([0.5, 0.4, 0.3], np.float32)
        model.std = np.array([0.2, 0.25, 0.3], np.float32)
        shifted = build_smallcnn(10, (3, 16, 16), se_enabled=False, seed=1)
        pre = (img - model.mean[:, None, None]) / model.std[:, None, None]
        np.testing.assert_array_equal(forward(model, img).logits, forward(shifted, pre).logits)


class TestAblation:
    def test_full_fraction_matches_forward(self, small_se_model, rng):
        batch = rng.random((4, 3, 16, 16)).astype(np.float32)
        assert forward_ablated(small_se_model, batch, 1.0).tobytes() == \
            forward(small_se_model, batch).logits.tobytes()

    def test_single_surviving_channel(self, rng):
        # s increasing in channel index; channel 3 is the lone outlier
        c = 4
        layers = [Conv2d(np.eye(c, dtype=np.float32).reshape(c, c, 1, 1), np.zeros(c, np.float32), 1, 0), ReLU()]
        w2 = np.array([[0.0], [0.0], [0.0], [5.0]], np.float32)
        layers += [SE(SEBlockParams(np.ones((1, c), np.float32), w2, 4)), GAP(),
                   Dense(np.eye(c, dtype=np.float32), np.zeros(c, np.float32))]
        model = ModelGraph(layers, c, (c, 2, 2))
        img = np.ones((1, c, 2, 2), np.float32)
        out = forward_ablated(model, img, 0.10)
        s3 = 1 / (1 + np.exp(-5.0 * 4))
        np.testing.assert_allclose(out[0], [0, 0, 0, s3], atol=1e-6)

    def test_mask_replay(self, small_se_model, rng):
        batch = rng.random((3, 3, 16, 16)).astype(np.float32)
        res = forward(small_se_model, batch, keep_caches=True)
        se_index = small_se_model.tap_index
        x_se = res.caches[se_index + 1]  # input to GAP == SE output
        mask = channel_mask(res.se.s, 0.5)
        z = (x_se * mask[:, :, None, None]).mean(axis=(2, 3))
        fc = small_se_model.layers[-1]
        np.testing.assert_allclose(forward_ablated(small_se_model, batch, 0.5), z @ fc.weight.T + fc.bias,
                                   atol=1e-5)

    def test_random_control_keeps_count(self, rng):
        s = rng.random((6, 128))
        a = channel_mask(s, 0.1)
        b = channel_mask(s, 0.1, np.random.default_rng(3))
        np.testing.assert_array_equal(a.sum(axis=1), b.sum(axis=1))

    def test_rejects_plain_model(self):
        with pytest.raises(ValueError):
            forward_ablated(build_smallcnn(10, (3, 16, 16), se_enabled=False), np.zeros((1, 3, 16, 16)), 0.5)


def tiny_se_model(seed=0):
    r = np.random.default_rng(seed)
    layers = [
        Conv2d(r.standard_normal((4, 2, 3, 3)).astype(np.float32), r.standard_normal(4).astype(np.float32)),
        ReLU(), MaxPool2(),
        SE(SEBlockParams.init(4, 2, r)), GAP(),
        Dense(r.standard_normal((3, 4)).astype(np.float32), np.zeros(3, np.float32)),
    ]
    return ModelGraph(layers, 3, (2, 4, 4))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, small_se_model, rng):
        blob = ckpt.dumps(small_se_model)
        again = ckpt.loads(blob)
        assert ckpt.dumps(again) == blob
        for a, b in zip(small_se_model.parameters(), again.parameters()):
            assert a.tobytes() == b.tobytes()
        img = rng.random((2, 3, 16, 16)).astype(np.float32)
        assert forward(again, img).logits.tobytes() == forward(small_se_model, img).logits.tobytes()

    def test_file_round_trip(self, tmp_path):
        model = build_smallcnn(10, (1, 8, 8), se_enabled=False, seed=4)
        ckpt.save_checkpoint(model, tmp_path / "m.ckpt")
        assert ckpt.dumps(ckpt.load_checkpoint(tmp_path / "m.ckpt")) == ckpt.dumps(model)

    def test_header(self, small_se_model):
        blob = ckpt.dumps(small_se_model)
        assert blob[:4] == b"SEXP"
        assert struct.unpack("<II", blob[4:12]) == (1, len(small_se_model.layers))

    def test_bad_magic(self, small_se_model):
        blob = bytearray(ckpt.dumps(small_se_model))
        blob[0:4] = b"XXXX"
        with pytest.raises(ckpt.BadMagicError):
            ckpt.loads(bytes(blob))

    def test_version_mismatch(self, small_se_model):
        blob = bytearray(ckpt.dumps(small_se_model))
        blob[4:8] = struct.pack("<I", 2)
        with pytest.raises(ckpt.VersionMismatchError):
            ckpt.loads(bytes(blob))

    def test_every_truncation_fails(self):
        blob = ckpt.dumps(tiny_se_model())
        meta_start = blob.rfind(b"input_shape=") - 4
        for cut in range(len(blob)):
            with pytest.raises(ckpt.CheckpointError) as exc:
                ckpt.loads(blob[:cut])
            if 12 < cut < meta_start:
                assert isinstance(exc.value, ckpt.TruncatedCheckpointError)
                assert exc.value.layer is not None

    def test_truncation_names_layer(self, small_se_model):
        blob = ckpt.dumps(small_se_model)
        # cut inside the first conv's weights
        with pytest.raises(ckpt.TruncatedCheckpointError) as exc:
            ckpt.loads(blob[:40])
        assert exc.value.layer == "0 (conv)"
        assert "layer 0 (conv)" in str(exc.value)

    def test_trailing_bytes(self, small_se_model):
        with pytest.raises(ckpt.CheckpointFormatError):
            ckpt.loads(ckpt.dumps(small_se_model) + b"\0")

    def test_unknown_tag(self, small_se_model):
        blob = bytearray(ckpt.dumps(small_se_model))
        blob[12] = 99
        with pytest.raises(ckpt.CheckpointFormatError):
            ckpt.loads(bytes(blob))

    def test_mutation_fuzz(self):
        blob = ckpt.dumps(tiny_se_model(5))
        r = np.random.default_rng(11)
        for _ in range(2000):
            buf = bytearray(blob)
            for pos in r.integers(0, len(buf), r.integers(1, 4)):
                buf[pos] = r.integers(0, 256)
            try:
                ckpt.loads(bytes(buf))
            except ckpt.CheckpointError:
                pass

    def test_inconsistent_layers(self):
        layers = [GAP(), Dense(np.zeros((2, 3), np.float32), np.zeros(2, np.float32))]
        blob = bytearray(ckpt.dumps(ModelGraph(layers, 2, (3, 2, 2))))
        i = blob.find(b"num_classes=2")
        blob[i + len("num_classes=")] = ord("5")
        with pytest.raises(ckpt.CheckpointFormatError):
            ckpt.loads(bytes(blob))


def test_softmax_rows_sum_to_one(small_se_model, rng):
    p = predict_proba(small_se_model, rng.random((3, 3, 16, 16)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
