import json
import threading

import numpy as np
import onnx
import pytest

from molarscan.errors import ModelError
from molarscan.graph import (
    LcgStream,
    classifier_stub_proto,
    forward,
    forward_from_tap,
    forward_with_taps,
    load_model,
    reference_net,
)

from oracles import lcg_values, stub_forward, stub_input_gradient, stub_weights


def probe_input(seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (1, 1, 16, 16))


class TestLcg:
    def test_first_values(self):
        x1 = (1103515245 * 42 + 12345) % 2**31
        assert LcgStream().next() == (x1 / 2**31 - 0.5) / 5

    def test_range(self):
        vals = LcgStream().take(1000)
        assert vals.min() > -0.1 and vals.max() < 0.1


class TestReferenceClassifier:
    def test_deterministic_weights(self):
        a, b = reference_net("classifier_stub"), reference_net("classifier_stub")
        for name in a.initializers:
            np.testing.assert_array_equal(a.initializers[name], b.initializers[name])

    def test_weights_match_declaration_order(self, classifier16):
        conv1, conv2, fc_w, fc_b = stub_weights()
        np.testing.assert_array_equal(classifier16.initializers["conv1.weight"], conv1)
        np.testing.assert_array_equal(classifier16.initializers["conv2.weight"], conv2)
        np.testing.assert_array_equal(classifier16.fc_weight, fc_w)
        np.testing.assert_array_equal(classifier16.fc_bias, fc_b)

    def test_zero_input_gives_bias(self, classifier16):
        (logits,) = forward(classifier16, np.zeros((1, 1, 16, 16))).values()
        np.testing.assert_array_equal(logits.ravel(), lcg_values(342)[340:342])

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_longhand_forward(self, classifier16, seed):
        x = probe_input(seed)
        (logits,) = forward(classifier16, x).values()
        expected, _ = stub_forward(x[0, 0])
        np.testing.assert_allclose(logits.ravel(), expected, rtol=1e-12, atol=1e-15)

    def test_tap_shape(self, classifier16):
        assert classifier16.tap_shape("last_conv") == (1, 8, 8, 8)
        assert classifier16.head_kind == "gap_linear"

    def test_input_gradient_probe(self, classifier16):
        x = probe_input(7)
        analytic = stub_input_gradient(x[0, 0], 0)
        h = 1e-4
        for i, j in [(3, 4), (8, 8), (12, 1)]:
            up, down = x.copy(), x.copy()
            up[0, 0, i, j] += h
            down[0, 0, i, j] -= h
            fd = (forward(classifier16, up)["logits"][0, 0] - forward(classifier16, down)["logits"][0, 0]) / (2 * h)
            assert fd == pytest.approx(analytic[i, j], rel=1e-5, abs=1e-9)

    def test_224_variant_shares_weights(self, classifier16, classifier224):
        x16 = probe_input(3)
        x224 = np.kron(x16, np.ones((14, 14)))
        np.testing.assert_allclose(
            forward(classifier224, x224)["logits"], forward(classifier16, x16)["logits"], atol=1e-14
        )


class TestTaps:
    def test_taps_do_not_change_outputs(self, classifier16):
        x = probe_input(1)
        outputs, taps = forward_with_taps(classifier16, x, ["last_conv", "pool1"])
        np.testing.assert_array_equal(outputs["logits"], forward(classifier16, x)["logits"])
        assert taps["pool1"].shape == (1, 4, 8, 8)

    @pytest.mark.parametrize("tap", ["conv1", "relu1", "pool1", "conv2", "last_conv", "gap", "flat"])
    def test_forward_from_every_tap(self, classifier16, tap):
        x = probe_input(2)
        _, taps = forward_with_taps(classifier16, x, [tap])
        np.testing.assert_array_equal(
            forward_from_tap(classifier16, tap, taps[tap])["logits"], forward(classifier16, x)["logits"]
        )

    def test_zero_activations_give_bias(self, classifier16):
        out = forward_from_tap(classifier16, "last_conv", np.zeros((1, 8, 8, 8)))
        np.testing.assert_array_equal(out["logits"].ravel(), classifier16.fc_bias)

    def test_unknown_tap(self, classifier16):
        with pytest.raises(ModelError):
            forward_from_tap(classifier16, "layer9", np.zeros((1, 8, 8, 8)))

    def test_tap_shape_mismatch(self, classifier16):
        with pytest.raises(ModelError):
            forward_from_tap(classifier16, "last_conv", np.zeros((1, 8, 4, 4)))

    def test_concurrent_forward(self, classifier16):
        x = probe_input(4)
        expected = forward(classifier16, x)["logits"]
        results = []

        def work():
            for _ in range(20):
                results.append(forward(classifier16, x)["logits"])

        threads = [threading.Thread(target=work) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert all(np.array_equal(r, expected) for r in results)


class TestLoadModel:
    def test_valid_classifier(self, model_dir):
        model = load_model(model_dir / "classifier_stub.onnx", "classifier")
        assert model.output_shapes["logits"] == (1, 2)
        assert model.head_kind == "gap_linear"
        assert len(model.metadata["sha256"]) == 64

    def test_valid_detector(self, model_dir):
        model = load_model(model_dir / "detector_stub.onnx", "detector")
        assert model.output_shapes["output"] == (1, 20, 169)

    def test_detector_as_classifier(self, model_dir, tmp_path):
        path = tmp_path / "det.onnx"
        path.write_bytes((model_dir / "detector_stub.onnx").read_bytes())
        with pytest.raises(ModelError, match="input must be 1x1x224x224"):
            load_model(path, "classifier")

    def test_sidecar_kind_mismatch(self, model_dir):
        with pytest.raises(ModelError):
            load_model(model_dir / "detector_stub.onnx", "classifier")

    def test_missing_last_conv(self, tmp_path):
        proto = classifier_stub_proto(224)
        for node in proto.graph.node:
            node.input[:] = ["conv_out" if n == "last_conv" else n for n in node.input]
            node.output[:] = ["conv_out" if n == "last_conv" else n for n in node.output]
        onnx.save(proto, str(tmp_path / "c.onnx"))
        with pytest.raises(ModelError, match="last_conv"):
            load_model(tmp_path / "c.onnx", "classifier")

    def test_tap_alias_from_sidecar(self, tmp_path):
        proto = classifier_stub_proto(224)
        for node in proto.graph.node:
            node.input[:] = ["conv_out" if n == "last_conv" else n for n in node.input]
            node.output[:] = ["conv_out" if n == "last_conv" else n for n in node.output]
        onnx.save(proto, str(tmp_path / "c.onnx"))
        (tmp_path / "c.json").write_text(json.dumps({"kind": "classifier", "taps": {"last_conv": "conv_out"}}))
        model = load_model(tmp_path / "c.onnx", "classifier")
        assert model.tap_shape("last_conv") == (1, 8, 8, 8)
        assert model.head_kind == "gap_linear"

    def test_opaque_sidecar(self, tmp_path):
        onnx.save(classifier_stub_proto(224), str(tmp_path / "c.onnx"))
        (tmp_path / "c.json").write_text(json.dumps({"head": "opaque"}))
        assert load_model(tmp_path / "c.onnx", "classifier").head_kind == "opaque"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ModelError):
            load_model(tmp_path / "none.onnx", "classifier")

    def test_unsupported_operator(self, tmp_path):
        proto = classifier_stub_proto(224)
        proto.graph.node[1].op_type = "LeakyRelu"
        onnx.save(proto, str(tmp_path / "c.onnx"))
        with pytest.raises(ModelError, match="LeakyRelu"):
            load_model(tmp_path / "c.onnx", "classifier")
