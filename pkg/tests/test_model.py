"""Upcycling, routing, gated forward, partitions, and checkpoints."""

import numpy as np
import pytest

from layermoe.errors import (
    ConfigurationError,
    FormatError,
    InvalidInputError,
    PlanMismatchError,
    SequenceLengthError,
)
from layermoe.model import (
    DenseModel,
    ModelConfig,
    MoELayer,
    add_classifiers,
    extend_expansion,
    forward,
    hash_params,
    load_model,
    moe_layer_forward,
    partition_params,
    route,
    save_model,
    upcycle,
)
from layermoe.numerics import SeededRng, Tensor


def tiny_config(**overrides):
    base = dict(layers=2, hidden=16, heads=2, vocab=32, ffn=12, context=12, top_k=2, seed=5)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def dense():
    return DenseModel.create(tiny_config(), groups=("g0",))


def sample_tokens(config, batch=2, length=None, seed=11):
    gen = SeededRng(seed).generator()
    length = length or config.context
    tokens = gen.integers(2, config.vocab, size=(batch, length))
    tokens[:, 0] = 0
    return tokens


class TestUpcycle:
    def test_structure(self, dense):
        model = upcycle(dense, [2, 3], "g1")
        assert model.expert_counts() == (3, 4)
        assert len(model.layer(0).router_columns) == 3
        assert len(model.layer(1).router_columns) == 4
        for col in model.layer(1).router_columns:
            np.testing.assert_array_equal(col.data, 0.0)
        assert model.expansion_history[0].group == "g1"
        assert model.proficient_groups == ("g0", "g1")

    def test_uniform_plan_reproduces_grid_shape(self):
        config = tiny_config(layers=24, hidden=8, heads=2, ffn=4, vocab=16, context=8)
        dense24 = DenseModel.create(config, groups=("g0",))
        model = upcycle(dense24, [2] * 24, "g1")
        # 1 original + 2 added = the 3-experts-on-24-layers baseline grid
        assert model.expert_counts() == (3,) * 24

    def test_zero_expert_layer_is_identity_mixture(self, dense):
        model = upcycle(dense, [0, 1], "g1")
        assert model.expert_counts() == (1, 2)
        tokens = sample_tokens(dense.config)
        moe_out = forward(model, tokens)
        dense_out = forward(dense, tokens)
        trace = moe_out.trace[0]
        assert trace.indices.shape[-1] == 1
        np.testing.assert_array_equal(trace.weights, 1.0)
        # layer 0 mixes only the original FFN, so the whole dense layer-0
        # computation is preserved; taps of layer 1 must agree exactly
        np.testing.assert_array_equal(moe_out.taps[1], dense_out.taps[1])

    def test_new_experts_start_near_original(self, dense):
        model = upcycle(dense, [1, 1], "g1")
        base = dense.params["blocks.0.ffn.gate"].data
        added = model.params["blocks.0.experts.1.gate"].data
        delta = added - base
        assert 0 < np.abs(delta).max() < 0.1
        again = upcycle(dense, [1, 1], "g1")
        np.testing.assert_array_equal(added, again.params["blocks.0.experts.1.gate"].data)

    def test_random_init_option(self, dense):
        model = upcycle(dense, [1, 1], "g1", init="random")
        base = dense.params["blocks.0.ffn.gate"].data
        added = model.params["blocks.0.experts.1.gate"].data
        assert np.abs(added - base).max() > 0.01

    def test_plan_mismatch(self, dense):
        with pytest.raises(PlanMismatchError):
            upcycle(dense, [1, 1, 1], "g1")
        with pytest.raises(PlanMismatchError):
            upcycle(dense, [-1, 2], "g1")

    def test_frozen_dense_untouched(self, dense):
        before = hash_params(dense, sorted(dense.params))
        upcycle(dense, [2, 2], "g1")
        assert hash_params(dense, sorted(dense.params)) == before


class TestRoute:
    def test_hand_example(self):
        h = 4
        router = np.zeros((h, 3))
        router[0] = [2.0, 0.0, 1.0]
        x = np.zeros(h)
        x[0] = 1.0
        indices, weights = route(x, router, 2)
        np.testing.assert_array_equal(indices, [0, 2])
        np.testing.assert_allclose(weights, [0.73106, 0.26894], atol=1e-5)
        assert weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_tie_break_low_index(self):
        indices, weights = route(np.ones(4), np.zeros((4, 3)), 2)
        np.testing.assert_array_equal(indices, [0, 1])
        np.testing.assert_array_equal(weights, [0.5, 0.5])

    def test_k_equals_n_is_full_softmax(self):
        gen = SeededRng(3).generator()
        x = gen.normal(size=4)
        router = gen.normal(size=(4, 2))
        indices, weights = route(x, router, 2)
        full = np.exp(x @ router - (x @ router).max())
        full /= full.sum()
        np.testing.assert_allclose(np.sort(weights), np.sort(full), atol=1e-12)
        assert set(indices.tolist()) == {0, 1}

    def test_k_clipped_to_n(self):
        indices, _ = route(np.ones(4), np.zeros((4, 2)), 5)
        assert len(indices) == 2

    def test_scale_invariant_selection(self):
        gen = SeededRng(4).generator()
        x = gen.normal(size=6)
        router = gen.normal(size=(6, 5))
        base, _ = route(x, router, 2)
        scaled, _ = route(3.0 * x, router, 2)
        np.testing.assert_array_equal(base, scaled)


class TestMoELayerForward:
    @staticmethod
    def stub_layer(classifier=None):
        # experts E0(x) = 2x and E1(x) = -x; router puts logits (2, 1) on
        # x = (1, 0), so the renormalised weights are (0.73106, 0.26894)
        col0 = Tensor(np.array([2.0, 0.0]))
        col1 = Tensor(np.array([1.0, 0.0]))
        return MoELayer(
            index=0,
            experts=[lambda t: t * 2.0, lambda t: -t],
            router_columns=[col0, col1],
            top_k=2,
            classifier=classifier,
        )

    def test_weighted_mix_hand_example(self):
        y = moe_layer_forward(np.array([1.0, 0.0]), self.stub_layer())
        np.testing.assert_allclose(y, [2.19318, 0.0], atol=1e-4)

    def test_gate_bypasses_router_exactly(self):
        # zero classifier logits tie everywhere and argmax resolves to class 0
        # ("old"), so every row takes the bypass
        layer = self.stub_layer(Tensor(np.zeros((2, 2))))
        x = SeededRng(9).generator().normal(size=(7, 2))
        gated = moe_layer_forward(x, layer, mode="gated")
        expected = 2.0 * x + x  # E0(x) + x, same arithmetic path
        np.testing.assert_array_equal(gated, expected)

    def test_gate_new_tokens_route_normally(self):
        classifier = Tensor(np.array([[-5.0, 5.0], [0.0, 0.0]]))  # always "new"
        layer = self.stub_layer(classifier)
        x = np.array([[1.0, 0.0]])
        np.testing.assert_array_equal(
            moe_layer_forward(x, layer, mode="gated"), moe_layer_forward(x, layer)
        )

    def test_single_expert_layer(self):
        layer = MoELayer(0, [lambda t: t * 3.0], [Tensor(np.zeros(2))], top_k=2)
        x = np.array([0.5, -1.0])
        np.testing.assert_array_equal(moe_layer_forward(x, layer), 3.0 * x + x)

    def test_gated_without_classifier_rejected(self):
        with pytest.raises(ConfigurationError):
            moe_layer_forward(np.array([1.0, 0.0]), self.stub_layer(), mode="gated")


class TestForward:
    def test_tap_shapes(self, dense):
        model = upcycle(dense, [2, 2], "g1")
        tokens = sample_tokens(dense.config, batch=3, length=7)
        result = forward(model, tokens)
        config = dense.config
        assert result.taps.shape == (config.layers, 3, 7, config.hidden)
        assert result.logits.shape == (3, 7, config.vocab)

    def test_zero_router_tie_break_everywhere(self, dense):
        model = upcycle(dense, [2, 2], "g1")  # 3 experts, top-2, zero routers
        result = forward(model, sample_tokens(dense.config))
        for trace in result.trace:
            assert set(map(tuple, trace.indices.reshape(-1, 2))) == {(0, 1)}
            np.testing.assert_array_equal(trace.weights, 0.5)

    def test_routing_weight_invariants(self, dense):
        gen = SeededRng(21).generator()
        model = upcycle(dense, [3, 1], "g1")
        for i in range(dense.config.layers):
            for col in model.layer(i).router_columns:
                col.data[:] = gen.normal(size=col.data.shape)
        result = forward(model, sample_tokens(dense.config))
        for i, trace in enumerate(result.trace):
            n = model.expert_counts()[i]
            k = min(dense.config.top_k, n)
            assert trace.indices.shape[-1] == k
            flat = trace.indices.reshape(-1, k)
            assert all(len(set(row.tolist())) == k for row in flat)
            assert (trace.weights > 0).all()
            np.testing.assert_allclose(trace.weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_bitwise_deterministic(self, dense):
        model = upcycle(dense, [2, 2], "g1")
        tokens = sample_tokens(dense.config)
        first = forward(model, tokens)
        second = forward(model, tokens)
        np.testing.assert_array_equal(first.logits, second.logits)
        rebuilt = upcycle(DenseModel.create(tiny_config(), groups=("g0",)), [2, 2], "g1")
        third = forward(rebuilt, tokens)
        np.testing.assert_array_equal(first.logits, third.logits)

    def test_input_validation(self, dense):
        config = dense.config
        with pytest.raises(SequenceLengthError):
            forward(dense, np.zeros((1, config.context + 1), dtype=int))
        with pytest.raises(InvalidInputError):
            forward(dense, np.array([[0, config.vocab]]))

    def test_gated_needs_classifiers(self, dense):
        model = upcycle(dense, [1, 1], "g1")
        with pytest.raises(ConfigurationError):
            forward(model, sample_tokens(dense.config), mode="gated")

    def test_gated_layers_report_gate_decisions(self, dense):
        model = upcycle(dense, [1, 1], "g1")
        add_classifiers(model, [1])
        result = forward(model, sample_tokens(dense.config), mode="gated")
        assert result.trace[0].gate_old is None
        # zero classifier logits tie, argmax picks class 0 = old everywhere
        np.testing.assert_array_equal(result.trace[1].gate_old, True)


class TestPartition:
    def test_stage1_counts_on_uniform_grid(self):
        config = tiny_config(layers=24, hidden=8, heads=2, ffn=4, vocab=16, context=8)
        dense24 = DenseModel.create(config, groups=("g0",))
        model = upcycle(dense24, [2] * 24, "g1")
        trainable, frozen = partition_params(model, "stage1")
        experts = [n for n in trainable if ".experts." in n]
        routers = [n for n in trainable if ".router." in n]
        assert len(experts) == 24 * 2 * 3  # 48 new experts, 3 matrices each
        assert len(routers) == 24 * 2  # their router columns only
        assert set(trainable) | set(frozen) == set(model.params)
        assert not set(trainable) & set(frozen)
        assert all(".experts.0." not in n for n in trainable)
        assert all(not n.endswith(".router.0") for n in trainable)

    def test_stage2_routers_and_classifiers(self, dense):
        model = upcycle(dense, [2, 2], "g1")
        add_classifiers(model, [1])
        trainable, frozen = partition_params(model, "stage2")
        assert set(trainable) == {
            "blocks.0.router.0",
            "blocks.0.router.1",
            "blocks.0.router.2",
            "blocks.1.router.0",
            "blocks.1.router.1",
            "blocks.1.router.2",
            "blocks.1.classifier",
        }
        assert set(trainable) | set(frozen) == set(model.params)

    def test_degenerate_cases(self, dense):
        with pytest.raises(ConfigurationError):
            partition_params(dense, "stage1")
        model = upcycle(dense, [0, 0], "g1")
        with pytest.raises(ConfigurationError):
            partition_params(model, "stage1")

    def test_second_expansion_trains_only_its_experts(self, dense):
        model = upcycle(dense, [1, 1], "g1")
        model = extend_expansion(model, [2, 1], "g2")
        trainable, _ = partition_params(model, "stage1")
        assert "blocks.0.experts.1.gate" not in trainable
        assert "blocks.0.experts.2.gate" in trainable
        assert "blocks.0.experts.3.gate" in trainable
        assert "blocks.1.experts.2.gate" in trainable
        assert "blocks.0.router.2" in trainable and "blocks.0.router.1" not in trainable


class TestExtendAndClassifiers:
    def test_extension_grows_counts_and_freezes_earlier(self, dense):
        model = upcycle(dense, [1, 2], "g1")
        first_hash = hash_params(model, [n for n in model.params if ".experts.1." in n])
        extended = extend_expansion(model, [2, 1], "g2")
        assert extended.expert_counts() == (4, 4)
        assert extended.proficient_groups == ("g0", "g1", "g2")
        assert extended.old_groups == ("g0", "g1")
        assert hash_params(extended, [n for n in extended.params if ".experts.1." in n]) == first_hash

    def test_extension_drops_classifiers(self, dense):
        model = upcycle(dense, [1, 1], "g1")
        add_classifiers(model, [0])
        extended = extend_expansion(model, [1, 1], "g2")
        assert extended.classifier_layers == ()
        assert not any(n.endswith(".classifier") for n in extended.params)

    def test_add_classifiers_replaces(self, dense):
        model = upcycle(dense, [1, 1], "g1")
        add_classifiers(model, [0])
        add_classifiers(model, [1])
        assert model.classifier_layers == (1,)
        assert "blocks.0.classifier" not in model.params
        np.testing.assert_array_equal(model.params["blocks.1.classifier"].data, 0.0)

    def test_out_of_range_rejected(self, dense):
        model = upcycle(dense, [1, 1], "g1")
        with pytest.raises(InvalidInputError):
            add_classifiers(model, [5])


class TestCheckpoint:
    def test_dense_roundtrip_bitwise(self, dense, tmp_path):
        path = tmp_path / "dense.lmoe"
        save_model(dense, path)
        first = path.read_bytes()
        loaded = load_model(path)
        save_model(loaded, path)
        assert path.read_bytes() == first
        assert isinstance(loaded, DenseModel)
        assert loaded.groups == ("g0",)
        for name in dense.params:
            np.testing.assert_array_equal(loaded.params[name].data, dense.params[name].data)

    def test_moe_roundtrip_preserves_structure(self, dense, tmp_path):
        model = upcycle(dense, [2, 1], "g1")
        model = extend_expansion(model, [1, 1], "g2")
        add_classifiers(model, [0, 1])
        path = tmp_path / "model.lmoe"
        save_model(model, path)
        loaded = load_model(path)
        save_model(loaded, tmp_path / "again.lmoe")
        assert (tmp_path / "again.lmoe").read_bytes() == path.read_bytes()
        assert loaded.expansion_history == model.expansion_history
        assert loaded.classifier_layers == (0, 1)
        assert loaded.base_groups == ("g0",)
        tokens = sample_tokens(dense.config)
        np.testing.assert_array_equal(
            forward(loaded, tokens).logits, forward(model, tokens).logits
        )

    def test_bad_magic(self, dense, tmp_path):
        path = tmp_path / "x.lmoe"
        save_model(dense, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_model(path)

    def test_truncated_payload(self, dense, tmp_path):
        path = tmp_path / "x.lmoe"
        save_model(dense, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(FormatError):
            load_model(path)

    def test_bad_version(self, dense, tmp_path):
        path = tmp_path / "x.lmoe"
        save_model(dense, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_model(path)
