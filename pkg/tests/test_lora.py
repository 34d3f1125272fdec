import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reeflora import LoraConfig, ModelConfig, build_model, count_trainable
from reeflora.errors import ConfigError, ContractError, ShapeError
from reeflora.lora import LoraLinear, head_param_count, init_lora, lora_forward, merge_weights
from reeflora.tensor import Tensor, bce_with_logits, linear


def hand_layer(alpha=1.0):
    return LoraLinear(weight=Tensor(np.eye(2)), A=Tensor(np.array([[0.0, 1.0]]), requires_grad=True),
                      B=Tensor(np.array([[1.0], [0.0]]), requires_grad=True), alpha=alpha,
                      bias=Tensor(np.zeros(2)))


def test_hand_forward_examples():
    np.testing.assert_array_equal(lora_forward(hand_layer(), [1.0, 2.0]).data, [3.0, 2.0])
    np.testing.assert_array_equal(lora_forward(hand_layer(alpha=2.0), [1.0, 2.0]).data, [5.0, 2.0])


def test_hand_merge_example():
    np.testing.assert_array_equal(merge_weights(hand_layer()), [[1.0, 1.0], [0.0, 1.0]])


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        lora_forward(hand_layer(), [1.0, 2.0, 3.0])


def test_init_contract():
    w = np.random.default_rng(0).normal(size=(6, 5))
    layer = init_lora(w, LoraConfig(rank=2), seed=0)
    assert layer.A.shape == (2, 5) and layer.B.shape == (6, 2)
    assert not layer.B.data.any()
    assert not layer.weight.requires_grad and layer.A.requires_grad and layer.B.requires_grad
    assert merge_weights(layer).tobytes() == w.tobytes()
    x = np.random.default_rng(1).normal(size=5)
    base = linear(Tensor(x[None]), Tensor(w)).data[0]
    np.testing.assert_array_equal(lora_forward(layer, x).data, base)
    with pytest.raises(ConfigError):
        init_lora(np.eye(4), LoraConfig(rank=4), seed=0)
    with pytest.raises(ContractError):
        init_lora(np.eye(4), LoraConfig(rank=0), seed=0)


def test_init_A_is_gaussian_002():
    a = init_lora(np.zeros((300, 300)), LoraConfig(rank=100), seed=3).A.data
    assert abs(a.mean()) < 1e-3 and abs(a.std() - 0.02) < 5e-4


def test_merge_equivalence_100_trials():
    rs = np.random.default_rng(42)
    worst = 0.0
    for trial in range(100):
        d, k = rs.integers(2, 20, size=2)
        r = int(rs.integers(1, min(d, k)))
        alpha = float(rs.uniform(0.1, 4 * r))
        layer = init_lora(rs.normal(size=(d, k)), LoraConfig(rank=r, alpha=alpha), seed=trial,
                          bias=rs.normal(size=d))
        layer.B.data[...] = rs.normal(size=(d, r))
        x = rs.normal(size=k)
        adapted = lora_forward(layer, x).data
        merged = merge_weights(layer) @ x + layer.bias.data
        worst = max(worst, float(np.max(np.abs(merged - adapted) / np.maximum(np.abs(adapted), 1e-12))))
    assert worst <= 1e-6


def test_zero_init_logits_bit_identical(toy_config):
    model = build_model(toy_config, LoraConfig(rank=4, targets=("query", "key", "value", "output", "mlp")), 0)
    x = np.random.default_rng(0).random((3, 64, 64, 3)).astype(np.float32)
    assert model.logits(x).data.tobytes() == model.without_adapters().logits(x).data.tobytes()


def test_rank_zero_leaves_layers_unwrapped(toy_config):
    model = build_model(toy_config, LoraConfig(rank=0), 0)
    assert not [k for k in model.params if ".lora_" in k]
    assert set(model.trainable()) == {"head.weight", "head.bias"}


def test_count_trainable_examples():
    d = k = 4
    assert d * 1 + 1 * k == 8 < d * k
    giant = ModelConfig()
    budget = count_trainable(giant, LoraConfig())
    assert budget.trainable == 40 * 2 * (1536 * 24 + 24 * 1536) + (1536 * 8 + 8) == 5_910_536
    assert count_trainable(giant, LoraConfig(rank=0)).trainable == 12_296 == head_param_count(giant)
    assert budget.trainable + budget.frozen == budget.total


def test_count_matches_built_model(toy_config):
    for lc in (LoraConfig(rank=0), LoraConfig(rank=3), LoraConfig(rank=2, targets=("key", "mlp"))):
        model = build_model(toy_config, lc, 0)
        budget = count_trainable(toy_config, lc)
        assert budget.trainable == model.trainable().count()
        assert budget.frozen == model.frozen().count()


@given(st.sampled_from([("query", "value"), ("key",), ("output", "mlp"), ("query", "key", "value", "output")]))
def test_count_strictly_increasing_in_rank(targets):
    mc = ModelConfig(image_size=64, patch_size=16, embed_dim=48, depth=3, heads=4)
    counts = [count_trainable(mc, LoraConfig(rank=r, targets=targets)).trainable for r in range(0, 48)]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_gradient_routing(toy_config):
    model = build_model(toy_config, LoraConfig(rank=2), 0, dtype=np.float64)
    rs = np.random.default_rng(0)
    for name, t in model.params.items():
        if name.endswith("lora_B"):
            t.data[...] = rs.normal(0, 0.05, t.shape)
    loss = bce_with_logits(model.logits(rs.random((2, 64, 64, 3))), rs.integers(0, 2, (2, 8)))
    loss.backward()
    for name, t in model.params.items():
        if t.requires_grad:
            assert t.grad is not None and np.any(t.grad), name
        else:
            assert t.grad is None or not np.any(t.grad), name
    trainable = set(model.trainable())
    assert trainable == {k for k in model.params if ".lora_" in k or k.startswith("head.")}


def test_adapter_grads_only_after_B_moves(toy_config):
    """With B = 0 the gradient reaching A is exactly zero; B's is not."""
    model = build_model(toy_config, LoraConfig(rank=2), 0, dtype=np.float64)
    rs = np.random.default_rng(0)
    bce_with_logits(model.logits(rs.random((2, 64, 64, 3))), rs.integers(0, 2, (2, 8))).backward()
    assert not np.any(model.params["blocks.0.attn.query.lora_A"].grad)
    assert np.any(model.params["blocks.0.attn.query.lora_B"].grad)


def test_config_validation():
    with pytest.raises(ConfigError):
        LoraConfig(rank=-1)
    with pytest.raises(ConfigError):
        LoraConfig(targets=("query", "bogus"))
    with pytest.raises(ConfigError):
        LoraConfig(alpha=0.0)
    assert LoraConfig(rank=8).scale == 1.0
    assert LoraConfig(rank=8, alpha=16).scale == 2.0
    with pytest.raises(ConfigError):
        count_trainable(ModelConfig(image_size=32, patch_size=8, embed_dim=16, depth=1, heads=2), LoraConfig(rank=16))
