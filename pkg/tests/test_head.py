import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octfusion.errors import BatchTooSmall, ConfigError, DimensionError
from octfusion.head import (
    CountMode,
    Mode,
    TaskHead,
    TaskHeadConfig,
    count_params,
    forward_with_cache,
    fuse,
    fuse_matrix,
    head_backward,
    head_forward,
    load_head,
    relu,
    save_head,
)
from octfusion.trainer import predict, softmax_cross_entropy

TRIPLE = ["resnet18", "densenet121", "inceptionv3"]


def test_relu_examples():
    assert relu(-2.0) == 0.0
    assert relu(3.0) == 3.0
    assert relu(0.0) == 0.0
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.5])), [0.0, 0.5])


def test_fuse_examples():
    rng = np.random.default_rng(0)
    v1, v2, v3 = rng.standard_normal(512), rng.standard_normal(1024), rng.standard_normal(2048)
    out = fuse([v1, v2, v3], TRIPLE)
    assert out.vector.shape == (3584,)
    assert out.order == tuple(TRIPLE)
    np.testing.assert_array_equal(fuse([v1], ["resnet18"]).vector, v1)
    pair = fuse([v1, v2], ["resnet18", "densenet121"]).vector
    np.testing.assert_array_equal(pair[0:512], v1)
    np.testing.assert_array_equal(pair[512:1536], v2)


def test_fuse_errors():
    with pytest.raises(DimensionError):
        fuse([])
    with pytest.raises(DimensionError):
        fuse([np.zeros(511)], ["resnet18"])
    with pytest.raises(DimensionError):
        fuse_matrix([np.zeros((2, 512)), np.zeros((3, 1024))])


def test_config_input_dim():
    assert TaskHeadConfig.for_backbones(TRIPLE).input_dim == 3584
    assert TaskHeadConfig.for_backbones(["resnet18", "densenet121"]).input_dim == 1536
    assert TaskHeadConfig.for_backbones(["resnet18", "inceptionv3"]).input_dim == 2560
    assert TaskHeadConfig.for_backbones(["densenet121", "inceptionv3"]).input_dim == 3072
    with pytest.raises(ConfigError):
        TaskHeadConfig.for_backbones([])
    with pytest.raises(ConfigError):
        TaskHeadConfig(input_dim=0)
    with pytest.raises(ConfigError):
        TaskHeadConfig(input_dim=10, dropout_p=1.0)


# ------------------------------------------------------------------ forward


def test_zero_head_gives_zero_logits():
    head = TaskHead.zeros(TaskHeadConfig(input_dim=3584))
    x = np.random.default_rng(1).standard_normal((5, 3584)) * 7
    np.testing.assert_array_equal(head_forward(head, x, Mode.EVAL), np.zeros((5, 4)))


def test_eval_is_deterministic():
    head = TaskHead.init(TaskHeadConfig(input_dim=64, hidden_dim=32), seed=3)
    x = np.random.default_rng(2).standard_normal((6, 64))
    np.testing.assert_array_equal(head_forward(head, x, Mode.EVAL), head_forward(head, x, Mode.EVAL))


def _random_head(cfg, seed):
    rng = np.random.default_rng(seed)
    head = TaskHead.init(cfg, seed)
    for k, v in head.params.items():
        v[...] = rng.standard_normal(v.shape) * (0.05 if "weight" in k and "bn" not in k else 0.5)
    head.buffers["bn.running_mean"][...] = rng.standard_normal(cfg.hidden_dim)
    head.buffers["bn.running_var"][...] = rng.uniform(0.5, 2.0, cfg.hidden_dim)
    return head


def test_eval_matches_straight_line_oracle():
    cfg = TaskHeadConfig(input_dim=3584)
    head = _random_head(cfg, 4)
    x = np.random.default_rng(5).standard_normal((8, 3584))
    p, b = head.params, head.buffers
    # einsum formulation, independent of the matmul path in the library
    z = np.einsum("nd,hd->nh", x, p["linear.weight"]) + p["linear.bias"]
    bn = p["bn.weight"] * (z - b["bn.running_mean"]) / np.sqrt(b["bn.running_var"] + 1e-5) + p["bn.bias"]
    a = np.where(bn > 0, bn, 0.0)
    expected = np.einsum("nh,ch->nc", a, p["fc.weight"]) + p["fc.bias"]
    np.testing.assert_allclose(head_forward(head, x, Mode.EVAL), expected, atol=1e-5, rtol=0)


def test_train_equals_eval_when_stats_match():
    cfg = TaskHeadConfig(input_dim=20, hidden_dim=16, dropout_p=0.0)
    head = _random_head(cfg, 6)
    x = np.random.default_rng(7).standard_normal((10, 20))
    z = x @ head.params["linear.weight"].T + head.params["linear.bias"]
    head.buffers["bn.running_mean"][...] = z.mean(axis=0)
    head.buffers["bn.running_var"][...] = z.var(axis=0)
    train_logits, _ = forward_with_cache(head, x, Mode.TRAIN, update_stats=False)
    np.testing.assert_allclose(train_logits, head_forward(head, x, Mode.EVAL), atol=1e-12)


def test_train_mode_errors():
    head = TaskHead.init(TaskHeadConfig(input_dim=8, hidden_dim=4))
    with pytest.raises(BatchTooSmall):
        head_forward(head, np.zeros((1, 8)), Mode.TRAIN, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        head_forward(head, np.zeros((3, 9)), Mode.EVAL)


def test_running_stats_update():
    cfg = TaskHeadConfig(input_dim=6, hidden_dim=3, dropout_p=0.0)
    head = TaskHead.init(cfg, 0)
    x = np.random.default_rng(0).standard_normal((5, 6))
    z = x @ head.params["linear.weight"].T
    head_forward(head, x, Mode.TRAIN)
    np.testing.assert_allclose(head.buffers["bn.running_mean"], 0.1 * z.mean(0))
    np.testing.assert_allclose(head.buffers["bn.running_var"], 0.9 + 0.1 * z.var(0, ddof=1))


def test_dropout_scales_kept_units():
    cfg = TaskHeadConfig(input_dim=4, hidden_dim=2000, dropout_p=0.5)
    head = TaskHead.init(cfg, 0)
    _, cache = forward_with_cache(head, np.random.default_rng(1).standard_normal((4, 4)), Mode.TRAIN,
                                  np.random.default_rng(2))
    assert set(np.unique(cache.mask)) == {0.0, 2.0}
    assert abs(cache.mask.mean() - 1.0) < 0.05


@pytest.mark.parametrize("dropout", [0.0, 0.3])
def test_backward_matches_finite_differences(dropout):
    cfg = TaskHeadConfig(input_dim=6, hidden_dim=5, num_classes=4, dropout_p=dropout)
    head = _random_head(cfg, 8)
    for v in head.params.values():
        v *= 4.0
    x = np.random.default_rng(9).standard_normal((7, 6))
    y = np.array([0, 1, 2, 3, 0, 1, 2])
    seed = 11

    def loss():
        logits, _ = forward_with_cache(head, x, Mode.TRAIN, np.random.default_rng(seed), update_stats=False)
        return softmax_cross_entropy(logits, y)[0]

    logits, cache = forward_with_cache(head, x, Mode.TRAIN, np.random.default_rng(seed), update_stats=False)
    grads = head_backward(head, cache, softmax_cross_entropy(logits, y)[1])
    h = 1e-6
    for name, p in head.params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = loss()
            p[idx] = old - h
            lm = loss()
            p[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        np.testing.assert_allclose(grads[name], num, rtol=1e-5, atol=1e-8, err_msg=name)


@settings(max_examples=50, deadline=None)
@given(shift=st.floats(-1e3, 1e3, allow_nan=False), seed=st.integers(0, 10_000))
def test_argmax_shift_invariance(shift, seed):
    cfg = TaskHeadConfig(input_dim=10, hidden_dim=8)
    head = _random_head(cfg, seed)
    x = np.random.default_rng(seed).standard_normal((5, 10))
    base = predict(head, x)
    head.params["fc.bias"] += shift
    np.testing.assert_array_equal(predict(head, x), base)


# ---------------------------------------------------------- parameter counts


def test_count_params_examples():
    cfg = TaskHeadConfig.for_backbones(TRIPLE)
    assert count_params(TRIPLE, cfg, CountMode.FROZEN).trainable == 3_677_188
    assert 3584 * 1024 + 1024 + 2048 + 1024 * 4 + 4 == 3_677_188
    scratch = count_params(TRIPLE, cfg, CountMode.FROM_SCRATCH)
    assert scratch.trainable == scratch.total == 43_593_124 == 11_176_512 + 6_953_856 + 21_785_568 + 3_677_188
    with pytest.raises(ConfigError):
        count_params([], None)
    with pytest.raises(ConfigError):
        count_params(TRIPLE, TaskHeadConfig(input_dim=100))


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 300), h=st.integers(1, 200), c=st.integers(2, 9))
def test_closed_form_equals_tensor_enumeration(d, h, c):
    cfg = TaskHeadConfig(input_dim=d, hidden_dim=h, num_classes=c)
    assert cfg.trainable_params() == TaskHead.init(cfg).num_trainable() == d * h + 3 * h + h * c + c


def test_count_params_accepts_loaded_backbones(weights_dir):
    from octfusion.backbones import load_backbones

    loaded = load_backbones(["resnet18"], weights_dir)
    cfg = TaskHeadConfig.for_backbones(["resnet18"])
    assert count_params(loaded, cfg, "from_scratch").trainable == 11_176_512 + cfg.trainable_params()


def test_checkpoint_roundtrip(tmp_path):
    cfg = TaskHeadConfig(input_dim=12, hidden_dim=7)
    head = _random_head(cfg, 2)
    save_head(head, tmp_path / "ck", ["resnet18"], seed=5)
    loaded, meta = load_head(tmp_path / "ck")
    assert loaded.config == cfg
    assert meta["backbone_order"] == ["resnet18"] and meta["seed"] == 5
    for k, v in head.state_dict().items():
        np.testing.assert_array_equal(loaded.state_dict()[k], v)
