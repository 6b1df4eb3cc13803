"""Autodiff against central finite differences in float64, 20 seeds per op and per loss."""

import numpy as np
import pytest

from cadnet import tensor as T
from cadnet.crgan import (
    FeatureDiscriminator,
    ImageDiscriminator,
    feature_d_loss,
    feature_g_loss,
    image_d_loss,
    image_g_loss,
    loss_rec,
)
from cadnet.data import make_toy_dataset, next_batch
from cadnet.gradcheck import as_f64_params, check_grads
from cadnet.reid import loss_cls, loss_id, loss_triplet
from cadnet.trainer import TrainConfig, Trainer
from cadnet.tensor import Tensor

SEEDS = range(20)
TOL = 1e-3
# Losses over whole conv nets have many leaky-ReLU kinks; a 1e-3 step straddles
# some of them, so those checks use a finer step (fine in float64).
NET_STEP = 1e-5


def leaf(rng, shape, away_from_zero=False, low=None):
    x = rng.normal(size=shape)
    if away_from_zero:
        x = np.sign(x) * (0.1 + np.abs(x))
    if low is not None:
        x = low + np.abs(x)
    return T.parameter(x, dtype=np.float64)


def f64t(values) -> Tensor:
    return Tensor(values, dtype=np.float64)


def weighted(out: Tensor, rng) -> Tensor:
    # random projection so every output coordinate matters
    r = f64t(rng.normal(size=out.shape))
    return T.sum(T.mul(out, r))


def assert_close(errs):
    assert max(errs) < TOL, errs


UNARY = {
    "relu": (lambda x: T.relu(x), True),
    "leaky_relu": (lambda x: T.leaky_relu(x, 0.2), True),
    "sigmoid": (T.sigmoid, False),
    "softmax": (lambda x: T.softmax(x, axis=-1), False),
    "log": (T.log, "positive"),
    "sqrt": (T.sqrt, "positive"),
    "max_with_scalar": (lambda x: T.max_with_scalar(x, 0.0), True),
    "clamp": (lambda x: T.clamp(x, -0.6, 0.6), True),
    "sum_axis": (lambda x: T.sum(x, axis=1), False),
    "mean_axis": (lambda x: T.mean(x, axis=0, keepdims=True), False),
    "reshape": (lambda x: T.reshape(x, (-1,)), False),
    "take": (lambda x: T.take(x, np.array([2, 0, 2, 1])), False),
    "pick": (lambda x: T.pick(x, np.array([0, 3, 1])), False),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_unary(name, seed):
    fn, kind = UNARY[name]
    rng = np.random.default_rng(seed)
    x = leaf(rng, (3, 4), away_from_zero=kind is True, low=0.2 if kind == "positive" else None)
    r = rng.normal(size=fn(x).shape)
    assert_close(check_grads(lambda: T.sum(T.mul(fn(x), f64t(r))), [x]))


def test_clamp_is_exercised_on_both_sides():
    x = T.parameter(np.array([-1.0, 0.3, 1.0]))
    T.backward(T.sum(T.clamp(x, -0.6, 0.6)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


BINARY = {
    "add": (T.add, (3, 4), (4,)),
    "sub": (T.sub, (3, 4), (3, 1)),
    "mul": (T.mul, (2, 3, 4), (3, 4)),
    "matmul": (T.matmul, (3, 5), (5, 2)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_binary(name, seed):
    fn, sa, sb = BINARY[name]
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, sa), leaf(rng, sb)
    r = rng.normal(size=fn(a, b).shape)
    assert_close(check_grads(lambda: T.sum(T.mul(fn(a, b), f64t(r))), [a, b]))


@pytest.mark.parametrize("seed", SEEDS)
def test_l1_mean(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (2, 5), away_from_zero=True)
    assert_close(check_grads(lambda: T.l1_mean(x), [x]))


@pytest.mark.parametrize("seed", SEEDS)
def test_concat(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, (2, 3, 2)), leaf(rng, (2, 3, 4))
    r = rng.normal(size=(2, 3, 6))
    assert_close(check_grads(lambda: T.sum(T.mul(T.concat([a, b], axis=-1), f64t(r))), [a, b]))


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d(seed, stride, pad):
    rng = np.random.default_rng(seed)
    x, w, b = leaf(rng, (2, 5, 4, 2)), leaf(rng, (3, 3, 2, 3)), leaf(rng, (3,))
    out_shape = T.conv2d(x, w, b, stride, pad).shape
    r = rng.normal(size=out_shape)
    assert_close(check_grads(lambda: T.sum(T.mul(T.conv2d(x, w, b, stride, pad), f64t(r))), [x, w, b]))


@pytest.mark.parametrize("seed", SEEDS)
def test_avg_pool2d(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (2, 4, 6, 2))
    assert_close(check_grads(lambda: weighted_fixed(T.avg_pool2d(x, 2), seed), [x]))


@pytest.mark.parametrize("seed", SEEDS)
def test_global_avg_pool(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (2, 3, 2, 4))
    assert_close(check_grads(lambda: weighted_fixed(T.global_avg_pool(x), seed), [x]))


@pytest.mark.parametrize("size", [(7, 3), (2, 2), (6, 4)])
@pytest.mark.parametrize("seed", SEEDS)
def test_bilinear_resize(seed, size):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (2, 3, 2, 2))
    assert_close(check_grads(lambda: weighted_fixed(T.bilinear_resize(x, size), seed), [x]))


@pytest.mark.parametrize("seed", SEEDS)
def test_depth_to_space(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (1, 2, 3, 8))
    assert_close(check_grads(lambda: weighted_fixed(T.depth_to_space(x, 2), seed), [x]))


def weighted_fixed(out: Tensor, seed: int) -> Tensor:
    return weighted(out, np.random.default_rng(1000 + seed))


# ---------------------------------------------------------------------------
# composite losses


def f64(module):
    as_f64_params(module)
    return module


def probs_of(rng, n, k):
    return T.softmax(leaf(rng, (n, k)), axis=-1)


@pytest.mark.parametrize("seed", SEEDS)
def test_feature_adversarial(seed):
    rng = np.random.default_rng(seed)
    d_f = f64(FeatureDiscriminator(4, rng, hidden=3))
    f_h, f_l = leaf(rng, (2, 2, 1, 4)), leaf(rng, (2, 2, 1, 4))
    params = list(d_f.parameters().values())
    assert_close(check_grads(lambda: feature_d_loss(d_f, f_h, f_l), params, NET_STEP))
    assert_close(check_grads(lambda: feature_g_loss(d_f, f_l), [f_l], NET_STEP))


@pytest.mark.parametrize("seed", SEEDS)
def test_image_adversarial(seed):
    rng = np.random.default_rng(seed)
    d_i = f64(ImageDiscriminator(rng, channels=(2, 2, 2)))
    x_h = f64t(rng.uniform(size=(2, 8, 4, 3)))
    rec_l, rec_h = (T.parameter(rng.uniform(0.1, 0.9, size=(2, 8, 4, 3)), dtype=np.float64) for _ in range(2))
    params = list(d_i.parameters().values())
    assert_close(check_grads(lambda: image_d_loss(d_i, x_h, rec_l, rec_h), params, NET_STEP, max_coords=40, rng=rng))
    assert_close(check_grads(lambda: image_g_loss(d_i, rec_l, rec_h), [rec_l, rec_h], NET_STEP, max_coords=40, rng=rng))


@pytest.mark.parametrize("seed", SEEDS)
def test_reconstruction(seed):
    rng = np.random.default_rng(seed)
    rec_h, rec_l = leaf(rng, (2, 4, 2, 3)), leaf(rng, (2, 4, 2, 3))
    x_h = f64t(rec_h.data + np.sign(rng.normal(size=rec_h.shape)) * (0.1 + rng.uniform(size=rec_h.shape)))
    x_t = f64t(rec_l.data + np.sign(rng.normal(size=rec_l.shape)) * (0.1 + rng.uniform(size=rec_l.shape)))
    assert_close(check_grads(lambda: loss_rec(rec_h, rec_l, x_h, x_t), [rec_h, rec_l]))


@pytest.mark.parametrize("seed", SEEDS)
def test_identity_loss(seed):
    rng = np.random.default_rng(seed)
    logits = leaf(rng, (6, 4))
    labels = rng.integers(0, 4, size=6)
    assert_close(check_grads(lambda: loss_id(T.softmax(logits), labels), [logits]))


@pytest.mark.parametrize("seed", SEEDS)
def test_triplet(seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), 2)
    u_h, u_l = leaf(rng, (6, 5)), leaf(rng, (6, 5))
    lh, ll = rng.permutation(labels), rng.permutation(labels)
    assert_close(check_grads(lambda: loss_triplet(u_h, lh, u_l, ll, margin=2.0), [u_h, u_l]))


@pytest.mark.parametrize("seed", SEEDS)
def test_classification(seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), 2)
    logits, u = leaf(rng, (6, 3)), leaf(rng, (6, 4))
    half = np.arange(3) * 2

    def fn():
        l_id = loss_id(T.softmax(logits), labels)
        l_tri = loss_triplet(T.take(u, half), labels[half], T.take(u, half + 1), labels[half + 1], 2.0)
        return loss_cls(l_id, l_tri)

    # one sample per identity per stream has no positive: use the 2-per-class layout instead
    def fn_pk():
        return loss_cls(loss_id(T.softmax(logits), labels), loss_triplet(u, labels, u, labels, 2.0))

    with pytest.raises(ValueError, match="no positive"):
        fn()
    assert_close(check_grads(fn_pk, [logits, u]))


TINY = TrainConfig(image_size=(8, 4), channels=(3, 4), p=2, k=2, seed=0)


@pytest.fixture(scope="module")
def tiny_data():
    return make_toy_dataset(3, 2, hw=(8, 4), seed=5)


@pytest.mark.parametrize("seed", SEEDS)
def test_full_objective(seed, tiny_data):
    """Weighted sum of every main-step term, checked on a coordinate sample of every parameter."""
    trainer = Trainer(TrainConfig(**{**TINY.to_dict(), "seed": seed}), tiny_data.num_identities)
    params = as_f64_params(trainer.model)
    # a small to_rgb leaves HR residuals within a finite-difference step of the l1 kink
    to_rgb = trainer.model.crgan.decoder.to_rgb.parameters()["weight"]
    to_rgb.data = np.random.default_rng(seed).normal(0, 0.3, to_rgb.shape)
    batch = next_batch(tiny_data, 4, (2, 2), np.random.default_rng(seed), (2,))
    batch.hr, batch.lr, batch.lr_targets = (a.astype(np.float64) for a in (batch.hr, batch.lr, batch.lr_targets))
    main = [p for name, p in trainer.model.named_parameters() if "D_" not in name]
    assert len(main) < len(params)

    def total():
        out, parts = trainer._forward(batch)
        terms = trainer._main_terms(batch, out, parts, trainer_report())
        loss = terms[0][1]
        for w, t in terms[1:]:
            loss = T.add(loss, T.mul(t, w))
        return loss

    rng = np.random.default_rng(seed)
    assert_close(check_grads(total, main, NET_STEP, max_coords=6, rng=rng))


def trainer_report():
    from cadnet.trainer import StepReport

    return StepReport()
