import numpy as np
import pytest
import torch

from steerfix.engine import (
    Batch,
    Executor,
    TrainMetrics,
    class_balance_weights,
    dice_score,
    evaluate,
    focal_multilabel_bce,
    pixelwise_bce,
    predict,
    rescaled_sigmoid,
    train,
)
from steerfix.errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    DomainError,
    EngineError,
)
from steerfix.model import GraphBuilder
from steerfix.netgraph import LayerKind, apply_initializer, fixed_snapshot, initializer_specs


def _every_kind_net():
    b = GraphBuilder(seed=3)
    x = b.input(2)
    c1 = b.conv2d(x, 'c1', 4)
    bn = b.batch_norm(c1, 'bn')
    a1 = b.activation(bn, 'a1', 'celu')
    dw = b.conv2d(a1, 'dw', 4, groups=4)
    a2 = b.activation(dw, 'a2', 'sigmoid')
    pw = b.pointwise(a2, 'pw', 4, bias=True)
    s = b.add([a1, pw], 'add')
    up = b.upsample(s, 'up')
    c2 = b.conv2d(up, 'c2', 4, stride=2)
    fused = b.scalar_fusion([s, c2], 'fuse')
    cat = b.concat([fused, a1], 'cat')
    r = b.activation(cat, 'relu', 'relu')
    g = b.global_avg_pool(r, 'gap')
    out = b.linear(g, 'fc', 3)
    return b.build([out], task='multilabel')


class _NanSource:
    task = 'multilabel'

    def __len__(self):
        return 2

    def batches(self, batch_size, rng=None):
        yield Batch(np.full((2, 1, 8, 8), np.nan), np.ones((2, 5)))

    def class_counts(self):
        return None


FD_SAMPLES = 64


def _finite_difference_mismatches(net, executor, loss_value, rng, eps=1e-6):
    tape = executor.backward(loss_value())
    checked, bad = {}, []
    for p in net.params:
        if p.buffer:
            continue
        tensor = executor.tensors[p.key]
        count = min(FD_SAMPLES, tensor.numel())
        for index in rng.choice(tensor.numel(), size=count, replace=False):
            index = int(index)
            with torch.no_grad():
                flat = tensor.view(-1)
                flat[index] += eps
                plus = float(loss_value())
                flat[index] -= 2 * eps
                minus = float(loss_value())
                flat[index] += eps
            numeric = (plus - minus) / (2 * eps)
            analytic = tape[p.key].reshape(-1)[index]
            if abs(numeric - analytic) > 1e-6 + 1e-4 * abs(analytic):
                bad.append((p.key, index, numeric, analytic))
        kind = net.node(p.owner).kind
        checked[kind] = checked.get(kind, 0) + count
    return checked, bad


def test_gradients_match_finite_differences():
    net = _every_kind_net()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 2, 6, 6))
    targets = torch.tensor(rng.uniform(size=(2, 3)))
    executor = Executor(net, dtype=torch.float64)
    checked, bad = _finite_difference_mismatches(
        net, executor, lambda: focal_multilabel_bce(executor(x), targets), rng
    )
    assert not bad
    assert set(checked) == {
        LayerKind.CONV2D,
        LayerKind.BATCH_NORM,
        LayerKind.POINTWISE_CONV,
        LayerKind.SCALAR_FUSION,
        LayerKind.LINEAR,
    }
    assert checked[LayerKind.CONV2D] >= FD_SAMPLES and checked[LayerKind.LINEAR] >= 24


def test_segmentation_gradients_match_finite_differences():
    b = GraphBuilder(seed=4)
    x = b.conv2d(b.input(1), 'c1', 3)
    x = b.activation(b.batch_norm(x, 'bn'), 'act', 'celu')
    up = b.upsample(b.conv2d(x, 'down', 3, stride=2), 'up')
    fused = b.scalar_fusion([x, up], 'fuse')
    net = b.build([b.pointwise(fused, 'head', 1, bias=True)], task='segmentation')
    rng = np.random.default_rng(1)
    images = rng.normal(size=(2, 1, 6, 6))
    masks = torch.tensor((rng.uniform(size=(2, 1, 6, 6)) > 0.5).astype(np.float64))
    executor = Executor(net, dtype=torch.float64)
    checked, bad = _finite_difference_mismatches(
        net, executor, lambda: pixelwise_bce(torch.sigmoid(executor(images)), masks), rng
    )
    assert not bad
    assert set(checked) == {
        LayerKind.CONV2D,
        LayerKind.BATCH_NORM,
        LayerKind.SCALAR_FUSION,
        LayerKind.POINTWISE_CONV,
    }
    assert checked[LayerKind.CONV2D] >= FD_SAMPLES


def test_loss_gradients_match_autograd_check():
    torch.manual_seed(0)
    logits = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
    targets = torch.rand(4, 5, dtype=torch.float64)
    counts = np.array([[3.0, 1.0, 2.0, 5.0, 4.0], [1.0, 3.0, 2.0, 1.0, 4.0]])
    assert torch.autograd.gradcheck(
        lambda z: focal_multilabel_bce(z, targets, class_counts=counts), (logits,)
    )
    assert torch.autograd.gradcheck(
        lambda z: pixelwise_bce(torch.sigmoid(z), targets), (logits,)
    )


def test_convolution_is_homogeneous_in_the_filter():
    rng = np.random.default_rng(1)
    kernels = rng.normal(size=(100, 1, 3, 3))
    norms = np.linalg.norm(kernels.reshape(100, -1), axis=1)
    b = GraphBuilder()
    net = b.build([b.conv2d(b.input(1), 'conv', 100)])
    weight = net.param('conv', 'weight')
    images = rng.normal(size=(4, 1, 12, 12))
    direct = predict(net.with_params([weight.replace(tensor=kernels)]), images)
    unit = kernels / norms[:, None, None, None]
    scaled = norms[None, :, None, None] * predict(
        net.with_params([weight.replace(tensor=unit)]), images
    )
    peak = np.abs(direct).max(axis=(0, 2, 3))
    assert np.all(np.abs(direct - scaled).max(axis=(0, 2, 3)) <= 1e-5 * peak)


def test_forward_errors(tiny_resnet):
    executor = Executor(tiny_resnet)
    with pytest.raises(EngineError):
        executor(np.zeros((1, 3, 8, 8)))
    with pytest.raises(EngineError):
        executor.backward(torch.tensor(0.0))
    loss = executor(np.zeros((1, 1, 8, 8))).sum()
    executor.reset()
    with pytest.raises(EngineError):
        executor.backward(loss)
    with pytest.raises(DimensionError):
        Batch(np.zeros((1, 8, 8)))
    with pytest.raises(DomainError):
        Batch(np.zeros((1, 1, 8, 8)), np.full((1, 5), 2.0))


def test_fixed_parameters_get_gradients_when_tracked(tiny_resnet):
    net = apply_initializer(tiny_resnet, initializer_specs(tiny_resnet, 'ones'))
    executor = Executor(net, track_fixed=True)
    tape = executor.backward(executor(np.ones((1, 1, 8, 8))).sum())
    assert ('stem.conv', 'weight') in tape
    assert ('stem.bn', 'running_mean') not in tape
    untracked = Executor(net, track_fixed=False)
    assert not untracked.tensors[('stem.conv', 'weight')].requires_grad


def test_class_balance_weights():
    a_pos, a_neg, w_task = class_balance_weights(np.array([[1.0, 3.0], [3.0, 1.0]]))
    assert np.allclose(a_pos, [0.75, 0.25])
    assert np.allclose(a_neg, [0.25, 0.75])
    assert np.allclose(w_task, [0.5, 0.5])
    with pytest.raises(DomainError):
        class_balance_weights(np.array([[0.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(DimensionError):
        class_balance_weights(np.ones(3))


def test_focal_loss_reduces_to_bce():
    logits = torch.tensor([[0.3, -1.2], [2.0, 0.1]], dtype=torch.float64)
    targets = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    p = rescaled_sigmoid(logits)
    expected = -(targets * torch.log(p) + (1 - targets) * torch.log(1 - p)).sum(dim=1).mean()
    loss = focal_multilabel_bce(logits, targets, gamma=0.0, balance=False)
    assert float(loss) == pytest.approx(float(expected))
    assert float(focal_multilabel_bce(logits, targets, mask=torch.zeros(2, 2))) == 0.0


def test_focal_loss_downweights_confident_predictions():
    targets = torch.ones(1, 1, dtype=torch.float64)
    confident = torch.tensor([[4.0]], dtype=torch.float64)
    plain = focal_multilabel_bce(confident, targets, gamma=0.0)
    focal = focal_multilabel_bce(confident, targets, gamma=1.0)
    assert float(focal) < float(plain)


def test_dice_score():
    mask = np.zeros((1, 1, 4, 4))
    assert dice_score(mask, mask) == 1.0
    mask[..., :2] = 1
    assert dice_score(mask, mask) == 1.0
    assert dice_score(mask, 1 - mask) == 0.0


def test_train_keeps_fixed_filters(tiny_resnet, blobs):
    net = apply_initializer(tiny_resnet, initializer_specs(tiny_resnet, 'ghaar', seed=1))
    trained, metrics = train(net, blobs, lr=1e-2, epochs=2, batch_size=4, progress=False)
    assert fixed_snapshot(trained) == fixed_snapshot(net)
    assert trained.param('head.fc', 'weight') != net.param('head.fc', 'weight')
    assert len(metrics.epochs) == 2
    assert all(np.isfinite(e.loss) and 0.0 <= e.metric <= 1.0 for e in metrics.epochs)


def test_zero_learning_rate_is_a_null_update(tiny_resnet, blobs):
    trained, _ = train(tiny_resnet, blobs, lr=0.0, epochs=1, progress=False)
    for p in tiny_resnet.params:
        if not p.buffer:
            assert trained.param(*p.key) == p


def test_train_rejects_bad_settings(tiny_resnet, blobs):
    with pytest.raises(ConfigError):
        train(tiny_resnet, blobs, lr=-1e-3, progress=False)
    with pytest.raises(ConfigError):
        train(tiny_resnet, blobs, batch_size=0, progress=False)


def test_train_reports_divergence(tiny_resnet):
    with pytest.raises(DivergenceError):
        train(tiny_resnet, _NanSource(), lr=1e-3, progress=False)


def test_evaluate_and_metrics_csv(tmp_path, tiny_resnet, blobs):
    result = evaluate(tiny_resnet, blobs, batch_size=5)
    assert 0.0 <= result.metric <= 1.0 and np.isfinite(result.loss)
    _, metrics = train(tiny_resnet, blobs, epochs=1, progress=False)
    metrics.to_csv(tmp_path / 'metrics.csv')
    lines = (tmp_path / 'metrics.csv').read_text().splitlines()
    assert lines[0] == 'epoch,loss,metric,seconds' and len(lines) == 2
    assert TrainMetrics().seconds_per_epoch == 0.0


def test_predict_is_deterministic(tiny_resnet):
    x = np.random.default_rng(1).normal(size=(2, 1, 8, 8)).astype(np.float32)
    assert np.array_equal(predict(tiny_resnet, x), predict(tiny_resnet, x))
