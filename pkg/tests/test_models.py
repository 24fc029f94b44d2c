import numpy as np
import pytest

from cprl import autodiff as ad
from cprl.autodiff import ShapeError, Tensor
from cprl.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from cprl.layer import CprlConfig, Phase
from cprl.models import QualityNet

from conftest import central_difference, rel_error


def small_net(cprl=True, seed=0, K=4, **cfg):
    return QualityNet(in_channels=1, cfg=CprlConfig(channels=K, **cfg), cprl=cprl, seed=seed, widths=(2, 3))


def images(rng, n=2, size=6):
    return rng.uniform(0, 1, (n, 1, size, size))


def test_zero_head_scores_half(rng):
    net = small_net()
    net.params["head.weight"].data[:] = 0.0
    np.testing.assert_array_equal(net.predict(images(rng, 3)), [0.5, 0.5, 0.5])


def test_mask_ones_matches_baseline(rng):
    a = small_net(cprl=True, seed=3)
    b = small_net(cprl=False, seed=3)
    a.mask_override = "ones"
    x = images(rng, 4)
    np.testing.assert_array_equal(a.predict(x), b.predict(x))


def test_mask_zeros_gives_bias_only_score(rng):
    net = small_net()
    net.mask_override = "zeros"
    net.params["head.bias"].data[:] = 0.7
    np.testing.assert_allclose(net.predict(images(rng, 2)), 1 / (1 + np.exp(-0.7)), atol=1e-15)


def test_forward_matches_manual_pipeline(rng):
    net = small_net(tau=0.5, bias=0.3)
    x = images(rng, 2)
    p = {k: v.data for k, v in net.params.items()}

    def conv(h, w, b):
        # direct zero-padded correlation
        n, c, H, W = h.shape
        hp = np.pad(h, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out = np.zeros((n, w.shape[0], H, W))
        for o in range(w.shape[0]):
            for i in range(H):
                for j in range(W):
                    out[:, o, i, j] = np.sum(hp[:, :, i:i + 3, j:j + 3] * w[o], axis=(1, 2, 3)) + b[o]
        return out

    h = np.maximum(conv(x - 0.5, p["conv1.weight"], p["conv1.bias"]), 0)
    h = np.maximum(conv(h, p["conv2.weight"], p["conv2.bias"]), 0)
    h = np.maximum(conv(h, p["conv3.weight"], p["conv3.bias"]), 0)
    f = h.mean(axis=(2, 3))
    K = f.shape[1]
    r = np.array([[sum(1 / (1 + np.exp(-(row[k] - row[j]) / 0.5)) for j in range(K)) for k in range(K)] for row in f])
    M = 1 / (1 + np.exp(-(r - K / 2 + 0.3 * K)))
    logit = (f * M) @ p["head.weight"] + p["head.bias"]
    expected = 1 / (1 + np.exp(-logit[:, 0]))
    np.testing.assert_allclose(net.predict(x), expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_full_forward_gradient_wrt_input(seed):
    rng = np.random.default_rng(seed)
    net = small_net(seed=seed, tau=0.5)
    x = images(rng, 2, 5)
    w = np.array([0.7, -1.3])

    def loss(a):
        return float(np.sum(net(Tensor(a)).data * w))

    numeric = central_difference(loss, [x])[0]
    t = Tensor(x, requires_grad=True)
    with net.frozen():
        ad.sum_(net(t) * Tensor(w)).backward()
    assert rel_error(numeric, t.grad) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_full_forward_gradient_wrt_parameters(seed):
    rng = np.random.default_rng(seed)
    net = small_net(seed=seed, tau=0.5)
    for p in net.backbone_parameters():
        p.data = p.data + rng.uniform(-0.1, 0.1, p.shape)  # nonzero biases
    x = images(rng, 2, 5)
    y = rng.uniform(size=2)
    ad.mse(net(Tensor(x)), y).backward()
    for name in ("conv1.weight", "conv3.bias", "head.weight", "head.bias"):
        param = net.params[name]

        def loss(a):
            saved = param.data
            param.data = a
            with ad.no_grad():
                out = float(ad.mse(net(Tensor(x)), y).data)
            param.data = saved
            return out

        numeric = central_difference(loss, [param.data.copy()])[0]
        assert rel_error(numeric, param.grad) < 1e-4, name


def test_predict_intervened_matches_oracle(rng):
    net = small_net(tau=0.5)
    x = images(rng, 3)
    with ad.no_grad():
        f = net.features(Tensor(x)).data
        M = net.mask(Tensor(f)).data
    W, b = net.params["head.weight"].data, net.params["head.bias"].data
    head = lambda z: 1 / (1 + np.exp(-(z @ W + b)[:, 0]))
    h = net.heads
    c = (f @ h.phi_weight.data.T + h.phi_bias.data) * (1 - M) + f * M
    s = (f @ h.xi_weight.data.T + h.xi_bias.data) * M + f * M
    with ad.no_grad():
        y, y_c = net.predict_intervened(x, Phase.SF)
        _, y_s = net.predict_intervened(x, "NC")
    np.testing.assert_allclose(y.data, head(f * M), atol=1e-12)
    np.testing.assert_allclose(y_c.data, head(c), atol=1e-12)
    np.testing.assert_allclose(y_s.data, head(s), atol=1e-12)


def test_predict_intervened_rejects_baseline_and_none(rng):
    with pytest.raises(ValueError):
        small_net(cprl=False).predict_intervened(images(rng), Phase.SF)
    with pytest.raises(ValueError):
        small_net().predict_intervened(images(rng), Phase.NONE)


def test_parameter_counts():
    net = QualityNet()
    backbone = sum(p.size for p in net.backbone_parameters())
    # conv 1->8, 8->16, 16->32 with biases plus a 32->1 head
    assert backbone == (8 * 9 + 8) + (16 * 8 * 9 + 16) + (32 * 16 * 9 + 32) + (32 + 1)
    assert sum(p.size for p in net.phi_parameters()) == 32 * 32 + 32
    assert sum(p.size for p in net.xi_parameters()) == 32 * 32 + 32
    assert QualityNet(cprl=False).phi_parameters() == []


def test_backbone_init_shared_across_variants():
    a = QualityNet(cprl=True, seed=5).state_dict()
    b = QualityNet(cprl=False, seed=5).state_dict()
    for k in b:
        np.testing.assert_array_equal(a[k], b[k])


def test_predict_batching_is_consistent(rng):
    net = small_net()
    x = images(rng, 7)
    np.testing.assert_allclose(net.predict(x, batch_size=2), net.predict(x, batch_size=7), atol=1e-15)


def test_input_shape_checked():
    with pytest.raises(ShapeError):
        small_net()(Tensor(np.zeros((2, 3, 5, 5))))


def test_architecture_string():
    assert "cprl(K=4" in small_net().architecture
    assert "gate=none" in small_net(cprl=False).architecture


def test_checkpoint_round_trip(tmp_path, rng):
    net = small_net(seed=1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, net.state_dict())
    other = small_net(seed=2)
    other.load_state_dict(load_checkpoint(path))
    x = images(rng, 3)
    np.testing.assert_array_equal(other.predict(x), net.predict(x))
    assert path.read_bytes()[:8] == b"CPRLCKPT"


def test_checkpoint_mismatch_raises(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, small_net(cprl=False).state_dict())
    with pytest.raises(CheckpointError):
        small_net(cprl=True).load_state_dict(load_checkpoint(path))
    save_checkpoint(path, small_net(K=5).state_dict())
    with pytest.raises(CheckpointError):
        small_net(K=4).load_state_dict(load_checkpoint(path))


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, {"w": np.ones(3)})
    good.write_bytes(good.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(good)
