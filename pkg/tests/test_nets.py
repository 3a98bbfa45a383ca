import numpy as np
import pytest
import torch
from torch import nn

from avsep.errors import ConfigError, ValidationError
from avsep.nets import (AppearanceNet, Checkpoint, Classifier, build_sound_net, embed_from_maps,
                        grad_check, load_numpy_state, state_to_numpy)


def test_appearance_shapes():
    torch.manual_seed(0)
    maps, e = AppearanceNet(16)(torch.rand(2, 3, 64, 64))
    assert maps.shape == (2, 16, 4, 4)
    assert e.shape == (2, 16)
    assert torch.all((e > 0) & (e < 1))


def test_large_preset_keeps_contract():
    maps, e = AppearanceNet(8, "large")(torch.rand(1, 3, 32, 48))
    assert maps.shape == (1, 8, 2, 3) and e.shape == (1, 8)


def test_appearance_rejects_bad_size():
    with pytest.raises(ConfigError):
        AppearanceNet(4)(torch.rand(1, 3, 60, 64))
    with pytest.raises(ConfigError):
        AppearanceNet(4, "huge")


def test_embedding_pool_then_sigmoid():
    maps = torch.zeros(3, 4, 4)
    assert torch.all(embed_from_maps(maps) == 0.5)
    maps = torch.randn(3, 4, 4)
    maps[1, 2, 3] = 7.0
    e = embed_from_maps(maps)
    assert e[1] == torch.sigmoid(torch.tensor(7.0))
    other = maps.clone()
    other[1, 0, 0] = -50.0
    assert embed_from_maps(other)[1] == e[1]


@pytest.mark.parametrize("arch", ["unet-small", "mv2-small"])
def test_sound_net_contract(arch):
    torch.manual_seed(0)
    net = build_sound_net(arch, 6)
    with torch.no_grad():
        out = net(torch.zeros(1, 1, 256, 256))
    assert out.shape == (1, 6, 256, 256)
    assert torch.isfinite(out).all()


def test_unknown_sound_arch():
    with pytest.raises(ConfigError):
        build_sound_net("resnet", 4)


def test_forward_determinism():
    outs = []
    for _ in range(2):
        torch.manual_seed(11)
        net = build_sound_net("unet-small", 4)
        with torch.no_grad():
            outs.append(net(torch.ones(1, 1, 256, 256)).numpy())
    assert np.array_equal(outs[0], outs[1])


def test_classifier_outputs_probabilities():
    torch.manual_seed(0)
    clf = Classifier(5)
    p = clf(torch.rand(3, 3, 64, 64))
    assert p.shape == (3, 5)
    assert torch.all(p >= 0)
    assert torch.allclose(p.sum(-1), torch.ones(3), atol=1e-6)
    nn.init.zeros_(clf.encoder.proj.weight)
    nn.init.zeros_(clf.encoder.proj.bias)
    assert torch.allclose(clf(torch.rand(2, 3, 64, 64)), torch.full((2, 5), 0.2))


def test_grad_check_linear_layer():
    torch.manual_seed(0)
    w = torch.randn(4, 3)
    b = torch.randn(4)
    err = grad_check(lambda x, w, b: x @ w.T + b, [torch.randn(5, 3), w, b])
    assert err < 1e-6


def test_grad_check_flags_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x

    assert grad_check(Bad.apply, [torch.randn(6)]) > 0.1


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    torch.manual_seed(0)
    net = AppearanceNet(4)
    ckpt = Checkpoint({"a": [1, 2], "b": "x"}, state_to_numpy(net), epoch=3,
                      rng_state={"numpy": {"state": 2 ** 100}}, extra={"val": 1.5})
    p1 = ckpt.save(tmp_path / "a.ckpt")
    back = Checkpoint.load(p1)
    p2 = back.save(tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()
    assert back.epoch == 3 and back.rng_state["numpy"]["state"] == 2 ** 100
    other = AppearanceNet(4)
    load_numpy_state(other, back.tensors)
    x = torch.rand(1, 3, 32, 32)
    assert torch.equal(net(x)[0], other(x)[0])


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        Checkpoint.load(tmp_path / "nope.ckpt")
    (tmp_path / "junk").write_bytes(b"garbage!" * 4)
    with pytest.raises(ValidationError):
        Checkpoint.load(tmp_path / "junk")
