import struct

import numpy as np
import pytest

from fedeu import cfe, model
from fedeu import tensor as T
from fedeu.errors import ConfigError, FormatError, NumericError, ShapeError
from fedeu.model import Group, NetworkConfig


@pytest.fixture
def net():
    cfg = NetworkConfig()
    return cfg, model.build_network(cfg, seed=0)


def test_build_is_deterministic(net):
    cfg, params = net
    again = model.build_network(cfg, seed=0)
    assert params.equal(again)
    assert not params.equal(model.build_network(cfg, seed=1), Group.FROZEN)


def test_parameter_count_closed_form():
    for cfg in (NetworkConfig(), NetworkConfig(in_channels=3, widths=(8, 12), adapter_bottleneck=3,
                                               cfe_stage=1, num_clients=5, num_classes=4)):
        params = model.build_network(cfg, 0)
        assert params.count() == model.expected_parameter_count(cfg)


def test_default_count_by_hand():
    # enc 160+4640+18496, adapters 3*8*... counted layer by layer
    enc = (16 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64)
    adapters = sum(8 * w + 8 + w * 8 + w for w in (16, 32, 64))
    cfe_p = (3 * 64 + 64) + 3 * (64 * 64 + 64)
    dec = (32 * 96 * 9 + 32) + (16 * 48 * 9 + 16) + (16 * 17 * 9 + 16)
    heads = 2 * (2 * 16 + 2)
    assert model.expected_parameter_count(NetworkConfig()) == enc + adapters + cfe_p + dec + heads


def test_groups_partition(net):
    _, params = net
    seen = set()
    for g in Group:
        names = set(params.names(g))
        assert not names & seen
        seen |= names
    assert seen == set(params)
    assert not params.names(Group.PSI)
    with pytest.raises(TypeError):
        params.groups["enc1.weight"] = Group.ADAPTER


def test_trainable_subsets(net):
    _, params = net
    seg = set(model.trainable_subset(params, "seg"))
    eu = set(model.trainable_subset(params, "eu"))
    assert not seg & set(params.names(Group.EU_HEAD))
    assert not eu & set(params.names(Group.SEG_HEAD))
    assert not (seg | eu) & set(params.names(Group.FROZEN))
    excluded = set(params.names(Group.FROZEN, Group.EU_HEAD, Group.SEG_HEAD))
    assert seg | eu | excluded == set(params)
    with pytest.raises(ValueError):
        model.trainable_subset(params, "both")


def test_adapter_is_identity_at_init(net):
    _, params = net
    x = T.Tensor(np.random.default_rng(0).normal(size=(2, 16, 8, 8)).astype(np.float32))
    out = model._adapter({n: T.Tensor(a) for n, a in params.arrays.items()}, 1, x)
    np.testing.assert_array_equal(out.data, x.data)


def test_forward_shapes_and_evidence(net):
    cfg, params = net
    batch = np.random.default_rng(0).random((3, 1, 32, 32)).astype(np.float32)
    out = model.forward(params, batch, cfe.one_hot(1, 3))
    assert out.seg_logits.shape == (3, 2, 32, 32)
    assert out.evidence.shape == (3, 2, 32, 32)
    assert np.all(out.evidence.data >= 0)
    again = model.forward(params, batch, cfe.one_hot(1, 3))
    np.testing.assert_array_equal(out.seg_logits.data, again.seg_logits.data)


def test_zero_attention_equals_cfe_free_network(net):
    cfg, params = net
    zeroed = params.with_values({cfe.GATE_DESC + ".weight": np.zeros((64, 64)),
                                 cfe.GATE_DESC + ".bias": np.zeros(64)})
    batch = np.random.default_rng(0).random((2, 1, 32, 32)).astype(np.float32)
    with_cfe = model.forward(zeroed, batch, cfe.one_hot(0, 3))
    without = model.forward(zeroed, batch, cfe.one_hot(0, 3), use_cfe=False)
    np.testing.assert_array_equal(with_cfe.seg_logits.data, without.seg_logits.data)
    np.testing.assert_array_equal(with_cfe.evidence.data, without.evidence.data)


def test_forward_validation(net):
    _, params = net
    with pytest.raises(ShapeError):
        model.forward(params, np.zeros((1, 1, 16, 16)), cfe.one_hot(0, 3))
    with pytest.raises(ShapeError):
        model.forward(params, np.zeros((1, 1, 32, 32)), cfe.one_hot(0, 2))


def test_forward_names_failing_layer(net):
    _, params = net
    bad = params.with_values({"dec1.weight": np.full_like(params["dec1.weight"], 3e38)})
    with pytest.raises(NumericError, match="layer 'dec"):
        model.forward(bad, np.ones((1, 1, 32, 32)), cfe.one_hot(0, 3))


def test_trainable_leaves(net):
    _, params = net
    names = model.trainable_subset(params, "seg")
    out = model.forward(params, np.ones((1, 1, 32, 32)), cfe.one_hot(0, 3), trainable=names)
    assert set(out.leaves) == set(names)


@pytest.mark.parametrize("bad", [
    dict(num_classes=1), dict(widths=()), dict(image_size=(30, 32)), dict(cfe_stage=4),
    dict(evidence_activation="gelu"), dict(adapter_bottleneck=0),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        NetworkConfig(**bad)


def test_checkpoint_round_trip(tmp_path, net):
    cfg, params = net
    psi = cfe.init_psi(params.subset(Group.CFE))
    psi[cfe.EMBED1 + ".weight"][0, 0] = 0.25
    path = tmp_path / "m.ps"
    model.save_parameters(path, params, psi)
    loaded, psi2 = model.load_parameters(path, cfg)
    assert loaded.equal(params)
    assert dict(loaded.groups) == dict(params.groups)
    assert psi2.keys() == psi.keys()
    assert all(np.array_equal(psi[n], psi2[n]) for n in psi)


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "x.ps"
    model.write_checkpoint(path, [("w", Group.ADAPTER, np.array([[1.5, -2.0]], np.float32))])
    raw = path.read_bytes()
    expected = (b"FEDEU-PS" + struct.pack("<H", 1) + struct.pack("<H", 1) + b"w"
                + struct.pack("<BB", 1, 2) + struct.pack("<2I", 1, 2) + struct.pack("<2f", 1.5, -2.0))
    assert raw == expected


def test_checkpoint_errors(tmp_path, net):
    _, params = net
    path = tmp_path / "m.ps"
    model.save_parameters(path, params)
    raw = path.read_bytes()
    bad = tmp_path / "bad.ps"
    bad.write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(FormatError, match="offset 0"):
        model.read_checkpoint(bad)
    bad.write_bytes(raw[:8] + struct.pack("<H", 9) + raw[10:])
    with pytest.raises(FormatError, match="offset 8"):
        model.read_checkpoint(bad)
    bad.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated") as err:
        model.read_checkpoint(bad)
    assert err.value.offset is not None and err.value.offset < len(raw)
    model.write_checkpoint(bad, [("w", Group.ADAPTER, np.ones(1, np.float32))])
    data = bytearray(bad.read_bytes())
    data[13] = 77  # group tag byte
    bad.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="offset 13"):
        model.read_checkpoint(bad)
