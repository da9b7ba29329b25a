import os

import numpy as np
import pytest

from bipose import model as M
from bipose.autograd import Tensor
from bipose.errors import ConfigurationError, CorruptionError, FormatError, InvalidInputError
from bipose.layers import Conv2d, Linear, set_packed_inference, trace_convs

SMALL = dict(stem_channels=8, width=4, planes=4)


def small(**kw):
    return M.desk_config(**{**SMALL, **kw})


def test_output_shape_and_determinism(rng):
    net = M.build(small()).eval()
    x = rng.standard_normal((2, 1, 64, 64)).astype(np.float32)
    y1 = net(Tensor(x)).data
    assert y1.shape == (2, 5, 16, 16)
    assert np.all(np.isfinite(y1))
    np.testing.assert_array_equal(y1, net(Tensor(x)).data)


def test_teacher_and_student_shapes_match(rng):
    x = Tensor(rng.standard_normal((1, 1, 64, 64)).astype(np.float32))
    s = M.build(small())
    t = M.build(M.teacher_config(small()))
    assert s(x).shape == t(x).shape


def test_indivisible_input_rejected():
    net = M.build(small())
    with pytest.raises(InvalidInputError):
        net(Tensor(np.zeros((1, 1, 48, 40), np.float32)))
    with pytest.raises(InvalidInputError):
        net(Tensor(np.zeros((1, 3, 64, 64), np.float32)))


def test_paper_config_heatmap_shape():
    cfg = M.paper_config()
    assert cfg.heatmap_size == (64, 48)
    assert (cfg.joints, cfg.width) == (17, 32)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        M.NetworkConfig(stages=((4,), (0, 4, 1)))
    with pytest.raises(ConfigurationError):
        M.NetworkConfig(width=6)
    with pytest.raises(ConfigurationError):
        M.NetworkConfig(input_size=(48, 64))
    with pytest.raises(ConfigurationError):
        M.NetworkConfig(block="dense")


def test_config_dict_roundtrip_and_fingerprint():
    cfg = small(binarize=False)
    again = M.NetworkConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert again.fingerprint() == cfg.fingerprint()
    assert small().fingerprint() != cfg.fingerprint()
    with pytest.raises(ConfigurationError):
        M.NetworkConfig.from_dict({"bogus": 1})


def test_pruned_stage_structure():
    net = M.build(small())
    for n, stage in enumerate(net.stages, start=1):
        for hm in stage:
            counts = [len(br.layers) for br in hm.branches]
            assert counts == list(M.PRUNED[n])


def test_key_layers_are_real():
    groups = M.key_layers(M.build(small()))
    for role in ("stem", "transition", "fusion", "head"):
        assert groups[role], role
        assert all(mode == "real" for _, mode in groups[role]), role
    assert any(mode == "binary" for _, mode in groups["blocks"])


def test_pyramid_widths():
    cfg = small()
    assert cfg.branch_widths() == [4, 8, 16, 32]


def test_unpruned_has_more_params():
    p = M.count_params_and_ops(M.build(small())).params
    u = M.count_params_and_ops(M.build(small(stages=M.UNPRUNED))).params
    assert u > p


def test_width_doubling_quadruples_params_roughly():
    a = M.count_params_and_ops(M.build(M.desk_config())).params
    b = M.count_params_and_ops(M.build(M.desk_config().scaled(2.0))).params
    assert 3.3 < b / a < 4.2


def test_cost_report_single_conv_arithmetic():
    from bipose.kernels import ConvSpec, count_ops

    assert count_ops(ConvSpec(1, 1, 3), 4, 4).flops == 144


def test_cost_report_fields():
    net = M.build(small())
    rep = M.count_params_and_ops(net)
    assert rep.ops.ops == rep.ops.flops + rep.ops.bops / 64
    assert rep.real_params + rep.binary_params == rep.params
    assert rep.storage_bytes == rep.binary_params / 8 + rep.real_params * 4


def test_save_load_roundtrip(tmp_path, rng):
    net = M.build(small()).eval()
    x = rng.standard_normal((3, 1, 64, 64)).astype(np.float32)
    path = tmp_path / "m.bihr"
    M.save(net, path, {"epoch": 3})
    loaded, state = M.load_checkpoint(path)
    assert state == {"epoch": 3}
    assert loaded.config == net.config
    np.testing.assert_array_equal(loaded.predict(x), net.predict(x))


def test_loaded_model_keeps_packed_path_identical(tmp_path, rng):
    net = M.build(small()).eval()
    M.save(net, tmp_path / "m.bihr")
    loaded = set_packed_inference(M.load(tmp_path / "m.bihr"), True)
    x = rng.standard_normal((2, 1, 64, 64)).astype(np.float32)
    np.testing.assert_array_equal(loaded.predict(x), net.predict(x))


def test_corrupt_header_is_format_error(tmp_path):
    data, _ = M.encode_model(M.build(small()))
    bad = b"XIHR" + data[4:]
    with pytest.raises(FormatError):
        M.decode_model(bad)
    bad_version = data[:4] + b"\x09\x00" + data[6:]
    with pytest.raises(FormatError):
        M.decode_model(bad_version)


def test_truncation_and_bitflip_are_corruption(tmp_path):
    data, _ = M.encode_model(M.build(small()))
    with pytest.raises(CorruptionError):
        M.decode_model(data[: len(data) // 2])
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x40
    with pytest.raises(CorruptionError):
        M.decode_model(bytes(flipped))


def test_failed_save_leaves_no_file(tmp_path, monkeypatch):
    path = tmp_path / "m.bihr"

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        M.save(M.build(small()), path)
    assert list(tmp_path.iterdir()) == []


def test_binary_records_are_packed():
    net = M.build(small())
    _, sizes = M.encode_model(net)
    for name, m in net.named_modules():
        if isinstance(m, Conv2d) and m.binary:
            n = m.weight.data.size
            assert sizes[f"{name}.weight"] <= n / 8 + 4 * m.spec.c_out + 64
