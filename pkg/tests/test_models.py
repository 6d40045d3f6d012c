"""Architecture specs, bundles, and the checkpoint container."""

import numpy as np
import pytest

from cedg import Tensor
from cedg import models as M
from cedg.errors import ConfigError, DataError, ShapeError
from cedg.rng import stream


# -- layer counting and shapes ------------------------------------------------


def test_resnet20_has_19_convs_on_the_main_path():
    base, mid, re = M.resnet20_specs()
    assert base.conv_layer_count() + mid.conv_layer_count() == 19
    assert re.conv_layer_count() == 0


def test_spearnet_default_has_46_convs():
    base, mid, _ = M.spearnet_specs()
    assert base.conv_layer_count() + mid.conv_layer_count() == 46


def test_projection_shortcuts_exist_but_do_not_add_depth():
    _, mid, _ = M.resnet20_specs()
    shortcuts = sum(1 for l in mid.layers
                    if isinstance(l, M.BlockSpec) and l.shortcut is not None)
    assert shortcuts == 2  # one per downsampling group boundary


def test_forward_shapes_teacher():
    b = M.build_resnet20(seed=3)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 32, 32)).astype(np.float32))
    h = b.forward_base(x)
    assert h.data.shape == (2, 16, 32, 32)
    pooled = b.forward_mid_pooled(h)
    assert pooled.data.shape == (2, 64)
    scores = b.forward_re(pooled)
    assert scores.data.shape == (2, 10)
    assert b.pooled_len == 64
    assert b.unpooled_len == 64 * 8 * 8


def test_forward_shapes_student():
    b = M.build_spearnet(seed=3)
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 32, 32)).astype(np.float32))
    h = b.forward_base(x)
    unpooled = b.forward_mid_unpooled(h)
    pooled = b.forward_mid_pooled(h)
    assert unpooled.data.shape == (2, 1024)
    assert pooled.data.shape == (2, 64)
    assert b.unpooled_len == 1024


def test_spear_config_validation():
    with pytest.raises(ConfigError):
        M.SpearConfig(stage_blocks=(5, 5), stage_channels=(16, 32), bottleneck_widths=(8, 16))
    with pytest.raises(ConfigError):
        M.SpearConfig(stage_channels=(16, 32, 32))
    with pytest.raises(ConfigError):
        M.SpearConfig(stage_blocks=(5, 0, 4))
    with pytest.raises(ConfigError):
        M.SpearConfig(stage_blocks=(1, 2, 3), stage_channels=(8, 16, 64),
                      bottleneck_widths=(4, 8, 16, 32))


def test_validate_arch_rejects_mismatched_input():
    _, mid, _ = M.resnet20_specs()
    with pytest.raises(ShapeError):
        M.validate_arch(mid, (8, 32, 32))  # stem outputs 16 channels, not 8


# -- classifier variants --------------------------------------------------------


@pytest.mark.parametrize("variant", ["A1", "A2", "A3"])
def test_parallel_classifier_rows_are_distributions(variant):
    hc = M.build_classifier(variant=variant, seed=7)
    x = Tensor(np.random.default_rng(2).normal(size=(5, 1024)).astype(np.float32))
    p = hc.forward(x, train=False).data
    assert p.shape == (5, 4)
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-5)


def test_a4_classifier_runs_on_pooled_features():
    hc = M.build_classifier(variant="A4", seed=7)
    x = Tensor(np.random.default_rng(3).normal(size=(5, 64)).astype(np.float32))
    p = hc.forward(x, train=False).data
    assert p.shape == (5, 4)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-5)


def test_a4_cannot_be_enlarged():
    with pytest.raises(ConfigError):
        M.classifier_spec("A4", enlarged=True)


def test_unknown_variant_rejected():
    with pytest.raises(ConfigError):
        M.classifier_spec("A9")


def test_enlarged_spec_widens_groups():
    spec = M.classifier_spec("A1", enlarged=True, hidden=(128, 16))
    group = spec.layers[0].groups[0]
    assert [l.out_features for l in group] == [128, 16, 1]


def test_hc_feature_kind_discriminates_cuts():
    b = M.build_spearnet(seed=0)
    b.attach_hc(M.classifier_spec("A1"), seed=1)
    assert b.hc_feature_kind() == "unpooled"
    b.attach_hc(M.classifier_spec("A4"), seed=1)
    assert b.hc_feature_kind() == "pooled"


def test_forward_split_matches_manual_composition():
    b = M.build_spearnet(seed=5)
    b.attach_hc(M.classifier_spec("A1"), seed=6)
    x = Tensor(np.random.default_rng(4).normal(size=(3, 3, 32, 32)).astype(np.float32))
    manual = b.forward_re(b.forward_mid_pooled(b.forward_base(x)))
    split = M.forward_split(b, x, "re")
    np.testing.assert_array_equal(manual.data, split.data)
    manual_hc = b.forward_hc(b.forward_mid_unpooled(b.forward_base(x)))
    split_hc = M.forward_split(b, x, "hc")
    np.testing.assert_array_equal(manual_hc.data, split_hc.data)
    with pytest.raises(ConfigError):
        M.forward_split(b, x, "nowhere")


# -- stem sharing ---------------------------------------------------------------


def test_student_copies_and_freezes_teacher_stem():
    teacher = M.build_resnet20(seed=11)
    student = M.build_spearnet(seed=12, teacher=teacher)
    t_state = teacher.base.snapshot()
    s_state = student.base.snapshot()
    assert t_state.keys() == s_state.keys()
    for k in t_state:
        np.testing.assert_array_equal(t_state[k], s_state[k])
    assert all(not p.requires_grad for p in student.base.params())
    # a fresh student without a teacher starts from its own init
    fresh = M.build_spearnet(seed=12)
    assert any(not np.array_equal(fresh.base.snapshot()[k], t_state[k])
               for k in t_state)


def test_seeded_init_is_reproducible():
    a = M.build_spearnet(seed=42)
    b = M.build_spearnet(seed=42)
    for k, v in a.mid.state().items():
        np.testing.assert_array_equal(v, b.mid.state()[k])
    c = M.build_spearnet(seed=43)
    assert any(not np.array_equal(v, c.mid.state()[k])
               for k, v in a.mid.state().items())


# -- architecture JSON ----------------------------------------------------------


def test_arch_json_round_trip_all_layer_types():
    for spec in (*M.resnet20_specs(), *M.spearnet_specs(),
                 M.classifier_spec("A1"), M.classifier_spec("A4"),
                 M.classifier_spec("A2", enlarged=True)):
        assert M.ArchSpec.from_json(spec.to_json()) == spec


def test_arch_json_rejects_garbage():
    with pytest.raises(DataError):
        M.ArchSpec.from_json("{not json")
    with pytest.raises(DataError):
        M.ArchSpec.from_json('[{"layer":"warp-drive"}]')


def test_normalize_spec_kind_survives_round_trip():
    # NormalizeSpec has its own `kind` field, distinct from the type tag
    spec = M.ArchSpec((M.NormalizeSpec("l2"),))
    back = M.ArchSpec.from_json(spec.to_json())
    assert back.layers[0].kind == "l2"


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    b = M.build_spearnet(seed=21)
    b.attach_hc(M.classifier_spec("A1"), seed=22)
    p = tmp_path / "model.ckpt"
    M.save_bundle(p, b)
    back = M.load_bundle(p)
    for section in ("base", "mid", "re", "hc"):
        want = getattr(b, section).state()
        got = getattr(back, section).state()
        assert want.keys() == got.keys()
        for k in want:
            assert want[k].dtype == got[k].dtype == np.float32
            np.testing.assert_array_equal(want[k], got[k], err_msg=f"{section}/{k}")
    # and the file itself is stable: save(load(save(x))) == save(x)
    p2 = tmp_path / "again.ckpt"
    M.save_bundle(p2, back)
    assert p.read_bytes() == p2.read_bytes()


def test_checkpoint_without_hc(tmp_path):
    b = M.build_resnet20(seed=1)
    p = tmp_path / "teacher.ckpt"
    M.save_bundle(p, b)
    back = M.load_bundle(p)
    assert back.hc is None
    assert back.num_classes == 10
    assert M.arch_hash(back) == M.arch_hash(b)


def test_checkpoint_bad_magic_rejected(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(DataError):
        M.load_bundle(p)


def test_checkpoint_truncation_rejected(tmp_path):
    b = M.build_resnet20(seed=1)
    p = tmp_path / "full.ckpt"
    M.save_bundle(p, b)
    blob = p.read_bytes()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(DataError):
        M.load_bundle(cut)


def test_checkpoint_trailing_bytes_rejected(tmp_path):
    b = M.build_resnet20(seed=1)
    p = tmp_path / "full.ckpt"
    M.save_bundle(p, b)
    fat = tmp_path / "fat.ckpt"
    fat.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(DataError):
        M.load_bundle(fat)


def test_checkpoint_meta_hash_guards_architecture(tmp_path):
    b = M.build_resnet20(seed=1)
    p = tmp_path / "full.ckpt"
    M.save_bundle(p, b)
    blob = bytearray(p.read_bytes())
    # flip one byte inside the meta JSON region (magic 8 + version 4 + hash 32 + len 4)
    blob[50] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(DataError):
        M.load_bundle(bad)


def test_load_state_preserves_parameter_identity():
    b = M.build_spearnet(seed=2)
    before = b.mid.params()
    b.mid.load_state(b.mid.snapshot())
    after = b.mid.params()
    assert all(x is y for x, y in zip(before, after))


def test_sequential_init_consumes_one_stream():
    # two sequentials built from the same generator differ (it advances)
    rng = stream(0, "init")
    _, mid, _ = M.spearnet_specs()
    a = M.Sequential(mid, rng)
    b = M.Sequential(mid, rng)
    assert any(not np.array_equal(v, b.state()[k]) for k, v in a.state().items())
