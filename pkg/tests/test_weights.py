import struct

import numpy as np
import pytest

from rgbdscene.config import ModelConfig, Variant, reference_config, tiny_config
from rgbdscene.errors import (
    ConfigurationError,
    ContainerError,
    ShapeMismatchError,
    TruncatedFileError,
    UnexpectedTensorError,
    VersionError,
)
from rgbdscene.weights import expected_shapes, load, reference_init, save, validate_store

from container_mutations import rewrite_manifest, shape_edit, twenty_mutations


@pytest.fixture(scope="module")
def tiny_file(tmp_path_factory):
    cfg = tiny_config()
    path = tmp_path_factory.mktemp("w") / "tiny.emsf"
    save(path, cfg, reference_init(cfg, 0))
    return cfg, path


def test_roundtrip_bits(tiny_file, tmp_path):
    cfg, path = tiny_file
    cfg2, store = load(path)
    assert cfg2 == cfg
    save(tmp_path / "again.emsf", cfg2, store)
    assert (tmp_path / "again.emsf").read_bytes() == path.read_bytes()


def test_offsets_aligned(tiny_file):
    from container_mutations import split
    _, _, manifest, start = split(tiny_file[1].read_bytes())
    assert start % 64 == 0
    assert all(e["offset"] % 64 == 0 and e["offset"] >= start for e in manifest["tensors"])


def test_truncated(tiny_file, tmp_path):
    raw = tiny_file[1].read_bytes()
    for cut in (3, 15, len(raw) // 2, len(raw) - 1):
        p = tmp_path / f"t{cut}.emsf"
        p.write_bytes(raw[:cut])
        with pytest.raises(TruncatedFileError):
            load(p)


def test_97_channel_stem_names_tensor(tmp_path):
    cfg = reference_config(Variant.SWINV2_T_4CH)
    p = tmp_path / "ref.emsf"
    save(p, cfg, reference_init(cfg, 0))
    raw, _, name = shape_edit(p.read_bytes(), "encoder.embed.rgbd.weight")
    bad = tmp_path / "bad.emsf"
    bad.write_bytes(raw)
    with pytest.raises(ShapeMismatchError) as exc:
        load(bad)
    assert exc.value.tensor_name == "encoder.embed.rgbd.weight"
    assert "97" in str(exc.value)


def test_bad_version_and_magic(tiny_file, tmp_path):
    raw = bytearray(tiny_file[1].read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    (tmp_path / "v.emsf").write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load(tmp_path / "v.emsf")
    raw[:4] = b"NOPE"
    (tmp_path / "m.emsf").write_bytes(bytes(raw))
    with pytest.raises(ContainerError):
        load(tmp_path / "m.emsf")


def test_unexpected_tensor(tiny_file, tmp_path):
    def edit(m):
        e = dict(m["tensors"][0])
        e["name"] = "extra.weight"
        m["tensors"].append(e)
    (tmp_path / "u.emsf").write_bytes(rewrite_manifest(tiny_file[1].read_bytes(), edit))
    with pytest.raises(UnexpectedTensorError) as exc:
        load(tmp_path / "u.emsf")
    assert exc.value.tensor_name == "extra.weight"


def test_overlapping_offsets(tiny_file, tmp_path):
    def edit(m):
        m["tensors"][1]["offset"] = m["tensors"][0]["offset"]
    (tmp_path / "o.emsf").write_bytes(rewrite_manifest(tiny_file[1].read_bytes(), edit))
    with pytest.raises(ContainerError):
        load(tmp_path / "o.emsf")


def test_bad_config_in_manifest(tiny_file, tmp_path):
    def edit(m):
        m["config"]["encoder"]["stem_channels"] = 100
    (tmp_path / "c.emsf").write_bytes(rewrite_manifest(tiny_file[1].read_bytes(), edit))
    with pytest.raises(ConfigurationError):
        load(tmp_path / "c.emsf")


def test_twenty_mutations_rejected(tiny_file, tmp_path):
    raw = tiny_file[1].read_bytes()
    muts = twenty_mutations(raw)
    assert len(muts) == 20
    for i, (kind, what, data, err, name) in enumerate(muts):
        p = tmp_path / f"m{i}.emsf"
        p.write_bytes(data)
        with pytest.raises(err) as exc:
            load(p)
        if name is not None:
            assert exc.value.tensor_name == name, (kind, what)


def test_128_multi_shapes():
    s = expected_shapes(reference_config(Variant.SWINV2_T_128_MULTI))
    assert s["encoder.embed.rgb.weight"] == (96, 4, 4, 3)
    assert s["encoder.embed.depth.weight"] == (32, 4, 4, 1)
    assert s["encoder.stages.2.blocks.0.attn.qkv.weight"] == (1536, 512)


def test_rgb_only_has_no_depth():
    assert not any("depth" in k for k in expected_shapes(reference_config(Variant.RGB_ONLY)))


def test_seed_determinism(tmp_path):
    cfg = tiny_config()
    save(tmp_path / "a", cfg, reference_init(cfg, 0))
    save(tmp_path / "b", cfg, reference_init(cfg, 0))
    save(tmp_path / "c", cfg, reference_init(cfg, 1))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    a, c = reference_init(cfg, 0), reference_init(cfg, 1)
    assert not np.array_equal(a["encoder.embed.rgb.weight"], c["encoder.embed.rgb.weight"])


def test_reference_init_statistics():
    store = reference_init(tiny_config(), 0)
    w = store["encoder.stages.0.blocks.0.mlp.fc1.weight"]
    assert np.abs(w).max() <= 0.04 + 1e-7
    assert abs(float(w.std()) - 0.02 * 0.88) < 0.003  # truncated at 2 sigma
    assert not store["encoder.stages.0.blocks.0.mlp.fc1.bias"].any()
    assert np.all(store["encoder.embed.norm.weight"] == 1)
    assert np.allclose(store["encoder.stages.0.blocks.0.attn.logit_scale"], np.log(10))


def test_qkv_block_diagonal():
    store = reference_init(tiny_config(), 0)
    w = store["encoder.stages.1.blocks.0.attn.qkv.weight"]
    c = w.shape[1]
    for part in range(3):
        blk = w[part * c:(part + 1) * c]
        mask = (np.arange(c)[:, None] // 32) == (np.arange(c)[None, :] // 32)
        assert not blk[~mask].any()


@pytest.mark.parametrize("variant", list(Variant))
def test_reference_stores_validate(variant, tmp_path):
    cfg = reference_config(variant)
    store = reference_init(cfg, 0)
    validate_store(cfg, store)
    save(tmp_path / "w.emsf", cfg, store)
    cfg2, _ = load(tmp_path / "w.emsf")
    assert cfg2 == cfg


def test_store_is_read_only():
    store = reference_init(tiny_config(), 0)
    with pytest.raises(ValueError):
        store["scene_head.bias"][0] = 1.0


def test_config_dict_roundtrip():
    for v in Variant:
        cfg = reference_config(v, "emsanet", "segformer")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({"encoder": {}})
