import ast
import json
from pathlib import Path

import numpy as np

import rgbdscene.oracle
from rgbdscene import harness, oracle
from rgbdscene.encoder import AttentionWeights, cosine_window_attention
from rgbdscene.harness import PROPERTIES, property_driver, random_attention_weights


def test_window_roundtrip_100_seeds(tmp_path):
    r = property_driver(range(100), ["window roundtrip"], tmp_path)
    assert r.ok and r.runs == 100 and r.passed == 100


def test_report_counts(tmp_path):
    ids = ["window roundtrip", "softmax rows", "pq factorization"]
    r = property_driver(range(7), ids, tmp_path)
    assert r.runs == len(ids) * 7


def test_all_registered_properties_pass(tmp_path):
    r = property_driver(range(25), dump_dir=tmp_path)
    assert r.ok, r.summary()
    assert r.runs == 25 * len(PROPERTIES)


def test_injected_off_by_one_dumps_seed(tmp_path):
    def broken(seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, 4)).astype(np.float32)
        shifted = np.roll(x, 1, axis=0)  # off-by-one double
        return bool(np.array_equal(shifted, x)), {"x": x}
    r = property_driver(range(3), ["broken"], tmp_path, registry={"broken": broken})
    assert not r.ok and len(r.failures) == 3
    f = r.failures[0]
    dumped = np.load(f["dump"] + ".npz")
    x = np.random.default_rng(f["seed"]).standard_normal((4, 4)).astype(np.float32)
    assert np.array_equal(dumped["x"], x)
    assert json.loads(Path(f["dump"] + ".json").read_text())["seed"] == f["seed"]


def test_crashing_property_is_failure(tmp_path):
    def boom(seed):
        raise RuntimeError("x")
    r = property_driver([0], ["boom"], tmp_path, registry={"boom": boom})
    assert not r.ok and "RuntimeError" in Path(r.failures[0]["dump"] + ".json").read_text()


def test_single_token_window():
    # With one valid token (others masked), output is the value projection of that token.
    rng = np.random.default_rng(0)
    w = random_attention_weights(rng, 2, 1)
    x = rng.standard_normal((1, 1, 64))
    out = oracle.naive_attention(x, w, "attn", 2, 1)
    c = 64
    v = np.zeros(c)
    for h in range(2):
        s = slice(h * 32, (h + 1) * 32)
        vv = x[0, 0, s] @ w["attn.qkv.weight"][2 * c + h * 32:2 * c + (h + 1) * 32, s].T.astype(np.float64)
        vv = vv + w["attn.qkv.bias"][2 * c + h * 32:2 * c + (h + 1) * 32]
        v[s] = vv @ w["attn.proj.weight"][s, s].T + w["attn.proj.bias"][s]
    assert np.abs(out[0, 0] - v).max() <= 1e-9
    aw = AttentionWeights.from_store(w, "attn", 64, 32, 1)
    assert np.abs(cosine_window_attention(x.astype(np.float32), aw)[0, 0] - v).max() <= 1e-5


def test_uniform_bias_shift_invariance():
    rng = np.random.default_rng(1)
    w = random_attention_weights(rng, 2, 8)
    x = rng.standard_normal((1, 64, 64))
    a = oracle.naive_attention(x, w, "attn", 2, 8)
    b = oracle.naive_attention(x, w, "attn", 2, 8, mask=np.full((1, 64, 64), 3.0))
    assert np.abs(a - b).max() <= 1e-12


def test_oracle_shares_no_kernel_code():
    src = Path(rgbdscene.oracle.__file__).read_text()
    mods = set()
    for node in ast.walk(ast.parse(src)):
        if isinstance(node, ast.Import):
            mods |= {a.name for a in node.names}
        elif isinstance(node, ast.ImportFrom):
            mods.add(("." * node.level) + (node.module or ""))
    assert mods <= {"math", "typing", "numpy", "__future__"}, mods


def test_selftest_registry_nonempty():
    assert {"window roundtrip", "attention oracle", "group pixels oracle", "pq oracle"} <= set(harness.PROPERTIES)
