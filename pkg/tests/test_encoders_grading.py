import os
from pathlib import Path

import numpy as np
import pytest

from imo.core.arrayio import load_array, save_array
from imo.core.tensor import Tensor
from imo.encoders import FundusEncoder, OctEncoder, encode_fundus, encode_oct
from imo.errors import ShapeError
from imo.grading import GradingHead, grading_forward, se_block
from imo.nn import ModelParams

GOLDEN = Path(__file__).parent / "golden"
REGEN = os.environ.get("IMO_REGEN_GOLDEN") == "1"


def _golden(name, arr):
    path = GOLDEN / f"{name}.imoa"
    if REGEN or not path.exists():
        GOLDEN.mkdir(exist_ok=True)
        save_array(path, arr)
        if not REGEN:
            pytest.skip(f"golden file {path.name} created; rerun to compare")
    ref = load_array(path)
    assert ref.shape == arr.shape
    np.testing.assert_allclose(arr, ref, rtol=1e-5, atol=1e-6)


def _inputs():
    rng = np.random.default_rng(42)
    return (rng.random((2, 3, 64, 64)).astype(np.float32),
            rng.random((2, 1, 16, 32, 32)).astype(np.float32),
            rng.standard_normal((2, 64, 8, 8)).astype(np.float32))


def test_fundus_shapes_and_golden():
    p = ModelParams(np.float32)
    enc = FundusEncoder(p, np.random.default_rng(0))
    img, _, _ = _inputs()
    f = encode_fundus(Tensor(img), enc)
    assert [lvl.shape for lvl in f.pyramid] == [(2, 16, 32, 32), (2, 32, 16, 16), (2, 64, 8, 8)]
    _golden("fundus_top", f.top.data)


def test_oct_shapes_and_golden():
    p = ModelParams(np.float32)
    enc = OctEncoder(p, np.random.default_rng(0))
    _, vol, _ = _inputs()
    out = encode_oct(Tensor(vol), enc, grid=(8, 8))
    assert out.shape == (2, 64, 8, 8)
    _golden("oct_features", out.data)


def test_zero_weights_give_zero_features():
    p = ModelParams(np.float64)
    enc = FundusEncoder(p, np.random.default_rng(0), use_bn=False)
    for _, t in p:
        t.data[...] = 0
    assert np.all(enc(Tensor(np.random.default_rng(1).random((1, 3, 16, 16)))).top.data == 0)
    p = ModelParams(np.float64)
    enc = OctEncoder(p, np.random.default_rng(0))
    for k, t in p:
        if k.endswith((".bias", ".beta")):
            t.data[...] = 0
    assert np.all(enc(Tensor(np.zeros((1, 1, 8, 16, 16))), training=False).data == 0)


def test_grid_mismatch_names_both_grids():
    p = ModelParams(np.float32)
    enc = OctEncoder(p, np.random.default_rng(0))
    with pytest.raises(ShapeError, match=r"\(4, 4\).*\(8, 8\)"):
        enc(Tensor(np.zeros((1, 1, 8, 16, 16), dtype=np.float32)), grid=(8, 8))
    with pytest.raises(ShapeError):
        FundusEncoder(ModelParams(), np.random.default_rng(0))(Tensor(np.zeros((1, 3, 20, 20))))


def test_se_block_examples():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 8, 3, 3))
    assert np.array_equal(se_block(Tensor(x), Tensor(np.zeros((2, 8))), Tensor(np.zeros((8, 2)))).data, 0.5 * x)
    z = se_block(Tensor(np.zeros((1, 8, 3, 3))), Tensor(rng.standard_normal((2, 8))), Tensor(rng.standard_normal((8, 2))))
    assert np.all(z.data == 0)


def test_grading_probabilities():
    p = ModelParams(np.float64)
    head = GradingHead(p, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for _ in range(100):
        probs = grading_forward(Tensor(rng.standard_normal((1, 64, 2, 2)) * rng.uniform(0.1, 10)), head).data
        assert abs(probs.sum() - 1) < 1e-12 and np.all(probs >= 0)
    p["grading.fc2.weight"].data[...] = 0
    p["grading.fc2.bias"].data[...] = 0
    np.testing.assert_array_equal(head(Tensor(rng.standard_normal((3, 64, 2, 2)))).data, np.full((3, 3), 1 / 3))


def test_grading_golden():
    p = ModelParams(np.float32)
    head = GradingHead(p, np.random.default_rng(0))
    _, _, fused = _inputs()
    _golden("grading_probs", head(Tensor(fused)).data)
