import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mogen.boxes import NormBox
from mogen.config import ModelConfig, tiny_config
from mogen.encoders import (PAD_ID, Encoders, box_encode, fourier_features, image_encode,
                            sinusoidal, text_encode, token_ids)
from mogen.tensor import ShapeError

CFG = ModelConfig()


@pytest.fixture(scope="module")
def enc():
    return Encoders(CFG, np.random.default_rng(0))


def test_empty_prompt_is_all_pad(enc):
    te = text_encode("", CFG, enc.emb_table)
    assert te.token_count == 0
    assert te.t_emb.shape == (CFG.L_emb, CFG.d)
    pad_rows = enc.emb_table.data[PAD_ID] + sinusoidal(np.arange(CFG.L_emb), CFG.d)
    assert np.array_equal(te.t_emb.data, pad_rows)


def test_token_ids_match_reference_hash():
    ids, count = token_ids("two red circles", CFG)
    assert count == 3
    expect = [1 + oracles.fnv1a32(t) % (CFG.vocab - 1) for t in ("two", "red", "circles")]
    assert ids[:3].tolist() == expect
    assert (ids[3:] == PAD_ID).all()
    # frozen from the reference hash script
    assert expect == [2864, 102, 1027]


def test_ids_never_pad_and_case_insensitive():
    ids, _ = token_ids("A Scene WITH 3 Red circles", CFG)
    ids2, _ = token_ids("a scene with 3 red circles", CFG)
    assert np.array_equal(ids, ids2)
    assert (ids[:6] != PAD_ID).all()


def test_truncation(enc):
    prompt = " ".join(f"w{i}" for i in range(CFG.L_emb + 9))
    te = text_encode(prompt, CFG, enc.emb_table)
    assert te.token_count == CFG.L_emb
    assert te.t_emb.shape == (CFG.L_emb, CFG.d)


def test_pad_rows_beyond_token_count(enc):
    te = text_encode("three red circles", CFG, enc.emb_table)
    pos = sinusoidal(np.arange(CFG.L_emb), CFG.d)
    assert np.array_equal(te.t_emb.data[3:], (enc.emb_table.data[PAD_ID] + pos)[3:])


def test_image_encode_shapes_and_sharing(enc):
    img = np.random.default_rng(1).random((32, 32, 3))
    assert image_encode(img, "structure", CFG, enc).shape == (16, CFG.d)
    assert image_encode(img, "object", CFG, enc).shape == (4, CFG.d)
    a = image_encode(img, "structure", CFG, enc).data
    assert np.array_equal(a, image_encode(img, "structure", CFG, enc).data)
    with pytest.raises(ShapeError):
        image_encode(np.zeros((30, 30, 3)), "structure", CFG, enc)
    with pytest.raises(ValueError):
        image_encode(img, "depth", CFG, enc)


def test_image_encode_zero_image_is_bias_plus_position(enc):
    from mogen.encoders import grid_positions
    out = image_encode(np.zeros((32, 32, 3)), "structure", CFG, enc).data
    assert np.allclose(out, enc.img_proj.b.data + grid_positions(4, CFG.d), atol=1e-15)


def test_box_encode_examples(enc):
    assert box_encode([], enc).shape == (0, CFG.d)
    f = fourier_features([NormBox(0, 0, 1, 1)])
    assert np.abs(f[0, :16]).max() < 1e-12
    two = box_encode([NormBox(0.1, 0.1, 0.4, 0.5), NormBox(0.5, 0.2, 0.9, 0.6)], enc).data
    assert np.abs(two[0] - two[1]).max() > 0
    with pytest.raises(ValueError):
        box_encode([NormBox(0.2, 0.2, 0.2, 0.5)], enc)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10**6))
def test_box_rows_permute_with_boxes(n, seed):
    rng = np.random.default_rng(seed)
    enc = Encoders(tiny_config(), np.random.default_rng(0))
    boxes = []
    for _ in range(n):
        x0, y0 = rng.uniform(0, 0.5, 2)
        boxes.append(NormBox(x0, y0, x0 + rng.uniform(0.05, 0.5), y0 + rng.uniform(0.05, 0.5)))
    perm = rng.permutation(n)
    a = box_encode(boxes, enc).data
    b = box_encode([boxes[i] for i in perm], enc).data
    assert np.array_equal(a[perm], b)
