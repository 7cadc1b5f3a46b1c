"""Small learned stand-ins for the text encoder, image encoder and box encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import NormBox
from .config import ModelConfig
from .tensor import Linear, Module, ShapeError, Tensor, gelu, index, parameter

PAD_ID = 0
FOURIER_FREQS = (1, 2, 4, 8)


def fnv1a32(token: str) -> int:
    h = 0x811C9DC5
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def tokenize(prompt: str):
    return prompt.lower().split()


def token_id(token: str, vocab: int) -> int:
    """ids are 1 + fnv1a32(token) mod (vocab - 1); 0 is reserved for padding."""
    return 1 + fnv1a32(token) % (vocab - 1)


def token_ids(prompt: str, cfg: ModelConfig):
    toks = tokenize(prompt)[: cfg.L_emb]
    ids = np.full(cfg.L_emb, PAD_ID, dtype=np.int64)
    ids[: len(toks)] = [token_id(t, cfg.vocab) for t in toks]
    return ids, len(toks)


def sinusoidal(positions, d: int):
    positions = np.asarray(positions, dtype=np.float64)
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = positions[..., None] * freqs
    out = np.zeros(positions.shape + (d,))
    out[..., 0:2 * half:2] = np.sin(ang)
    out[..., 1:2 * half:2] = np.cos(ang)
    return out


def grid_positions(n: int, d: int):
    """2-D sinusoidal code for an n x n patch grid, rows then columns."""
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return np.concatenate([sinusoidal(rows.ravel(), d // 2),
                           sinusoidal(cols.ravel(), d - d // 2)], axis=-1)


@dataclass
class TextEmbedding:
    t_emb: Tensor
    token_count: int


class Encoders(Module):
    """Text embedding table, shared patch image encoder and Fourier box encoder."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.emb_table = parameter(rng.standard_normal((cfg.vocab, cfg.d)) * 0.5)
        self.img_proj = Linear(rng, cfg.structure_patch ** 2 * 3, cfg.d)
        self.box_fc1 = Linear(rng, 8 * len(FOURIER_FREQS), cfg.d)
        self.box_fc2 = Linear(rng, cfg.d, cfg.d)

    def text_parameters(self):
        return [self.emb_table]

    def signal_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("emb_table")]


def text_encode(prompt: str, cfg: ModelConfig, emb_table: Tensor) -> TextEmbedding:
    ids, count = token_ids(prompt, cfg)
    return TextEmbedding(embed_ids(ids, cfg, emb_table), count)


def embed_ids(ids, cfg: ModelConfig, emb_table: Tensor) -> Tensor:
    """ids [..., L_emb] -> [..., L_emb, d] with sinusoidal positions added."""
    pos = sinusoidal(np.arange(cfg.L_emb), cfg.d).astype(emb_table.dtype)
    return index(emb_table, np.asarray(ids)) + Tensor(pos)


def text_encode_batch(prompts, cfg: ModelConfig, emb_table: Tensor) -> Tensor:
    ids = np.stack([token_ids(p, cfg)[0] for p in prompts])
    return embed_ids(ids, cfg, emb_table)


def _patchify(img, patch):
    n, h, w, c = img.shape
    x = img.reshape(n, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(n, (h // patch) * (w // patch), patch * patch * c)


def image_encode(img, role: str, cfg: ModelConfig, params: Encoders) -> Tensor:
    """Patch-embed an image (or a stack of images) into tokens.

    Structure references use ``structure_patch``; object references use the
    coarser ``object_patch``, realized by average-pooling the image down to
    the shared patch size so both roles run through the same projection.
    """
    if role not in ("structure", "object"):
        raise ValueError(f"unknown image role {role!r}")
    img = np.asarray(img, dtype=params.img_proj.w.dtype)
    single = img.ndim == 3
    if single:
        img = img[None]
    patch = cfg.structure_patch if role == "structure" else cfg.object_patch
    _, h, w, _ = img.shape
    if h % patch or w % patch or h != w:
        raise ShapeError(f"image {h}x{w} is not divisible into {patch}px patches")
    if role == "object":
        f = cfg.object_patch // cfg.structure_patch
        n = img.shape[0]
        img = img.reshape(n, h // f, f, w // f, f, 3).mean(axis=(2, 4))
    x = _patchify(img, cfg.structure_patch)
    grid = h // patch
    pos = grid_positions(grid, cfg.d).astype(x.dtype)
    out = params.img_proj(Tensor(x)) + Tensor(pos)
    return out[0] if single else out


def fourier_features(boxes):
    """sin/cos(2 pi k coord) for k in FOURIER_FREQS; [n, 4] -> [n, 32]."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    ang = 2 * np.pi * b[:, :, None] * np.asarray(FOURIER_FREQS, dtype=np.float64)
    return np.concatenate([np.sin(ang).reshape(len(b), -1), np.cos(ang).reshape(len(b), -1)], axis=1)


def box_encode(boxes, params: Encoders) -> Tensor:
    boxes = [NormBox(*b) for b in boxes]
    for b in boxes:
        if b.area <= 0:
            raise ValueError(f"degenerate box {tuple(b)}")
        b.validate()
    dtype = params.box_fc1.w.dtype
    if not boxes:
        return Tensor(np.zeros((0, params.cfg.d), dtype=dtype))
    feats = Tensor(fourier_features(boxes).astype(dtype))
    return params.box_fc2(gelu(params.box_fc1(feats)))
