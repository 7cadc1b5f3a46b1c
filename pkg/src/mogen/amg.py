"""Adaptive multi-modal guidance: control-signal encoding, structured intent,
and its residual injection next to the text pathway."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import NormBox
from .config import ModelConfig
from .encoders import Encoders, box_encode, image_encode
from .rsa import ContractError
from .tensor import (FFN, AttentionParams, LayerNorm, Module, Tensor, concat, expand, index,
                     parameter, scaled_dot_attention)

STRUCTURE, OBJECT, BOX = 0, 1, 2

# the six legal activations, as (structure, objects, boxes) flags
LEGAL_CONFIGS = {
    "T": (False, False, False),
    "T+S": (True, False, False),
    "T+O": (False, True, False),
    "T+B": (False, False, True),
    "T+O+B": (False, True, True),
    "T+S+O": (True, True, False),
}


class SignalError(ValueError):
    pass


LAYOUT_EXCLUSION = ("structure reference and bounding boxes are both layout signals "
                    "and cannot be activated together")


@dataclass
class SignalSet:
    structure: np.ndarray | None = None
    objects: list = field(default_factory=list)
    boxes: list = field(default_factory=list)

    def __post_init__(self):
        self.boxes = [NormBox(*b) for b in self.boxes]
        self.validate()

    def validate(self):
        if self.structure is not None and self.boxes:
            raise SignalError(LAYOUT_EXCLUSION)
        for b in self.boxes:
            b.validate()
        return self

    def is_empty(self) -> bool:
        return self.structure is None and not self.objects and not self.boxes

    @property
    def config_name(self) -> str:
        parts = ["T"]
        if self.structure is not None:
            parts.append("S")
        if self.objects:
            parts.append("O")
        if self.boxes:
            parts.append("B")
        return "+".join(parts)

    @classmethod
    def from_annotation(cls, config: str, bundle) -> "SignalSet":
        s, o, b = LEGAL_CONFIGS[config]
        return cls(structure=bundle.structure_ref if s else None,
                   objects=list(bundle.object_refs) if o else [],
                   boxes=list(bundle.boxes) if b else [])


@dataclass
class StructuredIntent:
    c_str: Tensor


class AmgWeights(Module):
    """Signal encoder alignment, adaptive controller and per-block interaction layers.

    Interaction layers reuse each block's query projection and start with a
    zero output projection, so enabling them changes nothing until trained.
    """

    def __init__(self, cfg: ModelConfig, rng, q_nets):
        d, h = cfg.d, cfg.n_heads
        self.type_emb = parameter(rng.standard_normal((3, d)) * 0.5)
        self.enc_attn = AttentionParams(rng, d, d, h)
        self.q_str = parameter(rng.standard_normal((cfg.L_str, d)))
        self.ctrl_cross = AttentionParams(rng, d, d, h)
        self.ctrl_self = AttentionParams(rng, d, d, h)
        self.ctrl_ln = LayerNorm(d)
        self.ctrl_ffn = FFN(rng, d)
        self.interact = [AttentionParams(rng, cfg.d_net, cfg.d_net, h, d_kv=d, w_q=q, zero_out=True)
                         for q in q_nets]

    def named_parameters(self, prefix=""):
        for key in ("type_emb", "q_str"):
            yield prefix + key, getattr(self, key)
        for key in ("enc_attn", "ctrl_cross", "ctrl_self", "ctrl_ln", "ctrl_ffn"):
            yield from getattr(self, key).named_parameters(f"{prefix}{key}.")
        for i, layer in enumerate(self.interact):
            yield from layer.named_parameters(f"{prefix}interact.{i}.", include_query=False)


def _check_sets(sets):
    for c in sets:
        c.validate()
        if c.is_empty():
            raise ContractError("empty signal set must bypass guidance, not be encoded")


def encode_signals(c: SignalSet, cfg: ModelConfig, encoders: Encoders, params: AmgWeights) -> Tensor:
    """Unified control features [L_unif, d] for one signal set."""
    _check_sets([c])
    c_unif, _ = encode_signal_batch([c], cfg, encoders, params)
    return c_unif[0]


def encode_signal_batch(sets, cfg: ModelConfig, encoders: Encoders, params: AmgWeights):
    """Encode several signal sets at once.

    Returns the padded unified features [B, L_max, d] and a key mask
    [B, L_max] (True on real rows); within each item rows are ordered
    structure tokens, object tokens, box tokens.
    """
    _check_sets(sets)
    d = cfg.d
    pieces, types = [], []
    layout = []
    offset = 0

    structs = [c.structure for c in sets if c.structure is not None]
    objs = [o for c in sets for o in c.objects]
    boxes = [b for c in sets for b in c.boxes]
    starts = {}
    if structs:
        fs = image_encode(np.stack(structs), "structure", cfg, encoders)
        per = fs.shape[1]
        pieces.append(fs.reshape(-1, d))
        types += [STRUCTURE] * (len(structs) * per)
        starts["s"] = (offset, per)
        offset += len(structs) * per
    if objs:
        fo = image_encode(np.stack(objs), "object", cfg, encoders)
        per = fo.shape[1]
        pieces.append(fo.reshape(-1, d))
        types += [OBJECT] * (len(objs) * per)
        starts["o"] = (offset, per)
        offset += len(objs) * per
    if boxes:
        pieces.append(box_encode(boxes, encoders))
        types += [BOX] * len(boxes)
        starts["b"] = (offset, 1)
        offset += len(boxes)

    si = oi = bi = 0
    for c in sets:
        rows = []
        if c.structure is not None:
            base, per = starts["s"]
            rows += range(base + si * per, base + (si + 1) * per)
            si += 1
        if c.objects:
            base, per = starts["o"]
            rows += range(base + oi * per, base + (oi + len(c.objects)) * per)
            oi += len(c.objects)
        if c.boxes:
            base, _ = starts["b"]
            rows += range(base + bi, base + bi + len(c.boxes))
            bi += len(c.boxes)
        layout.append(rows)

    table = concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
    table = table + index(params.type_emb, np.asarray(types))
    width = max(len(r) for r in layout)
    gather = np.zeros((len(sets), width), dtype=np.int64)
    mask = np.zeros((len(sets), width), dtype=bool)
    for i, rows in enumerate(layout):
        gather[i, : len(rows)] = rows
        mask[i, : len(rows)] = True
    feats = index(table, gather)
    if mask.all():
        return scaled_dot_attention(feats, feats, params.enc_attn), mask
    return scaled_dot_attention(feats, feats, params.enc_attn, key_mask=mask), mask


def adaptive_control(c_unif: Tensor, params: AmgWeights, key_mask=None,
                     return_cross=False):
    """Learned queries gather the unified features, then self-attend.

    With ``return_cross`` the cross-attention stage output is returned as well.
    """
    if c_unif.shape[-2] < 1:
        raise ContractError("adaptive control needs at least one signal token")
    q = params.q_str
    if c_unif.ndim > 2:
        q = expand(q, c_unif.shape[:-2] + q.shape)
    cross = scaled_dot_attention(q, c_unif, params.ctrl_cross, key_mask=key_mask)
    c1 = scaled_dot_attention(cross, cross, params.ctrl_self)
    intent = StructuredIntent(params.ctrl_ffn(params.ctrl_ln(c1)))
    return (intent, cross) if return_cross else intent


def build_intent(sets, cfg, encoders, params) -> StructuredIntent:
    c_unif, mask = encode_signal_batch(sets, cfg, encoders, params)
    return adaptive_control(c_unif, params, key_mask=None if mask.all() else mask)


def intent_inject(block_state: Tensor, intent: StructuredIntent, layer: AttentionParams,
                  q_net: Tensor | None = None) -> Tensor:
    if q_net is None:
        q_net = layer.w_q(block_state)
    return layer.kv_attend(q_net, intent.c_str)


def fuse(v_rsa: Tensor, v_amg: Tensor | None) -> Tensor:
    """Residual combination; an absent guidance term returns v_rsa itself."""
    if v_amg is None:
        return v_rsa
    if v_amg.shape != v_rsa.shape:
        raise ValueError(f"fuse shape mismatch {v_rsa.shape} vs {v_amg.shape}")
    return v_rsa + v_amg
