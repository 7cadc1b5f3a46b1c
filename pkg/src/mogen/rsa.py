"""Regional semantic anchoring: text parsing into global/phrase semantics and
their block-gated injection into the denoiser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .tensor import (FFN, AttentionParams, LayerNorm, Linear, Module, Tensor, expand,
                     parameter, scaled_dot_attention)


class ContractError(RuntimeError):
    pass


@dataclass
class SemanticBundle:
    t_glob: Tensor
    t_phr: Tensor | None = None


class SemanticParser(Module):
    """Global branch and phrase-level branch over text embeddings.

    No positional encodings are added here; the text embeddings already carry
    them, which keeps both branches permutation-covariant in their inputs.
    """

    def __init__(self, cfg: ModelConfig, rng):
        d, h = cfg.d, cfg.n_heads
        self.glob_attn = AttentionParams(rng, d, d, h)
        self.glob_ffn = FFN(rng, d)
        self.glob_ln = LayerNorm(d)
        self.glob_fc = Linear(rng, d, d)
        self.q_phr = parameter(rng.standard_normal((cfg.L_phr, d)))
        self.phr_cross = AttentionParams(rng, d, d, h)
        self.phr_self = AttentionParams(rng, d, d, h)
        self.phr_ln = LayerNorm(d)
        self.phr_fc = Linear(rng, d, d)


def sp_global(t_emb: Tensor, params: SemanticParser) -> Tensor:
    t1 = params.glob_ffn(scaled_dot_attention(t_emb, t_emb, params.glob_attn))
    return params.glob_fc(params.glob_ln(t1))


def sp_phrase(t_emb: Tensor, params: SemanticParser, return_weights=False):
    """Phrase-level semantics [..., L_phr, d] pulled from t_emb by learned queries.

    With ``return_weights`` the cross-attention weights of the queries over the
    text tokens are returned too, shaped [..., heads, L_phr, L_emb].
    """
    q = params.q_phr
    if t_emb.ndim > 2:
        q = expand(q, t_emb.shape[:-2] + q.shape)
    cross, weights = params.phr_cross.kv_attend(params.phr_cross.w_q(q), t_emb, return_weights=True)
    t2 = scaled_dot_attention(cross, cross, params.phr_self)
    t_phr = params.phr_fc(params.phr_ln(t2))
    return (t_phr, weights) if return_weights else t_phr


def parse(t_emb: Tensor, params: SemanticParser) -> SemanticBundle:
    return SemanticBundle(sp_global(t_emb, params), sp_phrase(t_emb, params))


class RsaWeights(Module):
    """Trainable RSA parameters: the parser plus the layout block's phrase attention."""

    def __init__(self, cfg: ModelConfig, rng, q_net: Linear):
        self.parser = SemanticParser(cfg, rng)
        self.phr_attn = AttentionParams(rng, cfg.d_net, cfg.d_net, cfg.n_heads,
                                        d_kv=cfg.d, w_q=q_net)

    def named_parameters(self, prefix=""):
        yield from self.parser.named_parameters(prefix + "parser.")
        yield from self.phr_attn.named_parameters(prefix + "phr_attn.", include_query=False)


class RsaBlockAdapters:
    """Per-block view of the cross-attention layers that consume text semantics.

    ``glob`` holds one attention per block (block ids are 1-based); the phrase
    attention exists only at ``layout_block``.
    """

    def __init__(self, q_net, glob, layout_block, phrase=None):
        self.q_net = list(q_net)
        self.glob = list(glob)
        self.layout_block = layout_block
        self._phrase = phrase

    @property
    def n_blocks(self):
        return len(self.glob)

    def phrase_attention(self, block_idx):
        if block_idx != self.layout_block:
            raise ContractError(f"phrase cross-attention exists only at block {self.layout_block}, "
                                f"not block {block_idx}")
        return self._phrase

    def gate(self, block_idx) -> int:
        return 1 if (block_idx == self.layout_block and self._phrase is not None) else 0


def rsa_inject(block_state: Tensor, bundle: SemanticBundle, block_idx: int,
               adapters: RsaBlockAdapters, q_net: Tensor | None = None, probe=None) -> Tensor:
    """Global cross-attention at every block, plus phrase cross-attention at the
    layout block, both reading the block's shared query projection.

    A ``probe`` dict receives the layout block's two branch outputs."""
    if not 1 <= block_idx <= adapters.n_blocks:
        raise ContractError(f"block index {block_idx} outside 1..{adapters.n_blocks}")
    if q_net is None:
        q_net = adapters.q_net[block_idx - 1](block_state)
    out = adapters.glob[block_idx - 1].kv_attend(q_net, bundle.t_glob)
    if adapters.gate(block_idx) and bundle.t_phr is not None:
        v_phr = adapters.phrase_attention(block_idx).kv_attend(q_net, bundle.t_phr)
        if probe is not None:
            probe["v_glob"], probe["v_phr"] = out.data, v_phr.data
        out = out + v_phr
    return out


def phrase_attention_map(t_emb: Tensor, params: SemanticParser, token_count: int):
    """Head-averaged query-to-token attention, [L_phr, token_count].

    Pad columns are dropped and each row renormalized over the real tokens.
    """
    if token_count < 1:
        raise ValueError("attention map needs at least one token")
    _, w = sp_phrase(t_emb, params, return_weights=True)
    w = np.asarray(w, dtype=np.float64).mean(axis=-3)[..., :token_count]
    return w / w.sum(axis=-1, keepdims=True)
