"""Finite-difference audit of every trainable parameter group on a tiny model."""

from __future__ import annotations

import numpy as np

from .amg import SignalSet
from .boxes import NormBox
from .config import tiny_config
from .model import MoGenModel
from .tensor import CheckReport, grad_check, square

GROUPS = ("parser.glob", "parser.phr", "q_phr", "phrase_attn", "q_str", "controller",
          "interact", "encoders", "backbone")


def group_of(name: str) -> str:
    seg, rest = name.split(".", 1)
    if seg == "rsa":
        if rest.startswith("parser.q_phr"):
            return "q_phr"
        if rest.startswith("parser.glob"):
            return "parser.glob"
        if rest.startswith("parser."):
            return "parser.phr"
        return "phrase_attn"
    if seg == "amg":
        if rest.startswith("q_str"):
            return "q_str"
        if rest.startswith("interact"):
            return "interact"
        return "controller"
    return seg


def audit_model(seed=0):
    """A float64 tiny model with every module attached and no zero-initialized
    weights, so that no gradient is trivially zero."""
    cfg = tiny_config()
    model = MoGenModel(cfg, seed=seed, rsa=True, amg=True, dtype=np.float64)
    rng = np.random.default_rng([seed, 99])
    tables = ("q_str", "q_phr", "type_emb", "emb_table")
    for n, p in model.named_parameters():
        if n.endswith(tables):
            scale = 1.0
        elif p.data.ndim == 2:
            scale = 1.5 / np.sqrt(p.data.shape[0])
        else:
            scale = 0.2
        p.data = p.data + scale * rng.standard_normal(p.data.shape)
    return model


def audit_loss(model: MoGenModel, seed=0):
    """Closure summing, for a T+S+O batch and a T+O+B batch, the denoising loss
    and random linear read-outs of the text bundle and the structured intent.
    The read-outs keep gradients of the deep conditioning paths well above
    finite-difference noise."""
    cfg = model.cfg
    rng = np.random.default_rng([seed, 7])
    size = cfg.image_size
    obj = cfg.structure_patch * 2
    prompts = ["a scene with 2 red circles", "a scene with 1 blue square and 1 green triangle"]
    x_t = rng.standard_normal((2, size, size, 3))
    eps = rng.standard_normal((2, size, size, 3))
    t = np.array([3, cfg.T])
    s_o = [SignalSet(structure=rng.random((size, size, 3)), objects=[rng.random((obj, obj, 3))])
           for _ in range(2)]
    o_b = [SignalSet(objects=[rng.random((obj, obj, 3))],
                     boxes=[NormBox(0.1, 0.2, 0.5, 0.6), NormBox(0.4, 0.1, 0.9, 0.8)][: i + 1])
           for i in range(2)]

    r_glob = rng.standard_normal((2, cfg.L_emb, cfg.d))
    r_phr = rng.standard_normal((2, cfg.L_phr, cfg.d))
    r_str = rng.standard_normal((2, cfg.L_str, cfg.d))

    def f():
        total = None
        for sigs in (s_o, o_b):
            bundle, intent = model.condition(prompts, sigs)
            pred = model.predict_eps(x_t, t, bundle, intent)
            loss = (square(pred - eps).mean() + (bundle.t_glob * r_glob).mean()
                    + (bundle.t_phr * r_phr).mean() + (intent.c_str * r_str).mean())
            total = loss if total is None else total + loss
        return total

    return f


def run_audit(seed=0, h=1e-5, max_entries=8) -> tuple[CheckReport, dict]:
    model = audit_model(seed)
    named = list(model.named_parameters())
    seen, params, names = set(), [], []
    for n, p in named:
        if id(p) in seen:
            continue
        seen.add(id(p))
        p.requires_grad = True
        params.append(p)
        names.append(n)
    report = grad_check(audit_loss(model, seed), params, h=h, names=names,
                        max_entries=max_entries)
    by_group = {}
    for n, err in report:
        g = group_of(n)
        by_group[g] = max(by_group.get(g, 0.0), err)
    return report, by_group
