"""The assembled generator: encoders, backbone and the optional RSA/AMG modules."""

from __future__ import annotations

import numpy as np

from .amg import AmgWeights, SignalSet, StructuredIntent, build_intent
from .backbone import (Backbone, NoiseSchedule, denoiser_forward, make_schedule, mse,
                       q_sample, sample, to_model_space)
from .config import ModelConfig
from .encoders import Encoders, text_encode_batch
from .rsa import RsaBlockAdapters, RsaWeights, SemanticBundle, parse
from .tensor import no_grad

SEGMENTS = ("encoders", "backbone", "rsa", "amg")

# independent init streams so attaching a module never perturbs another's weights
_STREAM = {"encoders": 11, "backbone": 23, "rsa": 37, "amg": 41}


def _rng(seed, segment):
    return np.random.default_rng([seed, _STREAM[segment]])


class MoGenModel:
    def __init__(self, cfg: ModelConfig, seed=0, rsa=False, amg=False, dtype=np.float64):
        self.cfg = cfg
        self.seed = seed
        self.encoders = Encoders(cfg, _rng(seed, "encoders"))
        self.backbone = Backbone(cfg, _rng(seed, "backbone"))
        self.rsa = None
        self.amg = None
        if rsa:
            self.enable_rsa()
        if amg:
            self.enable_amg()
        self.astype(dtype)
        self.schedule: NoiseSchedule = make_schedule(cfg.T)

    # -- structure ------------------------------------------------------------
    @property
    def dtype(self):
        return self.backbone.patch_in.w.dtype

    def enable_rsa(self, seed=None):
        q = self.backbone.blocks[self.cfg.layout_block - 1].q_net
        self.rsa = RsaWeights(self.cfg, _rng(self.seed if seed is None else seed, "rsa"), q)
        if self.rsa.parser.q_phr.dtype != self.dtype:
            self.rsa.astype(self.dtype)
        return self

    def enable_amg(self, seed=None):
        q_nets = [b.q_net for b in self.backbone.blocks]
        self.amg = AmgWeights(self.cfg, _rng(self.seed if seed is None else seed, "amg"), q_nets)
        if self.amg.type_emb.dtype != self.dtype:
            self.amg.astype(self.dtype)
        return self

    def segments(self):
        segs = {"encoders": self.encoders, "backbone": self.backbone}
        if self.rsa is not None:
            segs["rsa"] = self.rsa
        if self.amg is not None:
            segs["amg"] = self.amg
        return segs

    def named_parameters(self):
        for seg, mod in self.segments().items():
            for name, p in mod.named_parameters():
                yield f"{seg}.{name}", p

    def astype(self, dtype):
        for mod in self.segments().values():
            mod.astype(dtype)
        return self

    def freeze_all(self):
        for _, p in self.named_parameters():
            p.requires_grad = False
            p.grad = None

    def adapters(self) -> RsaBlockAdapters:
        blocks = self.backbone.blocks
        return RsaBlockAdapters([b.q_net for b in blocks], [b.glob_attn for b in blocks],
                                self.cfg.layout_block,
                                phrase=self.rsa.phr_attn if self.rsa is not None else None)

    # -- conditioning and prediction -----------------------------------------------
    def condition(self, prompts, signals=None):
        """Text bundle and (optional) structured intent for a batch."""
        t_emb = text_encode_batch(prompts, self.cfg, self.encoders.emb_table)
        if self.rsa is not None:
            bundle = parse(t_emb, self.rsa.parser)
        else:
            bundle = SemanticBundle(t_glob=t_emb)
        return bundle, self.intent(signals)

    def intent(self, signals) -> StructuredIntent | None:
        if self.amg is None or not signals:
            return None
        active = [not s.is_empty() for s in signals]
        if not any(active):
            return None
        if not all(active):
            raise ValueError("a batch must be all signal-free or all signal-bearing")
        return build_intent(signals, self.cfg, self.encoders, self.amg)

    def predict_eps(self, x_t, t, bundle, intent=None, trace=None, probe=None):
        interact = self.amg.interact if self.amg is not None else None
        return denoiser_forward(x_t, t, bundle, intent, self.backbone, self.adapters(),
                                interact, self.cfg, trace=trace, probe=probe)

    def generate(self, prompts, signals=None, n_steps=50, seed=0, clip_x0=True):
        with no_grad():
            bundle, intent = self.condition(prompts, signals)
        interact = self.amg.interact if self.amg is not None else None
        return sample(bundle, intent, n_steps, seed, self.schedule, self.backbone,
                      self.adapters(), interact, clip_x0=clip_x0)


def training_loss(batch, model: MoGenModel, rng, sched: NoiseSchedule | None = None):
    """Epsilon-prediction MSE for a batch dict with ``images`` ([B, H, W, 3] in
    [0, 1]), ``prompts`` and optional ``signals``."""
    images = np.asarray(batch["images"])
    if len(images) == 0:
        raise ValueError("empty batch")
    sched = sched or model.schedule
    n = len(images)
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(images.shape).astype(model.dtype)
    x0 = to_model_space(images).astype(model.dtype)
    x_t = q_sample(x0, t, eps, sched)
    bundle, intent = model.condition(batch["prompts"], batch.get("signals"))
    pred = model.predict_eps(x_t, t, bundle, intent)
    return mse(pred, eps)


def signal_sets(config, bundles):
    return [SignalSet.from_annotation(config, b) for b in bundles]
