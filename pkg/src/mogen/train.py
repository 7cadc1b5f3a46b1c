"""Stage-0 pretraining and the two adapter stages (RSA, then AMG) with frozen
upstream weights."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .amg import LEGAL_CONFIGS, SignalSet
from .checkpoint import load_model, save_model
from .config import ModelConfig
from .data import augment
from .model import MoGenModel, training_loss

log = logging.getLogger(__name__)

STAGES = ("pretrain", "rsa", "amg")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "rsa"
    steps: int = 3000
    lr_start: float = 5e-5
    lr_end: float = 5e-6
    batch_size: int = 16
    seed: int = 0
    signal_configs: tuple = tuple(LEGAL_CONFIGS)
    augment_prob: float = 0.5
    dtype: str = "float32"
    log_every: int = 250

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        bad = set(self.signal_configs) - set(LEGAL_CONFIGS)
        if bad:
            raise ValueError(f"illegal signal configurations {sorted(bad)}")
        self.signal_configs = tuple(self.signal_configs)


def pretrain_config(**kw) -> TrainConfig:
    """Stage-0 defaults: the backbone learns from scratch, so it gets a larger step size."""
    base = dict(stage="pretrain", lr_start=2e-3, lr_end=2e-4)
    base.update(kw)
    return TrainConfig(**base)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear decay from lr_start at step 0 to lr_end at step steps-1."""
    if cfg.steps <= 1:
        return cfg.lr_start
    f = step / (cfg.steps - 1)
    return cfg.lr_start * (1.0 - f) + cfg.lr_end * f


class Adam:
    def __init__(self, named_params, betas=(0.9, 0.999), eps=1e-8):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        return ([(f"m.{n}", m) for n, m in zip(self.names, self.m)]
                + [(f"v.{n}", v) for n, v in zip(self.names, self.v)])

    def load_state_arrays(self, arrays, t):
        self.t = t
        for i, n in enumerate(self.names):
            self.m[i] = arrays[f"m.{n}"].astype(self.params[i].dtype)
            self.v[i] = arrays[f"v.{n}"].astype(self.params[i].dtype)


@dataclass
class TrainState:
    model: MoGenModel
    optimizer: Adam
    rng: np.random.Generator
    config: TrainConfig
    step: int = 0
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)


def trainable_parameters(model: MoGenModel, stage: str):
    """Named parameters updated in a stage; everything else is frozen."""
    if stage == "pretrain":
        named = [(f"backbone.{n}", p) for n, p in model.backbone.named_parameters()]
        named.append(("encoders.emb_table", model.encoders.emb_table))
    elif stage == "rsa":
        if model.rsa is None:
            raise TrainingError("stage rsa needs a model with RSA weights")
        named = [(f"rsa.{n}", p) for n, p in model.rsa.named_parameters()]
    else:
        if model.amg is None:
            raise TrainingError("stage amg needs a model with AMG weights")
        named = [(f"amg.{n}", p) for n, p in model.amg.named_parameters()]
        named += [(f"encoders.{n}", p) for n, p in model.encoders.named_parameters()
                  if not n.startswith("emb_table")]
    return named


def start_state(model: MoGenModel, cfg: TrainConfig) -> TrainState:
    model.freeze_all()
    named = trainable_parameters(model, cfg.stage)
    for _, p in named:
        p.requires_grad = True
    rng = np.random.default_rng([cfg.seed, STAGES.index(cfg.stage)])
    return TrainState(model, Adam(named), rng, cfg)


def make_batch(items, rng, cfg: TrainConfig):
    idx = rng.choice(len(items), size=min(cfg.batch_size, len(items)), replace=False)
    chosen = [items[i] for i in idx]
    batch = {"prompts": [it.annotation.text for it in chosen]}
    if cfg.stage != "amg":
        batch["images"] = np.stack([it.image for it in chosen])
        return batch
    config = cfg.signal_configs[int(rng.integers(len(cfg.signal_configs)))]
    images, signals = [], []
    for it in chosen:
        ann, img = it.annotation, it.image
        if rng.random() < cfg.augment_prob:
            ann, img = augment(ann, img, rng)
        images.append(img)
        signals.append(SignalSet.from_annotation(config, ann))
    batch["images"] = np.stack(images)
    batch["signals"] = signals
    batch["config"] = config
    return batch


def train_steps(state: TrainState, items, n_steps=None):
    """Advance training by n_steps (default: to the configured total)."""
    cfg = state.config
    if not items:
        raise TrainingError("training needs a non-empty dataset")
    end = cfg.steps if n_steps is None else min(cfg.steps, state.step + n_steps)
    while state.step < end:
        batch = make_batch(items, state.rng, cfg)
        loss = training_loss(batch, state.model, state.rng)
        loss.backward()
        lr = lr_at(state.step, cfg)
        state.optimizer.step(lr)
        state.optimizer.zero_grad()
        state.losses.append(float(loss.data))
        state.lrs.append(lr)
        state.step += 1
        if cfg.log_every and state.step % cfg.log_every == 0:
            recent = np.mean(state.losses[-cfg.log_every:])
            log.info("%s step %d/%d loss %.4f lr %.2e", cfg.stage, state.step, cfg.steps, recent, lr)
    return state


def save_state(path, state: TrainState):
    meta = {"train": asdict(state.config), "step": state.step,
            "rng": state.rng.bit_generator.state, "adam_t": state.optimizer.t,
            "losses": state.losses, "lrs": state.lrs}
    save_model(path, state.model, meta, {"optim": state.optimizer.state_arrays()})


def resume_state(path) -> TrainState:
    model, meta, segments = load_model(path)
    if "train" not in meta:
        raise TrainingError(f"{path} holds no training state")
    tc = meta["train"]
    tc["signal_configs"] = tuple(tc["signal_configs"])
    cfg = TrainConfig(**tc)
    state = start_state(model, cfg)
    state.rng.bit_generator.state = meta["rng"]
    state.optimizer.load_state_arrays(segments["optim"], meta["adam_t"])
    state.step = meta["step"]
    state.losses = list(meta["losses"])
    state.lrs = list(meta["lrs"])
    return state


def _split(items, parity):
    return [it for i, it in enumerate(items) if i % 2 == parity]


def stage_items(items, stage):
    """Stage 1 sees even-indexed items, stage 2 odd-indexed; pretraining sees all."""
    if stage == "pretrain":
        return list(items)
    return _split(items, 0 if stage == "rsa" else 1)


def pretrain_backbone(cfg: TrainConfig, items, model_cfg: ModelConfig = ModelConfig(), seed=None):
    if not items:
        raise TrainingError("pretraining needs a dataset")
    model = MoGenModel(model_cfg, seed=cfg.seed if seed is None else seed, dtype=np.dtype(cfg.dtype))
    state = start_state(model, cfg)
    return train_steps(state, stage_items(items, "pretrain"))


def train_stage1_rsa(cfg: TrainConfig, items, base: MoGenModel):
    if base is None:
        raise TrainingError("stage 1 needs a stage-0 checkpoint")
    base.enable_rsa()
    state = start_state(base, cfg)
    return train_steps(state, stage_items(items, "rsa"))


def train_stage2_amg(cfg: TrainConfig, items, base: MoGenModel):
    if base is None:
        raise TrainingError("stage 2 needs a stage-1 checkpoint")
    base.enable_amg()
    state = start_state(base, cfg)
    return train_steps(state, stage_items(items, "amg"))
