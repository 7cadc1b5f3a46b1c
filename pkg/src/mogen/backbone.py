"""Block-structured token denoiser, DDPM forward process and DDIM sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .amg import StructuredIntent, fuse, intent_inject
from .config import ModelConfig
from .encoders import grid_positions, sinusoidal
from .rsa import RsaBlockAdapters, SemanticBundle, rsa_inject
from .tensor import (FFN, AttentionParams, LayerNorm, Linear, Module, Tensor, gelu,
                     no_grad, parameter, scaled_dot_attention, square)


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t):
        """alpha-bar at 1-based step t; t = 0 maps to 1 (clean data)."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep outside 0..{self.T}")
        return np.where(t == 0, 1.0, self.alpha_bars[np.maximum(t, 1) - 1])


def make_schedule(T: int, beta_start=1e-4, beta_end=0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("schedule needs T >= 1")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; t is 1-based, per item or scalar."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ValueError("eps must match x0 in shape")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"timestep outside 1..{sched.T}")
    ab = sched.alpha_bars[t - 1]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    ab = ab.astype(x0.dtype)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


class Block(Module):
    def __init__(self, cfg: ModelConfig, rng):
        dn, h = cfg.d_net, cfg.n_heads
        self.ln1 = LayerNorm(dn)
        self.self_attn = AttentionParams(rng, dn, dn, h)
        self.ln2 = LayerNorm(dn)
        self.q_net = Linear(rng, dn, dn)
        self.glob_attn = AttentionParams(rng, dn, dn, h, d_kv=cfg.d, w_q=self.q_net)
        self.ln3 = LayerNorm(dn)
        self.ffn = FFN(rng, dn)

    def named_parameters(self, prefix=""):
        for key in ("ln1", "self_attn", "ln2", "q_net"):
            yield from getattr(self, key).named_parameters(f"{prefix}{key}.")
        yield from self.glob_attn.named_parameters(f"{prefix}glob_attn.", include_query=False)
        for key in ("ln3", "ffn"):
            yield from getattr(self, key).named_parameters(f"{prefix}{key}.")


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng):
        dn = cfg.d_net
        self.cfg = cfg
        self.patch_in = Linear(rng, cfg.patch * cfg.patch * 3, dn)
        self.time_fc1 = Linear(rng, dn, dn)
        self.time_fc2 = Linear(rng, dn, dn)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_blocks)]
        self.ln_out = LayerNorm(dn)
        self.patch_out = Linear(rng, dn, cfg.patch * cfg.patch * 3, zero=True)
        # learned prior mean of x0, the fallback prediction at high noise
        self.x0_mean = parameter(np.zeros((cfg.image_size, cfg.image_size, 3)))
        # plain array, not a parameter: used by the output preconditioning
        self.alpha_bars = make_schedule(cfg.T).alpha_bars


def patchify(x, patch):
    b, h, w, c = x.shape
    g = h // patch
    return x.reshape(b, g, patch, g, patch, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, g * g, patch * patch * c)


def unpatchify(tokens: Tensor, patch, size) -> Tensor:
    b = tokens.shape[0]
    g = size // patch
    x = tokens.reshape(b, g, g, patch, patch, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, size, size, 3)


def timestep_features(t, d):
    return sinusoidal(np.asarray(t, dtype=np.float64), d)


def denoiser_forward(x_t, t, bundle: SemanticBundle, intent: StructuredIntent | None,
                     backbone: Backbone, adapters: RsaBlockAdapters, interact=None,
                     cfg: ModelConfig | None = None, trace=None, probe=None):
    """Predict the noise in x_t ([B, H, W, 3]) at 1-based steps t ([B]).

    ``interact`` is the per-block list of intent interaction layers and is
    only consulted when ``intent`` is given. If ``trace`` is a list, the
    post-block activations are appended to it; ``probe`` is handed to the
    RSA injection.
    """
    cfg = cfg or backbone.cfg
    x_t = np.asarray(x_t)
    dtype = backbone.patch_in.w.dtype
    n, size, patch = x_t.shape[0], cfg.image_size, cfg.patch
    if x_t.shape[1:] != (size, size, 3):
        raise ValueError(f"expected images of shape {(size, size, 3)}, got {x_t.shape[1:]}")
    tok = Tensor(patchify(x_t.astype(dtype), patch))
    h = backbone.patch_in(tok) + Tensor(grid_positions(cfg.grid, cfg.d_net).astype(dtype))
    temb = Tensor(timestep_features(np.broadcast_to(t, (n,)), cfg.d_net).astype(dtype))
    temb = backbone.time_fc2(gelu(backbone.time_fc1(temb)))
    h = h + temb.reshape(n, 1, cfg.d_net)
    for i, blk in enumerate(backbone.blocks, start=1):
        s = blk.ln1(h)
        h = h + scaled_dot_attention(s, s, blk.self_attn)
        s = blk.ln2(h)
        q = blk.q_net(s)
        v = rsa_inject(s, bundle, i, adapters, q_net=q, probe=probe)
        if intent is not None:
            v = fuse(v, intent_inject(s, intent, interact[i - 1], q_net=q))
        h = h + v
        h = h + blk.ffn(blk.ln3(h))
        if trace is not None:
            trace.append(h.data)
    net = unpatchify(backbone.patch_out(backbone.ln_out(h)), patch, size)
    # Output preconditioning. The implied clean-image estimate is
    #   x0_hat = sqrt(a) x_t + (1 - a) mu + sqrt(a (1 - a)) net,   a = alpha-bar_t,
    # which falls back to the learned mean mu as a -> 0, where the eps loss puts
    # almost no weight and an unconstrained net would invent content from noise.
    # Rewritten as a noise prediction:
    a = backbone.alpha_bars[np.broadcast_to(t, (n,)) - 1].reshape(n, 1, 1, 1)
    return (net * Tensor((-a).astype(dtype))
            + backbone.x0_mean * Tensor((-np.sqrt(a * (1.0 - a))).astype(dtype))
            + Tensor((np.sqrt(1.0 - a) * x_t).astype(dtype)))


def mse(pred: Tensor, target) -> Tensor:
    diff = pred - Tensor(np.asarray(target, dtype=pred.dtype))
    return square(diff).mean()


def ddim_timesteps(T: int, n_steps: int):
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if n_steps > T:
        raise ValueError(f"n_steps={n_steps} exceeds T={T}")
    return np.unique(np.round(np.linspace(T, 1, n_steps)).astype(int))[::-1]


def ddim_sample(eps_fn, shape, n_steps, seed, sched: NoiseSchedule, clip_x0=False,
                dtype=np.float64, return_trajectory=False):
    """Deterministic DDIM (eta = 0) from seeded Gaussian noise.

    ``eps_fn(x_t, t)`` returns the predicted noise. Returns the final sample in
    model space (before any clamping), optionally with the list of iterates.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(dtype)
    traj = [x]
    ts = ddim_timesteps(sched.T, n_steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        ab = float(sched.alpha_bar(t))
        ab_prev = float(sched.alpha_bar(t_prev))
        eps = np.asarray(eps_fn(x, np.full(shape[0], t)), dtype=dtype)
        x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        if clip_x0:
            x0 = np.clip(x0, -1.0, 1.0)
            eps = (x - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
        x = (np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps).astype(dtype)
        traj.append(x)
    return (x, traj) if return_trajectory else x


def to_model_space(img):
    return np.asarray(img) * 2.0 - 1.0


def to_image(x):
    return np.clip((np.asarray(x) + 1.0) * 0.5, 0.0, 1.0)


def sample(bundle: SemanticBundle, intent, n_steps, seed, sched, backbone: Backbone,
           adapters, interact=None, clip_x0=True):
    """Generate images in [0, 1] for a batch of conditions."""
    cfg = backbone.cfg
    dtype = backbone.patch_in.w.dtype
    shape = (bundle.t_glob.shape[0], cfg.image_size, cfg.image_size, 3)

    def eps_fn(x, t):
        with no_grad():
            return denoiser_forward(x, t, bundle, intent, backbone, adapters, interact).data

    x = ddim_sample(eps_fn, shape, n_steps, seed, sched, clip_x0=clip_x0, dtype=dtype)
    return to_image(x)
