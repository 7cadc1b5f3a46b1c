"""Ablation matrix and the two diagnostics (phrase attention, feature spread)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .amg import LEGAL_CONFIGS, SignalSet
from .backbone import q_sample, to_model_space
from .checkpoint import CheckpointError, load_model
from .encoders import text_encode, tokenize
from .metrics import evaluate
from .model import MoGenModel
from .rsa import phrase_attention_map
from .tensor import no_grad

ABLATION_FIELDS = ["config", "rsa_on", "amg_on", "signals", "n_items",
                   "numerical", "spatial_sim", "appearance_sim", "img_sim"]


@dataclass(frozen=True)
class AblationEntry:
    name: str
    rsa_on: bool
    amg_on: bool
    checkpoint: str


def generate_for(model: MoGenModel, items, signals="T", n_steps=50, seed=0, chunk=50):
    """Images for held-out items; the chunk starting at item i uses noise seed seed + i."""
    out = []
    for i in range(0, len(items), chunk):
        part = items[i:i + chunk]
        sig = None
        if signals != "T":
            sig = [SignalSet.from_annotation(signals, it.annotation) for it in part]
        out.append(model.generate([it.annotation.text for it in part], sig, n_steps=n_steps,
                                  seed=seed + i))
    return np.concatenate(out) if out else np.zeros((0,))


def _fmt(v):
    return f"{v:.6f}"


def run_ablation(matrix, items, out_path, signals=("T",), n_steps=50, seed=0):
    """One CSV row per (configuration, signal configuration); returns the rows."""
    for s in signals:
        if s not in LEGAL_CONFIGS:
            raise ValueError(f"unknown signal configuration {s!r}")
    rows = []
    for entry in matrix:
        if not Path(entry.checkpoint).exists():
            raise CheckpointError(f"missing checkpoint for {entry.name}: {entry.checkpoint}")
        model, _, _ = load_model(entry.checkpoint)
        if (model.rsa is not None, model.amg is not None) != (entry.rsa_on, entry.amg_on):
            raise CheckpointError(f"{entry.checkpoint} does not match config {entry.name}")
        for s in signals:
            rep = evaluate(generate_for(model, items, s, n_steps, seed), items)
            rows.append({"config": entry.name, "rsa_on": int(entry.rsa_on),
                         "amg_on": int(entry.amg_on), "signals": s, "n_items": len(items),
                         "numerical": _fmt(rep.numerical), "spatial_sim": _fmt(rep.spatial_sim),
                         "appearance_sim": _fmt(rep.appearance_sim),
                         "img_sim": _fmt(rep.img_sim)})
    write_csv(out_path, ABLATION_FIELDS, rows)
    return rows


def write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def dump_attention(prompt, model: MoGenModel, out_path):
    """Phrase-query attention over the prompt's tokens, one row per query."""
    if model.rsa is None:
        raise ValueError("attention dump needs a model with RSA weights")
    with no_grad():
        t_emb = text_encode(prompt, model.cfg, model.encoders.emb_table)
        w = phrase_attention_map(t_emb.t_emb, model.rsa.parser, t_emb.token_count)
    words = tokenize(prompt)[:t_emb.token_count]
    with open(out_path, "w", newline="") as fh:
        cw = csv.writer(fh, lineterminator="\n")
        cw.writerow(["query"] + [f"{j}:{t}" for j, t in enumerate(words)])
        for q, row in enumerate(w):
            cw.writerow([q] + [f"{v:.8f}" for v in row])
    return w


def histogram_rows(name, values, bins=64):
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(values.min()), float(values.max())
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi) if hi > lo else (lo - 0.5, lo + 0.5))
    med = float(np.median(values))
    return [{"tensor": name, "bin": k, "lo": f"{edges[k]:.8g}", "hi": f"{edges[k + 1]:.8g}",
             "count": int(c), "min": f"{lo:.8g}", "max": f"{hi:.8g}", "median": f"{med:.8g}"}
            for k, c in enumerate(counts)]


def layout_features(model: MoGenModel, prompts, images, t, seed=0):
    """Layout-block outputs of the global and phrase branches for noised images."""
    if model.rsa is None:
        raise ValueError("feature distribution needs a model with RSA weights")
    rng = np.random.default_rng(seed)
    images = np.asarray(images)
    x0 = to_model_space(images).astype(model.dtype)
    if not 1 <= t <= model.cfg.T:
        raise ValueError(f"t must lie in 1..{model.cfg.T}")
    tt = np.full(len(images), t)
    x_t = q_sample(x0, tt, rng.standard_normal(x0.shape), model.schedule)
    probe = {}
    with no_grad():
        bundle, _ = model.condition(prompts)
        model.predict_eps(x_t.astype(model.dtype), tt, bundle, probe=probe)
    return probe["v_glob"], probe["v_phr"]


def feature_distribution(model: MoGenModel, prompts, images, out_path, t=500, seed=0, bins=64):
    v_glob, v_phr = layout_features(model, prompts, images, t, seed)
    rows = histogram_rows("v_glob", v_glob, bins) + histogram_rows("v_phr", v_phr, bins)
    write_csv(out_path, ["tensor", "bin", "lo", "hi", "count", "min", "max", "median"], rows)
    return rows

