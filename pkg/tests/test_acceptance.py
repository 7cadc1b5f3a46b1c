"""Acceptance checks. Each test prints one PASS/FAIL line before asserting.

The ablation run behind criteria 5 and 6 trains three stages at full size and
takes about 30 minutes on one core. Set MOGEN_SKIP_SLOW=1 to skip it.
"""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from mogen.amg import SignalSet
from mogen.backbone import ddim_sample, ddim_timesteps, make_schedule
from mogen.config import ModelConfig, tiny_config
from mogen.data import (MocaConfig, generate_dataset, jitter_box, load_dataset, random_crop,
                        save_dataset)
from mogen.evaluate import generate_for
from mogen.gradaudit import GROUPS, run_audit
from mogen.metrics import count_objects, evaluate
from mogen.model import MoGenModel
from mogen.rsa import parse, rsa_inject
from mogen.encoders import text_encode_batch
from mogen.tensor import AttentionParams, Tensor
from mogen.train import (TrainConfig, lr_at, pretrain_backbone, pretrain_config, train_stage1_rsa,
                         train_stage2_amg)

RESULTS = Path(__file__).resolve().parent.parent / "acceptance_results.json"


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return emit


def test_c1_gradient_integrity(report):
    t0 = time.time()
    rep, by_group = run_audit()
    secs = time.time() - t0
    ok = rep.max_error < 1e-6 and secs < 120 and set(GROUPS) <= set(by_group)
    report(1, ok, f"max rel err {rep.max_error:.2e} over {len(by_group)} groups in {secs:.0f}s")
    assert ok


def _rsa_pair(cfg, seed=3):
    rsa = MoGenModel(cfg, seed=seed, rsa=True)
    full = MoGenModel(cfg, seed=seed, rsa=True, amg=True)
    src = dict(rsa.named_parameters())
    for n, p in full.named_parameters():
        if n in src:
            p.data = src[n].data.copy()
    return rsa, full


def test_c2_gating_identities(report):
    cfg = tiny_config()
    rsa, full = _rsa_pair(cfg)
    # (a) outside the layout block only the global path contributes
    ad = rsa.adapters()
    s = Tensor(np.random.default_rng(7).standard_normal((2, cfg.L_net, cfg.d_net)))
    bundle = parse(text_encode_batch(["a scene with 2 red circles", "a scene with 1 blue square"],
                                     cfg, rsa.encoders.emb_table), rsa.rsa.parser)
    a = all(np.array_equal(rsa_inject(s, bundle, i, ad).data,
                           ad.glob[i - 1].kv_attend(ad.q_net[i - 1](s), bundle.t_glob).data)
            for i in range(1, cfg.n_blocks + 1) if i != cfg.layout_block)
    # (b) an empty signal set bypasses the guidance module
    prompts = ["a scene with 3 green triangles", "a scene with 1 red circle"]
    ref = rsa.generate(prompts, n_steps=6, seed=2)
    b = full.generate(prompts, [SignalSet(), SignalSet()], n_steps=6, seed=2).tobytes() == ref.tobytes()
    # (c) zero-initialized interaction layers leave stage-1 sampling unchanged
    items = generate_dataset(2, 4, MocaConfig(image_size=cfg.image_size, max_objects=3))
    sig = [SignalSet.from_annotation("T+O+B", it.annotation) for it in items]
    c = full.generate(prompts, sig, n_steps=6, seed=2).tobytes() == ref.tobytes()
    report(2, a and b and c, f"(a) {a} (b) {b} (c) {c}")
    assert a and b and c


def _oracle_attend(p, q, kv, mask):
    g = lambda lin: (lin.w.data.tolist(), lin.b.data.tolist())
    wq, bq = g(p.w_q)
    wv, bv = g(p.w_v)
    wo, bo = g(p.w_out)
    return np.array(oracles.attention(q.tolist(), kv.tolist(), wq, bq, p.w_k.w.data.tolist(), wv, bv,
                                      wo, bo, p.n_heads, None if mask is None else mask.tolist()))


def test_c3_attention_and_ddim_oracles(report):
    rng = np.random.default_rng(11)
    worst = 0.0
    for i in range(50):
        d_in, heads = int(rng.integers(2, 7)), int(rng.choice([1, 2, 4]))
        p = AttentionParams(rng, d_in, heads * int(rng.integers(1, 4)), n_heads=heads,
                            d_out=int(rng.integers(1, 5)))
        for lin in (p.w_q, p.w_v, p.w_out):
            lin.b.data = rng.standard_normal(lin.b.data.shape)
        lq, lk = int(rng.integers(1, 6)), int(rng.integers(1, 7))
        q, kv = rng.standard_normal((lq, d_in)), rng.standard_normal((lk, d_in))
        mask = None
        if i % 3 == 0 and lk > 1:
            mask = rng.random(lk) < 0.6
            mask[int(rng.integers(lk))] = True
        # cross-attention, masked cross-attention and self-attention paths
        got = p.kv_attend(p.w_q(Tensor(q)), Tensor(kv), key_mask=mask).data
        worst = max(worst, np.abs(got - _oracle_attend(p, q, kv, mask)).max())
        got = p.kv_attend(p.w_q(Tensor(kv)), Tensor(kv)).data
        worst = max(worst, np.abs(got - _oracle_attend(p, kv, kv, None)).max())
    s = make_schedule(200)
    ddim_err = 0.0
    for n in (1, 7, 50, 200):
        _, traj = ddim_sample(lambda x, t: np.zeros_like(x), (2, 3), n, 11, s, return_trajectory=True)
        ref = oracles.ddim_zero_stub(traj[0].ravel().tolist(), s.alpha_bars.tolist(),
                                     ddim_timesteps(200, n).tolist())
        ddim_err = max(ddim_err, max(np.abs(g.ravel() - np.array(w)).max() for g, w in zip(traj, ref)))
    ok = worst < 1e-10 and ddim_err < 1e-10
    report(3, ok, f"attention max err {worst:.1e} on 50 instances, DDIM stub err {ddim_err:.1e}")
    assert ok


def test_c4_dataset_gate(report, tmp_path):
    items = generate_dataset(10_000, 2024, MocaConfig(max_objects=6))
    counts = np.mean([count_objects(it.image) == it.spec.count for it in items])
    rng = np.random.default_rng(0)
    ious, removed = [], []
    for it in items[:2000]:
        for b in it.annotation.boxes:
            ious.append(oracles.iou(jitter_box(b, rng), b))
        for r in it.annotation.object_refs:
            removed.append(random_crop(r, rng)[1])
    save_dataset(items[:500], tmp_path)
    back = load_dataset(tmp_path)
    exact = all(a.image.tobytes() == b.image.tobytes() and a.spec == b.spec
                for a, b in zip(items[:500], back))
    ok = counts == 1.0 and min(ious) >= 0.6 and max(removed) <= 0.15 and exact
    report(4, ok, f"count agreement {counts:.4f}, min jitter IoU {min(ious):.3f}, "
                  f"max crop removal {max(removed):.3f}, round-trip exact {exact}")
    assert ok


def _ablation():
    """Three seed-pinned stages on 2k items, evaluated on 200 held-out items."""
    if RESULTS.exists():
        return json.loads(RESULTS.read_text())
    t0 = time.time()
    cfg = MocaConfig(max_objects=3)
    train, held = generate_dataset(2000, 0, cfg), generate_dataset(200, 1, cfg)
    res = {}

    def ev(model, name, signals="T"):
        r = evaluate(generate_for(model, held, signals, n_steps=50, seed=7), held)
        res[name] = {"numerical": r.numerical, "spatial_sim": r.spatial_sim}

    s0 = pretrain_backbone(pretrain_config(steps=3000, dtype="float32", log_every=0), train, ModelConfig())
    res["pretrain_loss"] = [float(np.mean(s0.losses[:50])), float(np.mean(s0.losses[-50:]))]
    ev(s0.model, "baseline")
    s1 = train_stage1_rsa(TrainConfig(stage="rsa", steps=3000, log_every=0), train, s0.model)
    ev(s1.model, "rsa")
    s2 = train_stage2_amg(TrainConfig(stage="amg", steps=3000, log_every=0), train, s1.model)
    ev(s2.model, "full")
    ev(s2.model, "full_boxes", "T+B")
    res["minutes"] = (time.time() - t0) / 60
    RESULTS.write_text(json.dumps(res, indent=1))
    return res


@pytest.fixture(scope="module")
def ablation():
    if os.environ.get("MOGEN_SKIP_SLOW"):
        pytest.skip("MOGEN_SKIP_SLOW is set")
    return _ablation()


def test_c5_directional_ablation(report, ablation):
    b, r, f = (ablation[k]["numerical"] for k in ("baseline", "rsa", "full"))
    ok = f >= r >= b and r - b >= 15 and f >= 60 and ablation["minutes"] <= 60
    report(5, ok, f"numerical baseline {b:.1f}, rsa-only {r:.1f}, full {f:.1f}; "
                  f"{ablation['minutes']:.0f} min")
    assert ok


def test_c6_layout_control(report, ablation):
    with_boxes = ablation["full_boxes"]["spatial_sim"]
    without = ablation["full"]["spatial_sim"]
    ok = with_boxes >= 0.4 and with_boxes - without >= 0.15
    report(6, ok, f"spatial-sim with boxes {with_boxes:.3f}, without {without:.3f}")
    assert ok


def test_c7_lr_endpoints(report):
    ends = [(lr_at(0, c), lr_at(c.steps - 1, c))
            for c in (TrainConfig(stage=s, steps=n) for s in ("rsa", "amg") for n in (2, 3, 17, 3000))]
    ok = all(e == (5e-5, 5e-6) for e in ends)
    report(7, ok, f"{len(ends)} schedules start at 5e-5 and end at 5e-6")
    assert ok


def _cli(*args, cwd):
    env = dict(os.environ, MOGEN_THREADS="1")
    subprocess.run([sys.executable, "-m", "mogen.cli", *args], cwd=cwd, env=env, check=True,
                   capture_output=True)


def test_c8_cli_reproducible(report, tmp_path):
    digests = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        _cli("gen-data", "--n", "12", "--seed", "5", "--dir", "data", "--image-size", "16",
             "--max-objects", "2", cwd=d)
        common = ["--data", "data", "--steps", "3", "--batch-size", "4"]
        _cli("pretrain", *common, "--tiny", "--out", "s0.ckpt", "--lr-log", "lr.csv", cwd=d)
        _cli("train-rsa", *common, "--base", "s0.ckpt", "--out", "s1.ckpt", cwd=d)
        _cli("train-amg", *common, "--base", "s1.ckpt", "--out", "s2.ckpt", cwd=d)
        _cli("sample", "--ckpt", "s2.ckpt", "--prompt", "a scene with 2 red circles", "--boxes",
             "0.1,0.1,0.4,0.4;0.5,0.5,0.9,0.9", "--steps", "4", "--out", "img.ppm", cwd=d)
        _cli("eval", "--ckpt", "s1.ckpt", "--data", "data", "--steps", "3", "--out", "eval.csv", cwd=d)
        files = sorted(p for p in d.rglob("*") if p.is_file())
        digests.append({str(p.relative_to(d)): p.read_bytes() for p in files})
    a, b = digests
    ok = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    report(8, ok, f"{len(a)} artifacts byte-identical across two runs")
    assert ok
