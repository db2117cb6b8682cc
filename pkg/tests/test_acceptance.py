"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed even when output capture is on.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from countr.cli import main
from countr.data import ImageSample, generate_density_map
from countr.evaluation import EvalResult, mae, rmse
from countr.inference import (InferenceConfig, predict_count, sliding_window_predict,
                              tt_crop_predict, tt_normalize)
from countr.model import CounTR, ModelConfig, crop_exemplars
from countr.mosaic import (MosaicConfig, blend_borders, mosaic_type_a, mosaic_type_b,
                           quadrant_offsets)
from countr.toy import toy_samples
from countr.training import (PretrainConfig, TrainConfig, collate, counting_loss, finetune,
                             prepare_example, pretrain)


@pytest.fixture
def report(capsys):
    def emit(num, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] AC{num:02d} {title}: {detail}", flush=True)
        assert ok, detail
    return emit


# 1 -------------------------------------------------------------------------

def test_ac01_count_conservation(report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for i in range(1000):
        H, W = (int(v) for v in rng.integers(16, 385, 2))
        n = int(rng.integers(0, 501))
        sigma = float(rng.choice([1.0, 4.0, 16.0]))
        dots = rng.uniform(0, 1, (n, 2)) * [W, H]
        if n >= 4:  # pin a few dots to the extreme corners
            dots[:4] = [[0, 0], [np.nextafter(W, 0), 0], [0, np.nextafter(H, 0)],
                        [np.nextafter(W, 0), np.nextafter(H, 0)]]
        total = generate_density_map(dots, H, W, sigma).grid.sum()
        worst = max(worst, abs(total - n))
    elapsed = time.perf_counter() - start
    report(1, "count conservation", worst <= 1e-3 and elapsed < 30,
           f"max |sum - n| = {worst:.2e} over 1000 sets, {elapsed:.1f}s")


# 2 -------------------------------------------------------------------------

def _weight_maps(P, borders, S):
    """Per-quadrant blend weights, read off by blending one-hot quadrants."""
    maps = []
    for q in range(4):
        quads = [np.full((P, P, 3), float(j == q)) for j in range(4)]
        maps.append(blend_borders(quads, borders, S)[..., 0].astype(np.float64))
    return maps


def _oracle_quadrant_dots(src, crop, offset, P, weight):
    """Source dots in the half-open crop, mapped to the canvas, where the quadrant shows."""
    y0, x0, side = crop
    d = src.dots
    inside = (d[:, 0] >= x0) & (d[:, 0] < x0 + side) & (d[:, 1] >= y0) & (d[:, 1] < y0 + side)
    c = (d[inside] - [x0, y0]) * (P / side)
    c = np.minimum(c, np.nextafter(P, 0)) + [offset[1], offset[0]]
    px = np.floor(c).astype(int)
    return c[weight[px[:, 1], px[:, 0]] > 0]


def _same_points(a, b):
    if len(a) != len(b):
        return False
    key = lambda p: np.lexsort((p[:, 1], p[:, 0]))
    return np.allclose(a[key(a)], b[key(b)], atol=1e-9, rtol=0)


def _source(rng, i, label):
    H, W = (int(v) for v in rng.integers(120, 400, 2))
    n = int(rng.integers(1, 300))
    dots = rng.uniform(0, 1, (n, 2)) * [W, H]
    y1, x1 = rng.uniform(0, H - 30), rng.uniform(0, W - 30)
    side = rng.uniform(8, 25)
    boxes = [[y1, x1, y1 + side, x1 + side]]
    img = rng.random((H, W, 3)).astype(np.float32)
    return ImageSample(image=img, dots=dots, boxes=boxes, class_label=label, image_id=f"{i}.jpg")


def test_ac02_mosaic_conservation(report):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    b_ok = a_ok = 0
    for i in range(200):
        cfg = MosaicConfig(rng_seed=i)
        src = _source(rng, i, "x")
        res = mosaic_type_b(src, cfg)
        P, S = cfg.quadrant_size, cfg.output_size
        maps = _weight_maps(P, res.borders, S)
        offsets = quadrant_offsets(S, P)
        expected = np.concatenate([_oracle_quadrant_dots(src, c, o, P, w)
                                   for c, o, w in zip(res.crops, offsets, maps)])
        b_ok += len(expected) == res.sample.count and _same_points(expected, res.sample.dots)
    for i in range(200):
        cfg = MosaicConfig(rng_seed=1000 + i)
        srcs = [_source(rng, 4 * i + j, f"class{j}") for j in range(4)]
        t = int(rng.integers(4))
        res = mosaic_type_a(srcs, t, cfg, np.random.default_rng(i))
        P, S = cfg.quadrant_size, cfg.output_size
        w = _weight_maps(P, res.borders, S)[t]
        expected = _oracle_quadrant_dots(srcs[t], res.crops[t], quadrant_offsets(S, P)[t], P, w)
        a_ok += _same_points(expected, res.sample.dots)
    elapsed = time.perf_counter() - start
    report(2, "mosaic conservation", b_ok == 200 and a_ok == 200 and elapsed < 120,
           f"type B {b_ok}/200 exact, type A target-only {a_ok}/200, {elapsed:.1f}s")


# 3 -------------------------------------------------------------------------

def test_ac03_blending_math(report):
    S, b = 384, 10
    P = S // 2 + b
    # left column of quadrants black, right column white: vertical seam at x = S/2
    quads = [np.full((P, P, 3), v, np.float32) for v in (0.0, 1.0, 0.0, 1.0)]
    mid_v = float(blend_borders(quads, (b, b), S)[100, S // 2, 0])
    quads = [np.full((P, P, 3), v, np.float32) for v in (0.0, 0.0, 1.0, 1.0)]
    mid_h = float(blend_borders(quads, (b, b), S)[S // 2, 100, 0])
    seam_ok = abs(mid_v - 0.5) <= 1e-6 and abs(mid_h - 0.5) <= 1e-6

    rng = np.random.default_rng(0)
    quads = [rng.random((P, P, 3)).astype(np.float32) for _ in range(4)]
    h, far = S // 2, S - P
    hard = np.empty((S, S, 3), np.float32)
    hard[:h, :h] = quads[0][:h, :h]
    hard[:h, h:] = quads[1][:h, h - far:]
    hard[h:, :h] = quads[2][h - far:, :h]
    hard[h:, h:] = quads[3][h - far:, h - far:]
    exact = np.array_equal(blend_borders(quads, 0, S), hard)
    report(3, "blending math", seam_ok and exact,
           f"midpoints {mid_v:.9f}/{mid_h:.9f}, border-0 bit-exact={exact}")


# 4 -------------------------------------------------------------------------

def _stage_shapes(cfg, k=3):
    torch.manual_seed(0)
    model = CounTR(cfg).eval()
    img = torch.rand(1, 3, cfg.image_size, cfg.image_size)
    ex = torch.rand(1, k, 3, cfg.exemplar_resolution, cfg.exemplar_resolution)
    with torch.no_grad():
        tokens = model.encode_image(img)
        fim = model.interact(tokens, model.side_tokens(ex, 1))
        fim0 = model.interact(tokens, model.side_tokens(None, 1))
        dens = model.decoder(fim)
    return tuple(tokens.shape[1:]), tuple(fim.shape[1:]), tuple(fim0.shape[1:]), tuple(dens.shape[1:])


def test_ac04_shape_contract(report):
    default = _stage_shapes(ModelConfig())
    toy = _stage_shapes(ModelConfig.toy())
    ok = (default == ((576, 768), (576, 512), (576, 512), (384, 384))
          and toy == ((16, 32), (16, 32), (16, 32), (64, 64)))
    report(4, "shape contract", ok, f"default {default}, toy {toy}")


# 5 -------------------------------------------------------------------------

def test_ac05_gradient_check(report):
    torch.manual_seed(0)
    cfg = ModelConfig.toy()
    model = CounTR(cfg).double()
    g = torch.Generator().manual_seed(1)
    img = torch.rand(2, 3, 64, 64, generator=g, dtype=torch.float64)
    ex = torch.rand(2, 3, 3, 16, 16, generator=g, dtype=torch.float64)
    dots = np.random.default_rng(2).uniform(0, 64, (2, 9, 2))
    gt = torch.from_numpy(np.stack([generate_density_map(d, 64, 64, 2.0).grid for d in dots]))
    tcfg = TrainConfig()

    def loss_fn():
        # the zero-shot term routes gradient through the SPE token as well
        return (counting_loss(model(img, ex), gt, tcfg, seed=5)
                + counting_loss(model(img, None), gt, tcfg, seed=6))

    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(3)
    params = [p for p in model.parameters() if p.requires_grad]
    picks = []
    for _ in range(64):
        p = params[int(rng.integers(len(params)))]
        picks.append((p, int(rng.integers(p.numel()))))
    eps, worst, checked = 1e-6, 0.0, 0
    with torch.no_grad():
        for p, idx in picks:
            flat = p.view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = loss_fn().item()
            flat[idx] = orig - eps
            down = loss_fn().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            analytic = p.grad.view(-1)[idx].item()
            scale = max(abs(numeric), abs(analytic))
            rel = abs(numeric - analytic) / scale if scale > 1e-10 else 0.0
            worst = max(worst, rel)
            checked += 1
    report(5, "gradient check", checked >= 50 and worst <= 1e-3,
           f"{checked} parameters, max relative error {worst:.2e}")


# 6 -------------------------------------------------------------------------

def test_ac06_mae_pretrain_smoke(report):
    sample = toy_samples(1, (10, 20), seed=0, size=(64, 64), split="train")[0]
    cfg = PretrainConfig(mae_decoder_depth=2, mae_decoder_dim=32, mae_decoder_heads=4,
                         learning_rate=1e-3, batch_size=4)
    logs = []
    pretrain([sample] * 4, ModelConfig.toy(), cfg, steps=20, seed=0, log=logs.append)
    first, last = logs[0]["loss"], logs[19]["loss"]
    report(6, "MAE pre-training smoke", last < first,
           f"masked-patch loss step 1 {first:.4f} -> step 20 {last:.4f}")


# 7 -------------------------------------------------------------------------

def test_ac07_overfit_smoke(report):
    start = time.perf_counter()
    mcfg = ModelConfig.toy()
    samples = toy_samples(8, (7, 20), seed=1, size=(64, 64), split="train")
    tcfg = TrainConfig(learning_rate=2e-4, batch_size=8, shot_choices=(3,), mosaic_prob=0.0,
                       augment_noise=False, augment_blur=False, augment_flip=False,
                       augment_color=False, augment_geometric=False)
    model = finetune(samples, mcfg, tcfg, steps=400, seed=0, log=[].append)
    imgs, ex, _ = collate([prepare_example(s, mcfg, tcfg, 3, None, augment=False) for s in samples])
    with torch.no_grad():
        pred = model(imgs, ex).sum(dim=(1, 2)).double().numpy()
    err = mae(pred, [s.count for s in samples])
    elapsed = time.perf_counter() - start
    report(7, "overfit smoke", err < 2.0 and elapsed < 600,
           f"training MAE {err:.3f} counts after 400 steps, {elapsed:.1f}s")


# 8 -------------------------------------------------------------------------

class _Constant(torch.nn.Module):
    def forward(self, images, exemplars=None):
        return torch.ones(images.shape[:1] + images.shape[2:])


def test_ac08_sliding_window(report):
    torch.manual_seed(0)
    mcfg = ModelConfig.toy()
    model = CounTR(mcfg).eval()
    img = torch.rand(3, 64, 64)
    crops = crop_exemplars(img, [[3, 4, 15, 18], [30, 30, 40, 44]], mcfg.exemplar_resolution)
    icfg = InferenceConfig.toy()
    slide = sliding_window_predict(model, img, crops, icfg).grid
    with torch.no_grad():
        direct = model(img[None], crops[None])[0].double().numpy()
    eq_err = float(np.abs(slide - direct).max())

    pairs = [(384, 128), (512, 128), (640, 128), (700, 128), (1000, 128), (1536, 128),
             (450, 100), (777, 384), (900, 37), (1200, 200)]
    worst = 0.0
    for W, stride in pairs:
        cfg = InferenceConfig(window=384, stride=stride)
        out = sliding_window_predict(_Constant(), torch.zeros(3, 384, W), None, cfg).grid
        worst = max(worst, float(np.abs(out - 1.0).max()))
    report(8, "sliding-window equivalence", eq_err <= 1e-6 and worst <= 1e-9,
           f"single-window max diff {eq_err:.1e}, constant-stub max deviation {worst:.1e} "
           f"over {len(pairs)} (W, stride) pairs")


# 9 -------------------------------------------------------------------------

def _map(total, r):
    grid = np.zeros((20, 20))
    grid[1, 1] = r
    grid[15, 15] = total - r
    return grid


def test_ac09_tt_norm(report):
    box = [[0, 0, 4, 4]]
    a = tt_normalize(_map(100.0, 2.0), box, 1.8)
    b = tt_normalize(_map(100.0, 1.5), box, 1.8)
    rng = np.random.default_rng(0)
    identity = 0
    for _ in range(100):
        grid = rng.normal(0, 3, (20, 20))
        identity += tt_normalize(grid, box, math.inf) == float(np.sum(grid, dtype=np.float64))
    report(9, "TT-norm arithmetic", a == 50.0 and b == 100.0 and identity == 100,
           f"R=2.0 -> {a}, R=1.5 -> {b}, threshold=inf identity {identity}/100")


# 10 ------------------------------------------------------------------------

class _PieceStub(torch.nn.Module):
    """Each window's density holds ``c`` in one corner pixel, away from any box."""

    def __init__(self, c):
        super().__init__()
        self.c = c

    def forward(self, images, exemplars=None):
        out = torch.zeros(images.shape[:1] + images.shape[2:], dtype=torch.float64)
        out[:, -1, -1] = self.c
        return out


def test_ac10_tt_crop(report):
    c = 2.75
    img = np.random.default_rng(0).random((384, 384, 3)).astype(np.float32)
    boxes = [[10, 10, 16, 16]]
    cfg = InferenceConfig()
    via_model = tt_crop_predict(_PieceStub(c), img, boxes, cfg)
    via_fn = tt_crop_predict(None, img, boxes, cfg, count_fn=lambda piece, b: c)

    mismatches, cases = [], 0
    for h in np.arange(2.0, 20.5, 0.5):
        for w in (h, 30.0):
            sample = ImageSample(image=img, dots=np.zeros((0, 2)),
                                 boxes=[[100, 100, 100 + h, 100 + w], [200, 200, 230, 230]])
            pred = predict_count(_PieceStub(c), sample, 2, cfg)
            cases += 1
            if pred.ttcrop_applied != (min(h, w) < 10):
                mismatches.append((h, w))
    ok = via_model == 9 * c and via_fn == 9 * c and not mismatches
    report(10, "TT-crop", ok, f"stub total {via_model} / {via_fn} (9c = {9 * c}), "
                              f"gate correct on {cases - len(mismatches)}/{cases} box sizes")


# 11 ------------------------------------------------------------------------

def test_ac11_metrics_oracle(report):
    rng = np.random.default_rng(11)
    worst, ordered = 0.0, 0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        p = rng.uniform(0, 4000, n)
        g = rng.integers(0, 4000, n).astype(float)
        abs_sum = math.fsum(abs(float(a) - float(b)) for a, b in zip(p, g))
        sq_sum = math.fsum((float(a) - float(b)) ** 2 for a, b in zip(p, g))
        ref_mae, ref_rmse = abs_sum / n, math.sqrt(sq_sum / n)
        m, r = mae(p, g), rmse(p, g)
        worst = max(worst, abs(m - ref_mae) / max(1.0, ref_mae), abs(r - ref_rmse) / max(1.0, ref_rmse))
        ordered += r >= m
    report(11, "metrics oracle", worst <= 1e-9 and ordered == 1000,
           f"max deviation {worst:.1e}, rmse >= mae on {ordered}/1000")


# 12 ------------------------------------------------------------------------

def test_ac12_end_to_end(report, tmp_path):
    data, run = tmp_path / "data", tmp_path / "run"
    codes = [
        main(["make-toy-data", "--n", "40", "--seed", "0", "--out-dir", str(data)]),
        main(["pretrain", "--toy", "--data-dir", str(data), "--steps", "50", "--seed", "0",
              "--out-dir", str(run)]),
        main(["finetune", "--toy", "--data-dir", str(data), "--init", str(run / "mae.pt"),
              "--steps", "100", "--seed", "0", "--out-dir", str(run)]),
    ]
    reports = {}
    for shots in (3, 0):
        path = run / f"eval_{shots}.json"
        codes.append(main(["eval", "--checkpoint", str(run / "countr.pt"), "--data-dir", str(data),
                           "--split", "val", "--shots", str(shots), "--report", str(path),
                           "--out-dir", str(run)]))
        reports[shots] = EvalResult.from_dict(json.loads(path.read_text()))
    ids = [r.image_id for r in reports[3].per_image]
    named = ids[:2]
    (tmp_path / "exclude.txt").write_text("\n".join(named) + "\n")
    codes.append(main(["eval", "--checkpoint", str(run / "countr.pt"), "--data-dir", str(data),
                       "--split", "val", "--shots", "3", "--exclude", str(tmp_path / "exclude.txt"),
                       "--report", str(run / "eval_ex.json"), "--out-dir", str(run)]))
    ex = EvalResult.from_dict(json.loads((run / "eval_ex.json").read_text()))

    finite = all(math.isfinite(r.mae) and math.isfinite(r.rmse) and r.n_images == len(r.per_image) > 0
                 for r in reports.values())
    removed = set(ids) - {r.image_id for r in ex.per_image}
    excl_ok = removed == set(named) and ex.excluded_ids == sorted(named) and ex.n_images == len(ids) - 2
    ok = all(c == 0 for c in codes) and finite and excl_ok
    report(12, "end-to-end pipeline", ok,
           f"exit codes {codes}, 3-shot MAE {reports[3].mae:.2f}, 0-shot MAE {reports[0].mae:.2f}, "
           f"excluded {sorted(removed)}")
