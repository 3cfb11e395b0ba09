"""Acceptance checks, one test per criterion.

Each test prints a ``[PASS]`` / ``[FAIL]`` line (also collected into the
terminal summary) and asserts its own runtime budget.
"""
import contextlib
import dataclasses
import io
import math
import time

import numpy as np
import pytest
from conftest import CRITERIA_LINES, numeric_grad, rel_err

from lstn import dataio, tnsr
from lstn.cli import run_cli
from lstn.dataio import SynthConfig, VideoAnnotation
from lstn.density import count, rasterize_density
from lstn.evaluation import mae_mse
from lstn.experiments import benchmark, run_ablation
from lstn.lst import BlockGrid, block_similarity, lst_loss, warp
from lstn.regressor import RegressorConfig, forward_batch, init_model, reg_loss
from lstn.tensor import Tensor, precision
from lstn.trainer import TrainConfig, load_checkpoint, new_model, prepare, save_checkpoint, total_loss, train


@contextlib.contextmanager
def criterion(number: int, title: str, budget_s: float):
    t0 = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - t0
        assert elapsed < budget_s, f"runtime {elapsed:.1f}s exceeds {budget_s}s"
    except BaseException as exc:
        line = f"[FAIL] criterion {number}: {title} ({time.perf_counter() - t0:.1f}s) {exc}"
        print(line)
        CRITERIA_LINES.append(line)
        raise
    line = f"[PASS] criterion {number}: {title} ({elapsed:.1f}s)"
    print(line)
    CRITERIA_LINES.append(line)


# -- 1 -----------------------------------------------------------------------

GRAD_CONFIG = RegressorConfig(channels=(4, 4, 4, 1), downsample=2, use_batch_norm=True)
LAM = 0.5  # large enough that the warp term is visible in the combined gradient


def _gradcheck_instance():
    cfg = SynthConfig(frames=2, height=16, width=24, heads=6, seed=11)
    frames, ann = dataio.synth_video(cfg, "grad")
    gts = np.stack([rasterize_density([(x / 2, y / 2) for x, y in h], 8, 12).grid.data for h in ann.frames])
    rng = np.random.default_rng(0)
    with precision(np.float64):
        model = init_model(GRAD_CONFIG, seed=5)
        # move away from the init: non-trivial output scale and a non-identity localizer
        model.params["reg.3.weight"].data[...] = rng.normal(0, 0.3, size=(1, 4, 3, 3))
        model.params["reg.3.bias"].data[...] = 0.2
        model.params["loc.head.weight"].data[...] = rng.normal(0, 0.05, size=(6, 8))
        # zero biases put zero-input cells exactly on the relu kink, where
        # finite differences are meaningless
        for key in ("loc.0.bias", "loc.1.bias"):
            model.params[key].data[...] = rng.uniform(0.05, 0.2, size=8) * rng.choice([-1, 1], size=8)
        for key in ("reg.0.gamma", "reg.1.gamma", "reg.2.gamma", "reg.0.beta", "reg.1.beta", "reg.2.beta"):
            model.params[key].data[...] += rng.normal(0, 0.1, size=model.params[key].shape)
    return np.stack(frames).astype(np.float64), gts.astype(np.float64), model


def _losses(model, frames, gts):
    est = forward_batch(model, frames, training=True)
    l_reg = reg_loss(est, Tensor(gts, dtype=est.dtype))
    l_lst = lst_loss(model, list(frames), [est[0], est[1]], list(gts), BlockGrid(1, 2), beta=30.0)
    return {"regression": l_reg, "warp": l_lst, "combined": total_loss(l_reg, l_lst, LAM)}


def _structurally_zero(loss_name, key):
    # the regression loss never touches the localizer, and a bias feeding a
    # training-mode batch norm is cancelled by the mean subtraction
    if loss_name == "regression" and key.startswith("loc."):
        return True
    layer = key.split(".")[1] if key.startswith("reg.") else None
    return key.endswith(".bias") and f"reg.{layer}.gamma" in GRAD_PARAM_KEYS


GRAD_PARAM_KEYS = set(init_model(GRAD_CONFIG, 0).params)


def test_criterion_1_gradient_integrity():
    with criterion(1, "gradient integrity (float32 1e-3, float64 1e-5)", 120):
        frames, gts, model64 = _gradcheck_instance()
        model32 = model64.astype(np.float32)
        worst32 = worst64 = 0.0
        checks = 0
        for name in ("regression", "warp", "combined"):
            with precision(np.float64):
                model64.zero_grad()
                _losses(model64, frames, gts)[name].backward()
            model32.zero_grad()
            _losses(model32, frames.astype(np.float32), gts.astype(np.float32))[name].backward()

            def f():
                with precision(np.float64):
                    return _losses(model64, frames, gts)[name].item()

            oracles = {k: numeric_grad(f, p.data, eps=1e-6) for k, p in model64.params.items()}
            scale = math.sqrt(sum(float(np.sum(o * o)) for o in oracles.values()))
            assert scale > 0
            for key, p in model64.params.items():
                oracle = oracles[key]
                g64 = np.zeros(p.shape) if p.grad is None else p.grad
                g32 = model32.params[key].grad
                g32 = np.zeros(p.shape) if g32 is None else g32
                if _structurally_zero(name, key):
                    assert np.linalg.norm(oracle) <= 1e-7 * scale, key
                    assert np.linalg.norm(g64) <= 1e-9 * scale and np.linalg.norm(g32) <= 1e-5 * scale, key
                    continue
                assert np.linalg.norm(oracle) > 1e-7 * scale, f"{name}/{key}: vacuous check"
                e64, e32 = rel_err(g64, oracle), rel_err(g32, oracle)
                worst64, worst32 = max(worst64, e64), max(worst32, e32)
                checks += 1
                assert e64 < 1e-5, f"{name}/{key}: float64 rel err {e64:.2e}"
                assert e32 < 1e-3, f"{name}/{key}: float32 rel err {e32:.2e}"
        print(f"max rel err float32 {worst32:.2e} float64 {worst64:.2e} over {checks} tensor checks")


# -- 2 -----------------------------------------------------------------------

def test_criterion_2_mass_conservation():
    with criterion(2, "mass conservation over 100 random annotation sets", 10):
        rng = np.random.default_rng(2)
        for _ in range(100):
            h, w = (int(v) for v in rng.integers(8, 120, size=2))
            n = int(rng.integers(0, 51))
            heads = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
            heads = np.minimum(heads, np.nextafter([w, h], 0))
            m = rasterize_density([tuple(p) for p in heads], h, w, sigma=3.0, renormalize=True)
            # independent integration in extended precision
            total = math.fsum(m.grid.data.astype(np.float64).ravel())
            assert abs(total - n) <= 1e-5 * max(n, 1), (h, w, n, total)
            assert abs(count(m) - n) <= 1e-5 * max(n, 1)


# -- 3 -----------------------------------------------------------------------

def _shift(a, dy, dx):
    out = np.zeros_like(a)
    h, w = a.shape
    for i in range(h):
        for j in range(w):
            if 0 <= i + dy < h and 0 <= j + dx < w:
                out[i, j] = a[i + dy, j + dx]
    return out


def test_criterion_3_warp_oracles():
    with criterion(3, "warp oracles (identity, integer shift, half-cell)", 60):
        rng = np.random.default_rng(3)
        ident = np.array([[1, 0, 0], [0, 1, 0]], dtype=np.float32)
        for _ in range(20):
            h, w = (int(v) for v in rng.integers(1, 40, size=2))
            src = rng.uniform(0, 1, size=(h, w)).astype(np.float32)
            out = warp(Tensor(src), Tensor(ident)).data
            assert out.tobytes() == src.tobytes()
        for _ in range(20):
            h, w = (int(v) for v in rng.integers(2, 40, size=2))
            dy, dx = int(rng.integers(-h, h + 1)), int(rng.integers(-w, w + 1))
            src = rng.uniform(0, 1, size=(h, w)).astype(np.float32)
            theta = np.array([[1, 0, 2 * dx / w], [0, 1, 2 * dy / h]], dtype=np.float32)
            out = warp(Tensor(src), Tensor(theta)).data
            np.testing.assert_array_equal(out, _shift(src, dy, dx))
        for _ in range(20):
            h, w = (int(v) for v in rng.integers(2, 40, size=2))
            src = rng.uniform(0, 1, size=(h, w)).astype(np.float32)
            s64 = src.astype(np.float64)
            if rng.random() < 0.5:
                sign = int(rng.choice([-1, 1]))
                theta = np.array([[1, 0, sign / w], [0, 1, 0]], dtype=np.float32)
                nb = _shift(s64, 0, sign)
            else:
                sign = int(rng.choice([-1, 1]))
                theta = np.array([[1, 0, 0], [0, 1, sign / h]], dtype=np.float32)
                nb = _shift(s64, sign, 0)
            expected = 0.5 * s64 + 0.5 * nb
            out = warp(Tensor(src), Tensor(theta)).data
            assert np.max(np.abs(out - expected)) <= 1e-6


# -- 4 -----------------------------------------------------------------------

def test_criterion_4_similarity_contract():
    with criterion(4, "similarity contract", 10):
        rng = np.random.default_rng(4)
        base = rng.uniform(0, 255, size=(16, 12))
        assert block_similarity(base, base.copy(), 30.0) == 1.0
        noise = rng.normal(size=base.shape)
        values = [block_similarity(base, base + level * noise, 30.0) for level in np.linspace(1, 60, 10)]
        assert all(a > b for a, b in zip(values, values[1:])), values
        s = block_similarity(np.full((8, 8), 90.0), np.full((8, 8), 120.0), 30.0)
        assert abs(s - math.exp(-0.5)) <= 1e-6


# -- 5 -----------------------------------------------------------------------

def _brute_mae_mse(z, zh):
    n = len(z)
    abs_sum = 0.0
    sq_sum = 0.0
    for a, b in zip(z, zh):
        d = float(a) - float(b)
        abs_sum += d if d >= 0 else -d
        sq_sum += d * d
    return abs_sum / n, (sq_sum / n) ** 0.5


def test_criterion_5_metric_oracle():
    with criterion(5, "metric oracle on 1000 random lists", 30):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            n = int(rng.integers(1, 200))
            z = rng.integers(0, 100, size=n).astype(float)
            zh = z + rng.normal(0, rng.uniform(0.01, 20), size=n)
            mae, mse = mae_mse(list(z), list(zh))
            bm, bs = _brute_mae_mse(z, zh)
            assert abs(mae - bm) <= 1e-9 * max(abs(bm), 1e-300)
            assert abs(mse - bs) <= 1e-9 * max(abs(bs), 1e-300)


# -- 6 -----------------------------------------------------------------------

ABLATION_EPOCHS = dict(pretrain_epochs=6, finetune_epochs=3)
ABLATION_SEEDS = (0, 1, 2)


def test_criterion_6_ablation_trend():
    with criterion(6, "ablation trend (full <= 1.05 x no-warp-loss, weights-one >= 0.95 x full)", 20 * 60):
        train_v, test_v = benchmark(seed=7, n_train=20, n_test=10, frames=40, height=64, width=96)
        cfg = TrainConfig(lam=0.001, similarity="intensity", **ABLATION_EPOCHS)
        res = run_ablation(train_v, test_v, cfg, ABLATION_SEEDS, variants=("full", "ones", "no_lst"))
        full, ones, base = (res.median_mae(v) for v in ("full", "ones", "no_lst"))
        print(f"median MAE full {full:.4f} ones {ones:.4f} lambda=0 {base:.4f}")
        for v in res.scores:
            print(v, {s: round(m, 4) for s, (m, _) in res.scores[v].items()})
        assert full <= 1.05 * base, (full, base)
        assert ones >= 0.95 * full, (ones, full)


# -- 7 -----------------------------------------------------------------------

def _pipeline(root):
    def cli(*argv):
        code = run_cli([str(a) for a in argv], out=io.StringIO(), err=io.StringIO())
        assert code == 0, argv

    cli("synth", "--out", root / "data", "--videos", 3, "--frames", 8, "--height", 32, "--width", 48,
        "--heads", 8, "--max-heads", 14, "--seed", 21)
    cli("density", "--annotations", root / "data" / "vid000" / "annotations.fda", "--out", root / "dens",
        "--downsample", 2)
    cli("train", "--data", root / "data", "--out", root / "ck", "--pretrain-epochs", 2,
        "--finetune-epochs", 2, "--seed", 4)
    cli("eval", "--data", root / "data", "--checkpoint", root / "ck", "--out", root / "report.txt")
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_7_determinism(tmp_path):
    with criterion(7, "pipeline determinism (synth, density, train 2+2, eval)", 5 * 60):
        a = _pipeline(tmp_path / "a")
        b = _pipeline(tmp_path / "b")
        assert a.keys() == b.keys()
        assert any(str(k).startswith("ck") for k in a) and any(str(k) == "report.txt" for k in a)
        diff = [str(k) for k in a if a[k] != b[k]]
        assert not diff, diff


# -- 8 -----------------------------------------------------------------------

def test_criterion_8_format_round_trips(tmp_path):
    with criterion(8, "format round trips (FDA1, P5, TNSR, checkpoints)", 60):
        rng = np.random.default_rng(8)
        for i in range(20):
            w, h = (int(v) for v in rng.integers(1, 400, size=2))
            frames = [[(float(rng.uniform(0, w)), float(rng.uniform(0, h))) for _ in range(rng.integers(0, 8))]
                      for _ in range(rng.integers(1, 6))]
            frames = [[(min(x, np.nextafter(w, 0)), min(y, np.nextafter(h, 0))) for x, y in f] for f in frames]
            ann = VideoAnnotation("v", w, h, frames)
            dataio.save_annotations(ann, tmp_path / "a.fda")
            text = (tmp_path / "a.fda").read_bytes()
            back = dataio.load_annotations(tmp_path / "a.fda", "v")
            assert back == ann
            dataio.save_annotations(back, tmp_path / "b.fda")
            assert (tmp_path / "b.fda").read_bytes() == text

            px = rng.integers(0, 256, size=tuple(rng.integers(1, 30, size=2)))
            dataio.save_frame(px, tmp_path / "a.pgm")
            blob = (tmp_path / "a.pgm").read_bytes()
            dataio.save_frame(dataio.load_frame(tmp_path / "a.pgm"), tmp_path / "b.pgm")
            assert (tmp_path / "b.pgm").read_bytes() == blob

            arr = rng.normal(size=tuple(rng.integers(1, 6, size=rng.integers(1, 5)))).astype(np.float32)
            tnsr.save(arr, tmp_path / "a.tnsr")
            blob = (tmp_path / "a.tnsr").read_bytes()
            back_arr = tnsr.load(tmp_path / "a.tnsr")
            assert back_arr.tobytes() == arr.tobytes()
            tnsr.save(back_arr, tmp_path / "b.tnsr")
            assert (tmp_path / "b.tnsr").read_bytes() == blob

        videos = dataio.synth_dataset(2, SynthConfig(frames=3, height=16, width=24), seed=8)
        for i, bn in enumerate((False, True)):
            cfg = TrainConfig(channels=(4, 4, 1), batch_size=2, pretrain_epochs=1, finetune_epochs=1,
                              use_batch_norm=bn, seed=i)
            model = new_model(cfg)
            train(model, prepare(videos, cfg), cfg)
            save_checkpoint(model, cfg, tmp_path / f"ck{i}a")
            loaded, cfg2 = load_checkpoint(tmp_path / f"ck{i}a")
            assert dataclasses.asdict(cfg2) == dataclasses.asdict(cfg)
            save_checkpoint(loaded, cfg2, tmp_path / f"ck{i}b")
            files = sorted(p.name for p in (tmp_path / f"ck{i}a").iterdir())
            assert files == sorted(p.name for p in (tmp_path / f"ck{i}b").iterdir())
            for name in files:
                assert (tmp_path / f"ck{i}a" / name).read_bytes() == (tmp_path / f"ck{i}b" / name).read_bytes()
