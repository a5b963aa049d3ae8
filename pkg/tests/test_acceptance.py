"""End-to-end acceptance checks, one test per criterion.

Each test records a ``PASS``/``FAIL`` line (shown in the pytest terminal
summary and on stdout with ``-s``) before asserting, so a failing criterion
still reports its measured values.
"""
import copy
import json
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES, he_init, rand_images, tiny_discriminator, tiny_generator
from oracles import ReferencePool, closed_form_fid_1d, diagonal_fid, finite_difference_check, reference_cyclegan_step
from smcyclegan import data, evaluation, losses, segmenter, training
from smcyclegan.evaluation import FeatureStatistics, frechet_distance
from smcyclegan.segmenter import UNet, segmenter_loss


def report(number, title, ok, detail, started):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail}; {time.perf_counter() - started:.1f}s)"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def gen(seed):
    return torch.Generator().manual_seed(seed)


@pytest.fixture(scope="module")
def toy32():
    # 200 training images per domain plus 50 held out for the segmenter check
    return data.generate_toy_domains(data.ToySpec(image_size=32, count=250, seed=7))


def head(ds, sl):
    return data.ImageDataset(ds.domain, ds.entries[sl], ds.images[sl], ds.masks[sl])


@pytest.fixture(scope="module")
def trained_segmenter(toy32):
    train = slice(0, 200)
    images = torch.cat([toy32.x.images[train], toy32.y.images[train]])
    masks = torch.cat([toy32.x.masks[train], toy32.y.masks[train]])
    params, _ = segmenter.train_segmenter(images, masks, segmenter.SegTrainConfig(epochs=15))
    return params


# 1 ---------------------------------------------------------------------------

def test_criterion_1_identity_mask_reduction():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        g = gen(seed)
        D = tiny_discriminator(seed)
        size = int(torch.randint(16, 33, (1,), generator=g))
        n = int(torch.randint(1, 4, (1,), generator=g))
        real, fake = rand_images(g, n, size), rand_images(g, n, size)
        ones = torch.ones(n, 1, size, size, dtype=torch.float64)
        with torch.no_grad():
            rs, fs = D(real), D(fake)
            pairs = [
                (losses.masked_adversarial_loss_D(D, real, ones, fake, ones), losses.adversarial_loss_D(rs, fs)),
                (losses.masked_adversarial_loss_G(D, fake, ones), losses.adversarial_loss_G(fs)),
            ]
        worst = max(worst, *(abs(a.item() - b.item()) for a, b in pairs))
    report(1, "all-ones masks reduce to vanilla losses", worst <= 1e-9, f"max |diff| = {worst:.2e} over 100 triples", t0)


# 2 ---------------------------------------------------------------------------

def soft_mask(g, n, size):
    return torch.rand(n, 1, size, size, generator=g, dtype=torch.float64)


def loss_cases(seed):
    """(name, closure, parameters, owning modules) for every loss, on networks of at most 5k parameters."""
    g = gen(1000 + seed)
    G, F = tiny_generator(seed), tiny_generator(seed + 100)
    D = tiny_discriminator(seed)
    x, y = rand_images(g, 1), rand_images(g, 1)
    mx, my = soft_mask(g, 1, 16), soft_mask(g, 1, 16)
    torch.manual_seed(seed)
    unet = he_init(UNet(base_channels=2, depth=2).double())
    # train-mode BatchNorm without running-stat updates: same outputs, and pure under vmap
    torch.func.replace_all_batch_norm_modules_(unet)
    seg_truth = (torch.rand(1, 1, 16, 16, generator=g) > 0.5).double()
    gen_params = list(G.parameters()) + list(F.parameters())
    for net in (G, F, D, unet):
        assert sum(p.numel() for p in net.parameters()) <= 5000

    def components():
        gx, fy = G(x), F(y)
        return (losses.adversarial_loss_G(D(gx)), losses.adversarial_loss_G(D(fy)),
                losses.cycle_consistency_loss(x, F(gx), y, G(fy)), losses.identity_loss(y, G(y), x, F(x)))

    return [
        ("adversarial_loss_D", lambda: losses.adversarial_loss_D(D(y), D(x)), list(D.parameters()), [D]),
        ("adversarial_loss_G", lambda: losses.adversarial_loss_G(D(G(x))), list(G.parameters()), [G, D]),
        ("masked_adversarial_loss_D", lambda: losses.masked_adversarial_loss_D(D, y, my, x, mx),
         list(D.parameters()), [D]),
        ("masked_adversarial_loss_G", lambda: losses.masked_adversarial_loss_G(D, G(x), mx),
         list(G.parameters()), [G, D]),
        ("cycle_consistency_loss", lambda: losses.cycle_consistency_loss(x, F(G(x)), y, G(F(y))), gen_params, [G, F]),
        ("identity_loss", lambda: losses.identity_loss(y, G(y), x, F(x)), gen_params, [G, F]),
        # full_objective checks finiteness with Python floats, so it runs outside vmap on each member
        ("full_objective", components, gen_params, [G, F, D]),
        ("segmenter_loss", lambda: segmenter_loss(unet(x), seg_truth), list(unet.parameters()), [unet]),
    ]


def test_criterion_2_gradients_match_finite_differences():
    t0 = time.perf_counter()
    worst, worst_unresolved, failures = 0.0, 0.0, []
    for seed in range(5):
        for name, fn, params, modules in loss_cases(seed):
            combine = (lambda *c: losses.full_objective(*c).total) if name == "full_objective" else None
            out = finite_difference_check(fn, params, h=1e-5, details=True, modules=modules, combine=combine)
            share = out["unresolved"] / out["coords"]
            worst, worst_unresolved = max(worst, out["rel_error"]), max(worst_unresolved, share)
            if out["rel_error"] > 1e-3 or share > 0.01:
                failures.append(f"{name}@seed{seed}: rel={out['rel_error']:.2e} unresolved={share:.2%}")
    detail = f"max rel error {worst:.2e}, max unresolved {worst_unresolved:.2%}, 8 losses x 5 seeds"
    if failures:
        detail += "; " + "; ".join(failures)
    report(2, "analytic gradients match central differences", not failures, detail, t0)


# 3 ---------------------------------------------------------------------------

def stats(mu, cov):
    mu, cov = np.atleast_1d(np.asarray(mu, float)), np.atleast_2d(np.asarray(cov, float))
    return FeatureStatistics(mu, cov, 2)


def test_criterion_3_fid_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    errors = []
    feats = rng.normal(size=(400, 16))
    a = evaluation.statistics_from_features(feats)
    errors.append(abs(frechet_distance(a, a)))
    errors.append(abs(frechet_distance(stats(0, 1), stats(1, 1)) - 1.0))
    errors.append(abs(frechet_distance(stats(0, 4), stats(0, 1)) - 1.0))
    errors.append(abs(closed_form_fid_1d(0, 4, 0, 1) - 1.0))
    for _ in range(50):
        d = int(rng.integers(1, 33))
        mu_a, mu_b = rng.normal(size=d), rng.normal(size=d)
        var_a, var_b = rng.uniform(0.05, 5, size=d), rng.uniform(0.05, 5, size=d)
        got = frechet_distance(stats(mu_a, np.diag(var_a)), stats(mu_b, np.diag(var_b)))
        errors.append(abs(got - diagonal_fid(mu_a, var_a, mu_b, var_b)))
    worst = max(errors)
    report(3, "FID closed-form oracles", worst <= 1e-6, f"max |error| = {worst:.2e}", t0)


# 4 ---------------------------------------------------------------------------

def test_criterion_4_degenerates_to_cyclegan(toy32):
    t0 = time.perf_counter()
    cfg = training.toy_train_config(mask_prob_start=0.0, mask_prob_end=0.0, seed=11)
    state = training.init_state(cfg, None, dtype=torch.float64)
    G, F, D_X, D_Y = (copy.deepcopy(n) for n in (state.G, state.F, state.D_X, state.D_Y))
    betas = (cfg.beta1, cfg.beta2)
    opt_G = torch.optim.Adam(list(G.parameters()) + list(F.parameters()), lr=cfg.lr, betas=betas)
    opt_D = torch.optim.Adam(list(D_X.parameters()) + list(D_Y.parameters()), lr=cfg.lr, betas=betas)
    pool_x = ReferencePool(cfg.pool_size, copy.deepcopy(state.pool_x.rng))
    pool_y = ReferencePool(cfg.pool_size, copy.deepcopy(state.pool_y.rng))
    rng = np.random.default_rng(11)
    worst, masked = 0.0, False
    for _ in range(10):
        ix, iy = rng.choice(200, cfg.batch_size, replace=False), rng.choice(200, cfg.batch_size, replace=False)
        x, y = toy32.x.images[ix].double(), toy32.y.images[iy].double()
        got = training.training_step(state, x, y, cfg).record()
        want = reference_cyclegan_step(G, F, D_X, D_Y, opt_G, opt_D, pool_x, pool_y, x, y, cfg.lam, cfg.d_loss_weight)
        masked |= got["mask_used"]
        worst = max(worst, *(abs(got[k] - v) for k, v in want.items()))
    ok = worst <= 1e-9 and not masked
    report(4, "p=0 training matches mask-free reference", ok, f"max |diff| = {worst:.2e} over 10 steps", t0)


# 5 ---------------------------------------------------------------------------

def test_criterion_5_schedule_and_pool():
    t0 = time.perf_counter()
    cfg = training.TrainConfig()
    probs = [training.mask_probability(e, cfg) for e in range(cfg.epochs)]
    schedule_ok = (probs[0] == pytest.approx(0.1) and probs[-1] == pytest.approx(1.0)
                   and all(b >= a for a, b in zip(probs, probs[1:])))
    rng = np.random.default_rng(5)
    pool = training.ImagePool(cfg.pool_size, np.random.default_rng(6))
    largest = 0
    for op in range(10_000):
        n = int(rng.integers(1, 5))
        out = pool.query_batch(torch.full((n, 3, 2, 2), float(op)))
        assert out.shape == (n, 3, 2, 2)
        largest = max(largest, len(pool))
    ok = schedule_ok and largest <= 3
    report(5, "mask schedule 0.1 -> 1.0 monotone; pool bounded", ok,
           f"p(0)={probs[0]:.3f}, p(last)={probs[-1]:.3f}, max pool size {largest} over 10k queries", t0)


# 6 ---------------------------------------------------------------------------

def test_criterion_6_segmenter_iou(toy32, trained_segmenter):
    t0 = time.perf_counter()
    held = slice(200, 250)
    # 50 held-out images from each domain
    images = torch.cat([toy32.x.images[held], toy32.y.images[held]])
    masks = torch.cat([toy32.x.masks[held], toy32.y.masks[held]])
    score = segmenter.iou(segmenter.segment_batch(trained_segmenter, images), masks, threshold=0.5)
    report(6, "U-Net IoU on held-out toy images after 15 epochs", score >= 0.9, f"IoU = {score:.4f}", t0)


# 7 ---------------------------------------------------------------------------

def subject_color(images, masks):
    unit = (images + 1) / 2
    return (unit * masks).sum(dim=(0, 2, 3)) / (masks.sum() + 1e-12)


@pytest.mark.slow
def test_criterion_7_toy_translation_direction(toy32, trained_segmenter, tmp_path):
    t0 = time.perf_counter()
    X, Y = head(toy32.x, slice(0, 200)), head(toy32.y, slice(0, 200))
    extractor = evaluation.get_extractor("randconv")
    ref = evaluation.feature_statistics(Y.images, extractor)
    fid_orig = frechet_distance(evaluation.feature_statistics(X.images, extractor), ref)
    target = subject_color(Y.images, Y.masks)
    d_orig = float((subject_color(X.images, X.masks) - target).norm())
    wins, drops, rows = 0, [], []
    for seed in range(3):
        cfg = training.toy_train_config(epochs=20, steps_per_epoch=50, seed=seed)
        assert cfg.epochs * cfg.steps_per_epoch <= 2000
        state = training.train(cfg, X, Y, trained_segmenter, tmp_path / f"seed{seed}")
        gx = training.translate_batch(state.G, X.images)
        fid_t = frechet_distance(evaluation.feature_statistics(gx, extractor), ref)
        drop = 1.0 - float((subject_color(gx, X.masks) - target).norm()) / d_orig
        wins += fid_t < fid_orig
        drops.append(drop)
        rows.append({"seed": seed, "fid_translated": fid_t, "fid_original": fid_orig, "color_drop": drop})
    (tmp_path / "criterion7.json").write_text(json.dumps(rows, indent=1))
    ok = wins >= 2 and all(d >= 0.5 for d in drops)
    detail = (f"FID translated<original in {wins}/3 seeds (original {fid_orig:.5f}, translated "
              + ", ".join(f"{r['fid_translated']:.5f}" for r in rows)
              + "); colour drop " + ", ".join(f"{d:.0%}" for d in drops))
    report(7, "toy translation moves X toward Y", ok, detail, t0)


# 8 ---------------------------------------------------------------------------

def test_criterion_8_determinism_and_resume(toy32, trained_segmenter, tmp_path):
    t0 = time.perf_counter()
    X, Y = head(toy32.x, slice(0, 200)), head(toy32.y, slice(0, 200))
    cfg = training.toy_train_config(epochs=5, steps_per_epoch=4, checkpoint_every=1, seed=8,
                                    mask_prob_start=0.5, mask_prob_end=1.0)
    full = training.train(cfg, X, Y, trained_segmenter, tmp_path / "a")
    training.train(cfg, X, Y, trained_segmenter, tmp_path / "b")
    rerun_equal = (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    resumed = training.train(cfg, X, Y, None, tmp_path / "c",
                             resume_from=tmp_path / "a" / "checkpoints" / "epoch_0003.smcg")
    full_lines = (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()
    tail = (tmp_path / "c" / "metrics.jsonl").read_text().splitlines()
    log_equal = len(tail) == 8 and tail == full_lines[-8:]
    params_equal = all(torch.equal(v, resumed.networks[k].state_dict()[name])
                       for k, net in full.networks.items() for name, v in net.state_dict().items())
    final_equal = (tmp_path / "a" / "final.smcg").read_bytes() == (tmp_path / "c" / "final.smcg").read_bytes()
    ok = rerun_equal and log_equal and params_equal and final_equal
    detail = f"rerun log equal={rerun_equal}, resumed log equal={log_equal}, weights equal={params_equal}"
    report(8, "fixed-seed reruns and mid-run resume are bit-exact", ok, detail, t0)


# 9 ---------------------------------------------------------------------------

def test_criterion_9_cycle_identity_trivia():
    t0 = time.perf_counter()
    g = gen(9)
    x, y = rand_images(g, 2), rand_images(g, 2)
    identity = torch.nn.Identity()
    cyc = losses.cycle_consistency_loss(x, identity(identity(x)), y, identity(identity(y))).item()
    idt = losses.identity_loss(y, identity(y), x, identity(x)).item()
    total = losses.full_objective(1.0, 2.0, 0.5, 0.2, lam=10.0).total
    total = float(total)
    ok = cyc == 0.0 and idt == 0.0 and total == 9.0
    report(9, "identity generators give zero cycle/identity; objective arithmetic", ok,
           f"cycle={cyc}, identity={idt}, total={total!r}", t0)
