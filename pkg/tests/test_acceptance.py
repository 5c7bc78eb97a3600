"""Acceptance criteria 1-8. Each test prints one PASS/FAIL line; the terminal
summary lists every criterion's overall status."""

import math
import time

import numpy as np
import pytest
import torch
from scipy import integrate

from helpers import central_difference_check
from ssdca.cli import main as cli_main
from ssdca.config import ModelConfig, TrainConfig, paper_profile, run_config_from_dict
from ssdca.data import ImageStore, build_pairs, load_mask, read_manifest
from ssdca.evaluation import (
    PredictionRecord,
    compute_metrics,
    paired_t_test,
    topk_aggregate,
)
from ssdca.fusion import ClassificationHead, DualCrossAttention, build_model, gap
from ssdca.interpret import (
    attention_correspondence,
    cell_center_in_mask,
    cell_coverage,
    cluster_metrics,
    gradcam,
    iou,
    top_fraction_mask,
)
from ssdca.swin import SwinBlock
from ssdca.training import AdamState, adam_step, cross_validate, lr_schedule, set_determinism


def report(n, ok, detail=""):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


# -- 1. architecture shapes ------------------------------------------------


@pytest.mark.criterion(1, "architecture shapes")
def test_c1_architecture_shapes():
    t0 = time.perf_counter()
    model = build_model(ModelConfig(encoder=paper_profile()), seed=0).eval()
    with torch.no_grad():
        image = torch.randn(1, 3, 224, 224)
        outs = model.encoder(image)
        width = model.embed(image, image).shape[-1]
    grids = [o.grid for o in outs]
    channels = [o.channels for o in outs]
    elapsed = time.perf_counter() - t0
    ok = (
        grids == [(56, 56), (28, 28), (14, 14), (7, 7)]
        and channels == [96, 192, 384, 768]
        and [o.tokens.shape[1] for o in outs] == [3136, 784, 196, 49]
        and width == 1536
        and model.head.in_dim == 1536
        and elapsed < 60
    )
    report(1, ok, f"grids={grids} channels={channels} head_in={width} {elapsed:.1f}s")
    assert grids == [(56, 56), (28, 28), (14, 14), (7, 7)]
    assert channels == [96, 192, 384, 768]
    assert width == 1536 and model.head.in_dim == 1536
    assert elapsed < 60


# -- 2. DCA properties -----------------------------------------------------


def _random_dca(gen):
    heads = int(torch.randint(1, 5, (1,), generator=gen))
    dim = heads * int(torch.randint(1, 5, (1,), generator=gen)) * 2
    tokens = int(torch.randint(2, 50, (1,), generator=gen))
    torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=gen)))
    dca = DualCrossAttention(dim, heads)
    with torch.no_grad():
        for p in dca.parameters():
            p.normal_(0, 0.5)
    return dca, tokens, dim


@pytest.mark.criterion(2, "DCA properties")
def test_c2_dca_properties():
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(2)
    worst_row = 0.0
    n = 120
    for _ in range(n):
        dca, t, c = _random_dca(gen)
        f_pre = torch.randn(2, t, c, generator=gen)
        f_post = torch.randn(2, t, c, generator=gen)
        with torch.no_grad():
            h_pre, h_post, (a_pre, a_post) = dca(f_pre, f_post, return_weights=True)
            s_pre, s_post = dca(f_post, f_pre)
            # mirror-swap symmetry: swapping the inputs swaps the outputs
            assert torch.allclose(s_pre, h_post, atol=1e-5) and torch.allclose(s_post, h_pre, atol=1e-5)
            # identical inputs give identical fused features
            i_pre, i_post = dca(f_pre, f_pre)
            assert torch.equal(i_pre, i_post)
            # CA(F_pre) ignores the token order of F_post
            perm = torch.randperm(t, generator=gen)
            ca, _ = dca.cross_attend(f_pre, f_post)
            ca_perm, _ = dca.cross_attend(f_pre, f_post[:, perm])
            assert torch.allclose(ca, ca_perm, atol=1e-5)
            for a in (a_pre, a_post):
                assert torch.all(a >= 0)
                worst_row = max(worst_row, float((a.sum(-1) - 1).abs().max()))
    elapsed = time.perf_counter() - t0
    ok = worst_row <= 1e-6 and elapsed < 60
    report(2, ok, f"{n} instances, max |row sum - 1| = {worst_row:.2e}, {elapsed:.1f}s")
    assert worst_row <= 1e-6
    assert elapsed < 60


# -- 3. gradients ----------------------------------------------------------


@pytest.mark.criterion(3, "finite-difference gradients")
def test_c3_gradients():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    blk = SwinBlock(8, 2, 7, shift=0).double()
    with torch.no_grad():
        for p in blk.parameters():
            p.normal_(0, 0.5)
    x = torch.randn(1, 49, 8, dtype=torch.float64)
    target = torch.randn(1, 49, 8, dtype=torch.float64)
    err_block = central_difference_check(
        lambda: ((blk(x, (7, 7)) - target) ** 2).sum(), list(blk.parameters()) + [x], n_coords=48
    )

    dca = DualCrossAttention(8, 2).double()
    head = ClassificationHead(16, hidden=6, dropout=0.2).double().eval()
    with torch.no_grad():
        for p in list(dca.parameters()) + list(head.parameters()):
            p.normal_(0, 0.5)
    f_pre = torch.randn(1, 4, 8, dtype=torch.float64)
    f_post = torch.randn(1, 4, 8, dtype=torch.float64)

    def dca_loss():
        h_pre, h_post = dca(f_pre, f_post)
        logit = head(torch.cat([gap(h_pre), gap(h_post)], -1))
        return torch.nn.functional.binary_cross_entropy_with_logits(logit, torch.ones_like(logit))

    err_dca = central_difference_check(
        dca_loss, list(dca.parameters()) + list(head.parameters()) + [f_pre, f_post], n_coords=48
    )
    elapsed = time.perf_counter() - t0
    ok = err_block <= 1e-4 and err_dca <= 1e-4 and elapsed < 300
    report(3, ok, f"swin block rel err {err_block:.2e}, DCA+head rel err {err_dca:.2e}, {elapsed:.1f}s")
    assert err_block <= 1e-4
    assert err_dca <= 1e-4
    assert elapsed < 300


# -- 4. optimizer and schedule ---------------------------------------------


def _scalar_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
    return theta


@pytest.mark.criterion(4, "optimizer and schedule")
def test_c4_optimizer_schedule():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        theta0 = float(rng.normal())
        grads = rng.normal(size=12).tolist()
        lr = float(rng.uniform(1e-4, 0.1))
        p = torch.tensor([theta0], dtype=torch.float64)
        state = AdamState()
        for g in grads:
            adam_step({"w": p}, {"w": torch.tensor([g], dtype=torch.float64)}, state, lr)
        worst = max(worst, abs(float(p) - _scalar_adam(theta0, grads, lr)))
    p = torch.zeros(1, dtype=torch.float64)
    adam_step({"w": p}, {"w": torch.ones(1, dtype=torch.float64)}, AdamState(), 0.1)
    first_step = float(p)

    cfg = TrainConfig()
    lrs = (lr_schedule(0, cfg), lr_schedule(10, cfg), lr_schedule(29, cfg))
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    exact = -0.1 / (1.0 + 1e-8)
    ok = worst <= 1e-12 and abs(first_step - exact) <= 1e-12 and lrs == (2e-5, 2e-4, 1e-5)
    report(4, ok, f"max |adam - oracle| = {worst:.1e}, first step {first_step!r}, lr(0,10,29) = {lrs}")
    assert worst <= 1e-12
    assert abs(first_step - exact) <= 1e-12 and abs(first_step + 0.1) < 1e-8
    assert lrs == (2e-5, 2e-4, 1e-5)


# -- 5. metrics and statistics ---------------------------------------------


def _bruteforce_metrics(probs, labels, threshold=0.5):
    tp = fp = tn = fn = 0
    for p, y in zip(probs, labels):
        if p >= threshold:
            if y == 1:
                tp += 1
            else:
                fp += 1
        else:
            if y == 1:
                fn += 1
            else:
                tn += 1
    sens = 100.0 * tp / (tp + fn)
    spec = 100.0 * tn / (tn + fp)
    return tp, fp, tn, fn, sens, spec, (sens + spec) / 2.0


def _t_pdf(x, dof):
    c = math.gamma((dof + 1) / 2) / (math.sqrt(dof * math.pi) * math.gamma(dof / 2))
    return c * (1 + x * x / dof) ** (-(dof + 1) / 2)


def _oracle_p(t, dof):
    tail, _ = integrate.quad(_t_pdf, abs(t), np.inf, args=(dof,), epsabs=1e-14, epsrel=1e-12)
    return 2.0 * tail


@pytest.mark.criterion(5, "metrics and statistics")
def test_c5_metrics_statistics():
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1  # both classes present
        probs = np.round(rng.uniform(0, 1, size=n), 2)  # hits the threshold exactly sometimes
        recs = [PredictionRecord(f"P{i}", "g", float(p), int(y)) for i, (p, y) in enumerate(zip(probs, labels))]
        m = compute_metrics(recs)
        got = (m.tp, m.fp, m.tn, m.fn, m.sensitivity, m.specificity, m.balanced_accuracy)
        mismatches += got != _bruteforce_metrics(probs.tolist(), labels.tolist())

    fixture = paired_t_test([2, 4, 6], [1, 3, 7])
    fixture_ok = abs(fixture.t - 0.5) < 1e-12 and fixture.dof == 2 and abs(fixture.mean_diff - 1 / 3) < 1e-15

    z = np.random.default_rng(10).standard_normal(10)
    shifted = z + 0.3 + 0.5 * np.random.default_rng(11).standard_normal(10)
    res = paired_t_test(shifted, z)
    p_err = abs(res.p_two_sided - _oracle_p(res.t, res.dof))

    topk_cases = [
        ([0.9, 0.8, 0.1, 0.2], 3, (0.9 + 0.8 + 0.2) / 3),
        ([0.4], 3, 0.4),
        ([0.3, 0.7], 3, (0.7 + 0.3) / 2),
        ([0.5, 0.5, 0.5, 0.1], 3, (0.5 + 0.5 + 0.5) / 3),
        ([0.2, 0.6, 0.9], 1, 0.9),
        ([0.1, 0.2, 0.3, 0.4, 0.5], 5, (0.5 + 0.4 + 0.3 + 0.2 + 0.1) / 5),
    ]
    topk_ok = all(topk_aggregate(v, k) == want for v, k, want in topk_cases)
    ok = mismatches == 0 and fixture_ok and p_err <= 1e-6 and topk_ok
    report(5, ok, f"metric mismatches {mismatches}/1000, t-fixture {fixture.t:.6f}/dof {fixture.dof}, "
                  f"p err {p_err:.1e}, top-k fixtures {'ok' if topk_ok else 'MISMATCH'}")
    assert mismatches == 0
    assert fixture_ok
    assert p_err <= 1e-6
    assert topk_ok


# -- 6. end-to-end synthetic benchmark -------------------------------------


@pytest.fixture(scope="module")
def benchmark(benchmark_dataset, tmp_path_factory):
    """Full 5-fold run of every variant on the seeded 32-patient toy dataset."""
    records = read_manifest(benchmark_dataset)
    store = ImageStore(224)
    set_determinism(True)
    results = {}
    for variant in ("ssdca", "ssfc", "single"):
        run = run_config_from_dict({"model": {"variant": variant}}, profile="toy", seed=0)
        t0 = time.perf_counter()
        rep = cross_validate(records, run, store, tmp_path_factory.mktemp(variant))
        results[variant] = (rep, time.perf_counter() - t0)
    return results


@pytest.mark.slow
@pytest.mark.criterion(6, "end-to-end synthetic benchmark")
def test_c6a_ssdca_train_accuracy(benchmark):
    rep, _ = benchmark["ssdca"]
    peak = [max(f.curve("train", "accuracy")) for f in rep.folds]
    final = [f.curve("train", "accuracy")[-1] for f in rep.folds]
    ok = len(rep.folds) == 5 and not rep.failed and min(peak) >= 0.95
    report("6a", ok, f"per-fold peak train acc {np.round(peak, 3).tolist()}, final {np.round(final, 3).tolist()}")
    assert not rep.failed and len(rep.folds) == 5
    assert min(peak) >= 0.95


@pytest.mark.slow
@pytest.mark.criterion(6, "end-to-end synthetic benchmark")
def test_c6b_variant_ordering(benchmark):
    ba = {v: rep.summary()["balanced_accuracy"] for v, (rep, _) in benchmark.items()}
    ok = ba["ssdca"][0] >= ba["ssfc"][0] - 3.0 and ba["ssfc"][0] >= ba["single"][0] - 3.0
    report("6b", ok, "test BA " + ", ".join(f"{v} {m:.2f}+/-{s:.2f}" for v, (m, s) in ba.items()))
    assert ba["ssdca"][0] >= ba["ssfc"][0] - 3.0
    assert ba["ssfc"][0] >= ba["single"][0] - 3.0


@pytest.mark.slow
@pytest.mark.criterion(6, "end-to-end synthetic benchmark")
def test_c6c_runtime(benchmark):
    times = {v: t for v, (_, t) in benchmark.items()}
    ok = max(times.values()) < 1800
    report("6c", ok, "5-fold wall time " + ", ".join(f"{v} {t / 60:.1f} min" for v, t in times.items()))
    assert max(times.values()) < 1800


# -- 7. interpretability ---------------------------------------------------


@pytest.mark.criterion(7, "interpretability")
def test_c7_cluster_oracles():
    inter, intra = cluster_metrics(np.array([[0.0, 0.0], [3.0, 4.0]]), [0, 1])
    rng = np.random.default_rng(7)
    pts = np.vstack([rng.standard_normal((500, 2)), rng.standard_normal((500, 2)) + [10.0, 0.0]])
    mc_inter, mc_intra = cluster_metrics(pts, [0] * 500 + [1] * 500)
    ok = inter == 5.0 and intra == 0.0 and abs(mc_inter - 10) <= 0.2 and abs(mc_intra - math.sqrt(math.pi / 2)) <= 0.05
    report(7, ok, f"two-point ({inter}, {intra}); Gaussian inter {mc_inter:.3f} intra {mc_intra:.4f}")
    assert (inter, intra) == (5.0, 0.0)
    assert abs(mc_inter - 10) <= 0.2
    assert abs(mc_intra - math.sqrt(math.pi / 2)) <= 0.05


@pytest.mark.slow
@pytest.mark.criterion(7, "interpretability")
def test_c7_gradcam_lesion_iou(overfit_model):
    """Restaging -> last follow-up LR pairs: the regrowth lesion is planted in
    the follow-up image, so its GradCAM is compared with that image's mask."""
    model, records, _ = overfit_model
    store = ImageStore(224)
    pairs = [p for p in build_pairs(records, "test") if p.label == 1 and p.post.mask_path]
    scores = []
    for p in pairs:
        cam = gradcam(model, store.get(p.pre), store.get(p.post), target_class=1, branch="post")
        assert cam.shape == (224, 224) and cam.min() >= 0 and cam.max() <= 1
        scores.append(iou(top_fraction_mask(cam, 0.1), load_mask(p.post.mask_path, 224)))
    median = float(np.median(scores))
    report(7, median > 0.2, f"GradCAM top-decile IoU median {median:.3f} over {len(scores)} LR pairs "
                            f"(> 0.2 on {np.mean(np.array(scores) > 0.2):.0%})")
    assert len(scores) >= 8
    assert median > 0.2


@pytest.mark.slow
@pytest.mark.criterion(7, "interpretability")
def test_c7_attention_argmax_in_mask(overfit_model):
    """Follow-up pairs with a lesion in both images: querying the pre-lesion
    cell should point at the post-image lesion."""
    model, records, _ = overfit_model
    store = ImageStore(224)
    pairs = [p for p in build_pairs(records, "train") if p.label == 1 and p.pre.mask_path and p.post.mask_path]
    hits, chance, worst_row = [], [], 0.0
    for p in pairs:
        maps = attention_correspondence(model, store.get(p.pre), store.get(p.post))
        for mat in (maps.pre_to_post, maps.post_to_pre):
            assert np.all(mat >= 0)
            worst_row = max(worst_row, float(np.abs(mat.sum(-1) - 1).max()))
        cov = cell_coverage(load_mask(p.pre.mask_path, 224), maps.grid)
        query = np.unravel_index(cov.argmax(), cov.shape)
        qmap = maps.query_map("pre_to_post", query)
        post_mask = load_mask(p.post.mask_path, 224)
        hits.append(cell_center_in_mask(post_mask, maps.grid, np.unravel_index(qmap.argmax(), qmap.shape)))
        chance.append(np.mean([cell_center_in_mask(post_mask, maps.grid, (r, c)) for r in range(7) for c in range(7)]))
    rate = float(np.mean(hits))
    ok = rate > 0.5 and worst_row <= 1e-6
    report(7, ok, f"attention argmax in post lesion for {rate:.0%} of {len(hits)} pairs "
                  f"(chance {np.mean(chance):.0%}); max |row sum - 1| {worst_row:.1e}")
    assert len(hits) >= 8
    assert rate > 0.5
    assert worst_row <= 1e-6


# -- 8. determinism --------------------------------------------------------


@pytest.mark.criterion(8, "determinism")
def test_c8_byte_identical_reruns(tmp_path, tiny_dataset):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("train:\n  total_epochs: 3\n  warmup_epochs: 1\n  fold_count: 2\n")
    spec = tmp_path / "spec.yaml"
    spec.write_text("n_patients: 8\n")
    outputs = {}
    for run_id in ("a", "b"):
        base = tmp_path / run_id
        assert cli_main(["--seed", "7", "synth", "--spec", str(spec), "--out", str(base / "data")]) == 0
        manifest = str(base / "data" / "manifest.jsonl")
        assert cli_main(["--config", str(cfg), "train", "--manifest", manifest, "--out", str(base / "train")]) == 0
        ck = str(base / "train" / "fold0" / "best.tns")
        assert cli_main(["eval", "--checkpoint", ck, "--manifest", manifest, "--cohort", "all",
                         "--out", str(base / "eval")]) == 0
        assert cli_main(["explain", "--checkpoint", ck, "--manifest", manifest, "--cohort", "all",
                         "--pairs", "2", "--out", str(base / "explain")]) == 0
        assert cli_main(["--config", str(cfg), "ablate-stage", "--manifest", manifest, "--stages", "3", "4",
                         "--out", str(base / "ablate")]) == 0
        outputs[run_id] = {
            p.relative_to(base): p.read_bytes()
            for p in sorted(base.rglob("*"))
            if p.suffix in (".csv", ".jsonl")
        }
    assert outputs["a"].keys() == outputs["b"].keys()
    differing = [str(k) for k in outputs["a"] if outputs["a"][k] != outputs["b"][k]]
    report(8, not differing, f"{len(outputs['a'])} CSV/manifest files compared, differing: {differing or 'none'}")
    assert len(outputs["a"]) > 10
    assert not differing
