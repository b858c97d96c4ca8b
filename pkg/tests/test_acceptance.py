"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are printed as each test finishes (visible with ``-s``) and again
in the terminal summary.  Oracles shared with the unit tests are imported
from those modules so every criterion is checked against one definition.
"""

import json
import math
import sys
import threading
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch

from test_attacks import linear_model, mlp, quad_loss, quad_model, random_case
from test_diffusion import bayes_posterior_moments, recomputed_posterior
from test_metrics import naive_ssim

from oneshotpure import config as C
from oneshotpure.attacks import (REFERENCE_EOT_SAMPLES, REFERENCE_EPSILON, AttackBudget, apgd, build_threat_model, ce_loss,
                                 dlr_loss, eot_gradient, fgsm, loss_and_grad, pgd, run_attack)
from oneshotpure.cli import main as cli_main
from oneshotpure.data_io import load_checkpoint, make_synthetic, save_checkpoint
from oneshotpure.diffusion import VarianceSchedule, diffuse_step, diffuse_to
from oneshotpure.evaluation import (REFERENCE_LATENCY_SAMPLES, AttackConfig, adversarial_examples, clean_accuracy,
                                    latency_benchmark, robust_accuracy, robust_accuracy_pipelines)
from oneshotpure.metrics import linf_dist_per_image, ssim, ssim_per_image
from oneshotpure.networks import GeneratorConfig, parameter_count
from oneshotpure.purifier import Pipeline, Purifier, classifier_from_checkpoint
from oneshotpure.training import TrainConfig, train_bgan, train_classifier, train_ddpm_denoiser, train_lightpure

RESULTS: dict[int, str] = {}

# desk-scale end-to-end setup shared by criteria 5-8
TRAIN_N, TEST_N, SIZE = 2000, 500, 32
CLASSIFIER_STEPS = 300
PURIFIER_STEPS = 2000
PURIFIER_BATCH = 16
MAX_GENERATOR_PARAMS = 1_000_000
MAX_TRAIN_SECONDS = 30 * 60


@contextmanager
def criterion(n: int, title: str):
    """Record and print one PASS/FAIL line; ``info['detail']`` adds measurements."""
    info = {"detail": ""}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as e:
        msg = str(e).strip().splitlines()[0] if str(e).strip() else type(e).__name__
        _record(n, title, False, f"{info['detail']} {msg}".strip(), time.perf_counter() - t0)
        raise
    _record(n, title, True, info["detail"], time.perf_counter() - t0)


def _record(n, title, ok, detail, secs):
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
    if detail:
        line += f"  [{detail}]"
    line += f"  ({secs:.1f}s)"
    RESULTS[n] = line
    print(line, file=sys.stderr)


def gen(seed):
    return torch.Generator().manual_seed(seed)


# ---------------------------------------------------------------- 1. diffusion math


def test_criterion_01_diffusion_math():
    with criterion(1, "diffusion moments and posterior coefficients") as info:
        t0 = time.perf_counter()
        sched = VarianceSchedule((0.0167, 0.0331))
        n = 100_000
        x0 = torch.tensor([0.9, -0.4, 0.0, -1.0], dtype=torch.float64)
        step = diffuse_step(x0.expand(n, 4).clone(), 0.0167, gen(1))
        a, s = math.sqrt(1 - 0.0167), math.sqrt(0.0167)
        assert torch.all((step.mean(0) - a * x0).abs() < 3 * s / math.sqrt(n)), "diffuse_step mean"
        assert torch.all((step.var(0) / s ** 2 - 1).abs() < 0.02), "diffuse_step variance"
        closed = diffuse_to(x0.expand(n, 4).clone(), sched, 2, gen(2))
        a2, s2 = sched.marginal_coefficients(2)
        assert a2 == pytest.approx(math.sqrt(0.9833 * 0.9669), abs=1e-12)
        assert torch.all((closed.mean(0) - a2 * x0).abs() < 3 * s2 / math.sqrt(n)), "diffuse_to mean"
        assert torch.all((closed.var(0) / s2 ** 2 - 1).abs() < 0.02), "diffuse_to variance"

        c0, ct, var = sched.posterior_coefficients(2)
        r0, rt, rv = recomputed_posterior(0.0167, 0.0331)
        assert abs(c0 - r0) <= 1e-6 and abs(ct - rt) <= 1e-6 and abs(var - rv) <= 1e-6
        # quoted reference figures carry five significant digits
        assert abs(c0 - 0.66649) <= 1e-5 and abs(ct - 0.33345) <= 1e-5 and abs(var - 0.011224) <= 1e-6
        worst = 0.0
        for xa, xb in [(0.0, 1.0), (0.4, -0.2), (-0.9, 0.3), (0.7, 0.7)]:
            mq, vq = bayes_posterior_moments(xa, xb, (0.0167, 0.0331))
            worst = max(worst, abs(c0 * xa + ct * xb - mq), abs(var - vq))
        assert worst <= 1e-3, f"numerical Bayes gap {worst:.2e}"
        secs = time.perf_counter() - t0
        assert secs < 60, f"runtime {secs:.1f}s"
        info["detail"] = f"c0={c0:.7f} ct={ct:.7f} var={var:.7f} bayes gap={worst:.1e}"


# ---------------------------------------------------------------- 2. SSIM


def test_criterion_02_ssim():
    with criterion(2, "SSIM identity, symmetry, constants, naive oracle, gradient") as info:
        t0 = time.perf_counter()
        rng = gen(0)
        x = torch.rand(3, 32, 32, generator=rng, dtype=torch.float64)
        assert abs(float(ssim(x, x)) - 1.0) <= 1e-6
        y = torch.rand(3, 32, 32, generator=rng, dtype=torch.float64)
        assert float(ssim(x, y)) == pytest.approx(float(ssim(y, x)), abs=1e-12)
        const = float(ssim(torch.zeros(1, 16, 16, dtype=torch.float64), torch.ones(1, 16, 16, dtype=torch.float64)))
        assert const == pytest.approx(1e-4 / (1 + 1e-4), rel=1e-9) and abs(const - 9.999e-5) < 1e-8
        worst = 0.0
        for i in range(50):
            a = torch.rand(3, 32, 32, generator=gen(100 + i), dtype=torch.float64)
            b = (a + 0.3 * torch.randn(3, 32, 32, generator=gen(200 + i), dtype=torch.float64)).clamp(0, 1)
            worst = max(worst, abs(float(ssim(a, b)) - naive_ssim(a, b)))
        assert worst <= 1e-6, f"oracle gap {worst:.2e}"
        p = torch.rand(1, 8, 8, generator=gen(7), dtype=torch.float64)
        q = torch.rand(1, 8, 8, generator=gen(8), dtype=torch.float64).requires_grad_(True)
        ssim(p, q).backward()
        fd = torch.zeros(64, dtype=torch.float64)
        flat = q.detach().flatten()
        for i in range(64):
            up, dn = flat.clone(), flat.clone()
            up[i] += 1e-6
            dn[i] -= 1e-6
            fd[i] = (ssim(p, up.view(1, 8, 8)) - ssim(p, dn.view(1, 8, 8))) / 2e-6
        rel = float((q.grad.flatten() - fd).norm() / fd.norm())
        assert rel <= 1e-3, f"gradient rel err {rel:.2e}"
        secs = time.perf_counter() - t0
        assert secs < 60, f"runtime {secs:.1f}s"
        info["detail"] = f"const={const:.4e} oracle gap={worst:.1e} grad rel={rel:.1e}"


# ---------------------------------------------------------------- 3. attack losses


def _fd(f, z, h=1e-6):
    g = torch.zeros_like(z)
    for i in range(z.numel()):
        zp, zm = z.clone(), z.clone()
        zp[i] += h
        zm[i] -= h
        g[i] = (f(zp) - f(zm)) / (2 * h)
    return g


def test_criterion_03_attack_losses():
    with criterion(3, "CE and DLR values, invariances, gradients") as info:
        ce = float(ce_loss(torch.tensor([0.0, 0.0], dtype=torch.float64), 0))
        assert abs(ce - math.log(2)) <= 1e-9
        z = torch.tensor([3.0, 1.0, 0.5, 0.0], dtype=torch.float64)
        d = float(dlr_loss(z, 0))
        assert abs(d + 0.8) <= 1e-9
        for shift, scale in [(5.0, 1.0), (-100.0, 1.0), (0.0, 3.0), (7.5, 0.25)]:
            assert abs(float(dlr_loss(scale * z + shift, 0)) - d) <= 1e-6
        worst = 0.0
        for loss in (ce_loss, dlr_loss):
            for seed in range(5):
                v = torch.randn(6, generator=gen(seed), dtype=torch.float64)
                vr = v.clone().requires_grad_(True)
                loss(vr, 2).backward()
                num = _fd(lambda u: float(loss(u, 2)), v)
                worst = max(worst, float((vr.grad - num).norm() / num.norm()))
        assert worst <= 1e-3, f"gradient rel err {worst:.2e}"
        info["detail"] = f"CE={ce:.12f} DLR={d:.12f} grad rel={worst:.1e}"


# ---------------------------------------------------------------- 4. attack correctness


def test_criterion_04_attack_correctness():
    with criterion(4, "FGSM closed form, PGD==FGSM, constraints, APGD best iterate and vs PGD") as info:
        t0 = time.perf_counter()
        m = linear_model([1.0, -2.0])
        x = torch.zeros(1, 2, dtype=torch.float64)
        assert torch.allclose(fgsm(m, x, torch.tensor([1]), 0.1, pixel_range=None),
                              torch.tensor([[0.1, -0.1]], dtype=torch.float64), atol=1e-12)
        assert torch.allclose(fgsm(m, x, torch.tensor([0]), 0.1, pixel_range=None),
                              torch.tensor([[-0.1, 0.1]], dtype=torch.float64), atol=1e-12)

        for seed in range(10):
            mm = mlp(seed)
            xs = torch.rand(3, 10, generator=gen(seed), dtype=torch.float64)
            ys = torch.tensor([0, 1, 3])
            one = AttackBudget(epsilon=8 / 255, alpha=8 / 255, iterations=1, random_start=False)
            assert torch.equal(pgd(mm, xs, ys, one), fgsm(mm, xs, ys, 8 / 255)), "PGD(1 step) != FGSM"

        for i in range(1000):
            kind, mm, xs, ys, b = random_case(i)
            for xa in run_attack(kind, mm, xs, ys, b, gen(i)):
                assert float(linf_dist_per_image(xa, xs).max()) <= b.epsilon, f"ball violated case {i}"
                assert xa.min() >= 0 and xa.max() <= 1, f"pixel range violated case {i}"

        for seed in range(20):
            mm = mlp(seed, k=5)
            xs = torch.rand(4, 10, generator=gen(seed), dtype=torch.float64)
            ys = torch.tensor([0, 1, 2, 3])
            out, hist = apgd(mm, xs, ys, AttackBudget(epsilon=0.1, iterations=25), "ce", gen(seed),
                             return_history=True)
            final = ce_loss(mm(out), ys)
            assert torch.all(final >= hist["losses"][0].max(0).values - 1e-12), "APGD did not return best iterate"

        la, lp = [], []
        for seed in range(100):
            qm, _ = quad_model(seed, sign=-1.0)
            xs = torch.full((1, 8), 0.5, dtype=torch.float64) + 0.05 * torch.randn(1, 8, generator=gen(seed + 7),
                                                                                   dtype=torch.float64)
            b = AttackBudget(epsilon=0.2, alpha=0.1, iterations=50, clip_min=None, clip_max=None)
            ys = torch.zeros(1, dtype=torch.long)
            lp.append(float(quad_loss(qm(pgd(qm, xs, ys, b, loss=quad_loss)), ys)))
            la.append(float(quad_loss(qm(apgd(qm, xs, ys, b, quad_loss)), ys)))
        assert np.mean(la) > np.mean(lp), f"APGD {np.mean(la):.4g} <= PGD {np.mean(lp):.4g}"
        secs = time.perf_counter() - t0
        assert secs < 300, f"runtime {secs:.1f}s"
        info["detail"] = f"quadratic mean loss APGD={np.mean(la):.4g} PGD={np.mean(lp):.4g}"


# ---------------------------------------------------------------- desk-scale setup


@pytest.fixture(scope="module")
def desk():
    """Classifier plus lightpure and single_step purifiers on the synthetic 2-class set."""
    train = make_synthetic(TRAIN_N, 2, SIZE, rng=0, separability=0.0)
    test = make_synthetic(TEST_N, 2, SIZE, rng=1, separability=0.0, split="test")
    out = {"train": train, "test": test, "seconds": {}}
    out["classifier"] = train_classifier(train, TrainConfig(steps=CLASSIFIER_STEPS, batch_size=32, seed=0))
    for name, fn in (("lightpure", train_lightpure), ("single_step", train_bgan)):
        t0 = time.perf_counter()
        out[name] = fn(train.unlabeled(), TrainConfig(steps=PURIFIER_STEPS, batch_size=PURIFIER_BATCH, seed=0))
        out["seconds"][name] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="module")
def desk_results(desk):
    attack = AttackConfig("pgd", AttackBudget(epsilon=REFERENCE_EPSILON, iterations=10))
    test = desk["test"]
    und = Pipeline(classifier_from_checkpoint(desk["classifier"]))
    res = {"baseline_clean": clean_accuracy(und, test),
           "baseline_robust": robust_accuracy_pipelines(und, und, attack, test)}
    for name in ("lightpure", "single_step"):
        reg = {"classifier": desk["classifier"], "purifier": desk[name]}
        _, target = build_threat_model("grayA", reg)
        res[f"{name}_clean"] = clean_accuracy(target, test)
        res[f"{name}_robust"] = robust_accuracy("grayA", attack, reg, test)
    return res


# ---------------------------------------------------------------- 5. EOT


def test_criterion_05_eot(desk):
    with criterion(5, "EOT: deterministic equals plain gradient; variance slope near -1") as info:
        worst = 0.0
        for seed in range(5):
            m = mlp(seed)
            x = torch.rand(2, 10, generator=gen(seed), dtype=torch.float64)
            y = torch.tensor([1, 2])
            _, g1 = loss_and_grad(m, x, y)
            for n in (1, 5, REFERENCE_EOT_SAMPLES):
                worst = max(worst, float((eot_gradient(m, x, y, n) - g1).abs().max()))
        assert worst <= 1e-6, f"deterministic gap {worst:.2e}"
        src, _ = build_threat_model("white", {"classifier": desk["classifier"], "purifier": desk["lightpure"]})
        x, y = desk["test"].images[:1], desk["test"].labels[:1]
        rng = gen(0)
        ns = [1, 2, 4, 8, 16]
        variances = []
        for n in ns:
            draws = torch.stack([eot_gradient(src, x, y, n, rng) for _ in range(40)])
            variances.append(float(draws.var(0).sum()))
        slope = float(np.polyfit(np.log(ns), np.log(variances), 1)[0])
        info["detail"] = f"deterministic gap={worst:.1e} slope={slope:.3f}"
        assert -1.2 <= slope <= -0.8, f"slope {slope:.3f}"


# ---------------------------------------------------------------- 6. end to end


def test_criterion_06_end_to_end(desk, desk_results):
    with criterion(6, "desk-scale purified clean >= baseline-10 and grayA robust >= undefended+20") as info:
        r = desk_results
        from oneshotpure.data_io import checkpoint_module
        params = parameter_count(checkpoint_module(desk["lightpure"], "generator"))
        secs = desk["seconds"]["lightpure"]
        info["detail"] = (f"clean {r['lightpure_clean']:.1f} vs baseline {r['baseline_clean']:.1f}; "
                          f"robust {r['lightpure_robust']:.1f} vs undefended {r['baseline_robust']:.1f}; "
                          f"G params {params}; train {secs:.0f}s")
        assert params <= MAX_GENERATOR_PARAMS and PURIFIER_STEPS <= 2000
        assert secs <= MAX_TRAIN_SECONDS, f"training took {secs:.0f}s"
        assert r["lightpure_clean"] >= r["baseline_clean"] - 10, "clean accuracy drop exceeds 10 points"
        assert r["lightpure_robust"] >= r["baseline_robust"] + 20, "robustness gain below 20 points"


def test_semantics_preserved_on_clean_inputs(desk):
    """Purified clean images stay far closer (SSIM) to their inputs than random images do."""
    test = desk["test"].images[:100]
    p = Purifier(desk["lightpure"])
    with torch.no_grad():
        out = p(test, gen(0))
    rand = torch.rand(test.shape, generator=gen(1))
    kept = float(ssim_per_image(test, out).mean())
    chance = float(ssim_per_image(test, rand).mean())
    assert kept - chance >= 0.3, (kept, chance)


# ---------------------------------------------------------------- 7. ablation direction


def test_criterion_07_ablation_direction(desk_results):
    with criterion(7, "single_step robust accuracy strictly below lightpure") as info:
        r = desk_results
        info["detail"] = (f"single_step {r['single_step_robust']:.1f} (clean {r['single_step_clean']:.1f}) vs "
                          f"lightpure {r['lightpure_robust']:.1f} (clean {r['lightpure_clean']:.1f})")
        assert r["single_step_robust"] < r["lightpure_robust"]


# ---------------------------------------------------------------- 8. latency structure


class SleepStub:
    stochastic = False

    def __init__(self):
        self.active, self.calls, self.lock = 0, 0, threading.Lock()

    def __call__(self, x, rng=None):
        with self.lock:
            self.active += 1
            assert self.active == 1, "concurrent call"
        time.sleep(0.005)
        with self.lock:
            self.active -= 1
            self.calls += 1
        return torch.zeros(x.shape[0], 2)


def test_criterion_08_latency_structure(desk):
    with criterion(8, "1 vs 10 generator calls, iterative >= 5x slower, sleep stub in [5, 6] ms") as info:
        train = desk["train"]
        one = Purifier(desk["lightpure"])
        it_ckpt = train_ddpm_denoiser(train.unlabeled(), TrainConfig(steps=0, seed=0))
        many = Purifier(it_ckpt, t_star=10)
        from oneshotpure.data_io import checkpoint_module
        p1 = parameter_count(checkpoint_module(desk["lightpure"], "generator"))
        p10 = parameter_count(many.generator)
        images = desk["test"].images[:50]
        s1 = latency_benchmark(one, images, n=200, warmup=5)
        s10 = latency_benchmark(many, images, n=200, warmup=5)
        assert s1.generator_invocations == 1.0 and s10.generator_invocations == 10.0
        ratio = s10.mean_ms / s1.mean_ms
        stub = SleepStub()
        st = latency_benchmark(stub, torch.rand(5, 1, 2, 2), n=100, warmup=3)
        info["detail"] = (f"one-shot {s1.mean_ms:.2f} ms, iterative {s10.mean_ms:.2f} ms, ratio {ratio:.1f}x; "
                          f"params {p1} vs {p10}; stub {st.mean_ms:.3f} ms")
        assert ratio >= 5.0, f"ratio {ratio:.2f}"
        assert 0.8 <= p10 / p1 <= 1.25, "network sizes not matched"
        assert 5.0 <= st.mean_ms <= 6.0 and stub.calls == 103


# ---------------------------------------------------------------- 9. reproducibility


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_criterion_09_reproducibility(tmp_path):
    with criterion(9, "bitwise round-trip and reruns of training, attacks, reports") as info:
        data = make_synthetic(64, 2, size=16, rng=0)
        g = GeneratorConfig(latent_dim=16, embedding_dim=32, base_channels=8, channel_mult=(1, 2),
                            attn_resolutions=())
        cfg = TrainConfig(generator=g, steps=10, batch_size=8, seed=3)
        a, b = train_lightpure(data, cfg), train_lightpure(data, cfg)
        assert a.content_hash() == b.content_hash(), "training rerun differs"
        h = save_checkpoint(a, tmp_path / "ck")
        back = load_checkpoint(tmp_path / "ck")
        assert all(a.tensors[k].numpy().tobytes() == back.tensors[k].numpy().tobytes() for k in a.tensors)
        assert back.content_hash() == h

        clf = train_classifier(data, TrainConfig(classifier={"depth": "tiny"}, steps=10, batch_size=8, seed=0))
        reg = {"classifier": clf, "purifier": back}
        test = make_synthetic(8, 2, size=16, rng=1)
        attack = AttackConfig("apgd-ce", AttackBudget(iterations=3, eot_samples=2))
        runs = []
        for _ in range(2):
            src, tgt = build_threat_model("white", reg)
            runs.append(adversarial_examples(src, tgt, attack, test, seed=5, batch_size=4))
        assert runs[0].images.numpy().tobytes() == runs[1].images.numpy().tobytes(), "attack rerun differs"

        save_checkpoint(clf, tmp_path / "clf")
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({
            "data": {"n": 16, "test_n": 6, "size": 16},
            "attack": {"iterations": 2, "eot_samples": 2},
            "eval": {"threats": ["grayA", "white"], "batch_size": 4, "latency": False},
            "checkpoints": {"classifier": str(tmp_path / "clf"), "purifier": str(tmp_path / "ck")},
        }))
        for d in ("r1", "r2"):
            assert cli_main(["eval", "--config", str(conf), "--out", str(tmp_path / d)]) == 0
        r1, r2 = _tree(tmp_path / "r1"), _tree(tmp_path / "r2")
        assert r1 == r2, "report rerun differs"
        info["detail"] = f"checkpoint {h[:12]}, {len(r1)} report files identical"


# ---------------------------------------------------------------- 10. reference constants


def test_criterion_10_reference_constants(tmp_path):
    with criterion(10, "reference constants are defaults and appear in the config snapshot") as info:
        golden = (Path(__file__).parent / "golden" / "default_config.json").read_text()
        assert C.snapshot_text(C.default_config()) == golden, "default config drifted from golden file"
        assert cli_main(["train", "--steps", "0", "--set", "data.n=4", "--set", "data.size=8", "--set",
                         "generator.channel_mult=[1]", "--set", "generator.attn_resolutions=[]",
                         "--out", str(tmp_path)]) == 0
        s = json.loads((tmp_path / "config.json").read_text())
        found = {
            "beta1": s["train"]["betas"][0], "beta2": s["train"]["betas"][1], "lambda": s["train"]["ssim_weight"],
            "latent": s["generator"]["latent_dim"], "embedding": s["generator"]["embedding_dim"],
            "lr": s["train"]["learning_rate"], "epsilon": s["attack"]["epsilon"],
            "eot": s["attack"]["eot_samples"], "restarts": s["attack"]["restarts"],
            "targets": s["attack"]["target_classes"], "bench_n": s["bench"]["n"],
        }
        expected = {"beta1": 0.0167, "beta2": 0.0331, "lambda": 3.0, "latent": 256, "embedding": 512,
                    "lr": 1e-4, "epsilon": 8 / 255, "eot": 20, "restarts": 1, "targets": 9, "bench_n": 1000}
        assert found == expected, {k: (found[k], v) for k, v in expected.items() if found[k] != v}
        assert TrainConfig().betas == (0.0167, 0.0331) and AttackBudget().epsilon == 8 / 255
        assert REFERENCE_LATENCY_SAMPLES == 1000
        info["detail"] = "11 constants match"
