"""Acceptance suite: one test (or test group) per numbered criterion.

Heavy criteria share a session-scoped zoo of trained models, cached on disk
under .acceptance_cache/ and keyed by a configuration checksum, so a rerun
resumes instead of retraining. Set QDLAB_CIFAR10 to a directory holding
CIFAR-10 binary batches (data_batch_1.bin, test_batch.bin) to run the
data-dependent criteria on real reduced CIFAR-10; without it a synthetic
textured corpus in the same binary format stands in.

Run `pytest tests/test_acceptance.py -v`; a PASS/FAIL line per criterion is
printed in the terminal summary.
"""

import json
import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from qdlab.analysis import evaluate, layer_profile, spearman
from qdlab.attacks import (AttackConfig, bim, fgsm, pgd, pgd_schedule, r_fgsm,
                           random_attack)
from qdlab.checkpoint import load_weights, save_weights
from qdlab.data import Dataset, load_cifar10_binary, save_cifar10_binary, synth_textures
from qdlab.defenses import SqueezeConfig, feature_squeeze_detect, sample_epsilon
from qdlab.lipschitz import (AggregationCoeff, RegConfig, convex_aggregate,
                             orthogonal_penalty, spectral_norm)
from qdlab.models import ConvBlockSpec, ModelSpec, build_model, default_spec, transfer_attack
from qdlab.quantize import QuantConfig, quantization_error_bound, quantize_uniform, quantized_relu6
from qdlab.seeds import split_seed
from qdlab.tensor import (BatchNormState, Tensor, backward, batchnorm, clamp_range,
                          conv2d, cross_entropy, dense, global_avg_pool, matmul, mul,
                          no_grad, tanh, tsum)
from qdlab.training import TrainConfig, train

from oracles import clipped_half_normal_mean, finite_difference, rel_error

SEEDS = (0, 1, 2)
EPOCHS = 15
ATTACK_EPS = 8.0
DQ_BETAS = (3e-4, 1e-3, 2e-3)
CACHE_DIR = Path(__file__).resolve().parent.parent / ".acceptance_cache"

# Desk-scale regime: ReLU1 truncation range so the quantization grid sits at
# the scale perturbations actually reach in a 4-block net (with the ReLU6
# range a desk-size model never pushes noise across a bucket).
RANGE_MAX = 1.0


def desk_spec(bits: int, beta: float) -> ModelSpec:
    mode = "off" if bits == 0 else "uniform"
    return default_spec(quant=QuantConfig(bits=max(bits, 1), range_max=RANGE_MAX, mode=mode),
                        reg=RegConfig(beta=beta))


def desk_train_cfg(seed: int) -> TrainConfig:
    return TrainConfig(epochs=EPOCHS, lr=0.1, decay=0.2, milestones=(10, 13),
                       batch_size=64, seed=seed)


# ---------------------------------------------------------------------------
# data


def load_desk_data():
    """Reduced CIFAR-10 when available, the synthetic binary corpus otherwise."""
    cifar_dir = os.environ.get("QDLAB_CIFAR10", "")
    if cifar_dir:
        train_path = os.path.join(cifar_dir, "data_batch_1.bin")
        test_path = os.path.join(cifar_dir, "test_batch.bin")
        return (load_cifar10_binary(train_path, max_records=2000),
                load_cifar10_binary(test_path, max_records=1000), "cifar10")
    CACHE_DIR.mkdir(exist_ok=True)
    train_bin = CACHE_DIR / "synth_train.bin"
    test_bin = CACHE_DIR / "synth_test.bin"
    if not (train_bin.exists() and test_bin.exists()):
        save_cifar10_binary(train_bin, synth_textures(10, 200, seed=0, split="train"))
        save_cifar10_binary(test_bin, synth_textures(10, 100, seed=0, split="test"))
    return (load_cifar10_binary(train_bin, max_records=2000),
            load_cifar10_binary(test_bin, max_records=1000), "synthetic")


@pytest.fixture(scope="session")
def desk_data():
    train_ds, test_ds, source = load_desk_data()
    assert len(train_ds) == 2000 and len(test_ds) == 1000
    return train_ds, test_ds, source


# ---------------------------------------------------------------------------
# trained-model zoo, disk-cached


ZOO_CELLS = ([(0.0, b) for b in (0, 1, 2, 3, 4, 5)]
             + [(beta, b) for beta in DQ_BETAS for b in (0, 1)]
             + [(2e-3, 3)])  # bits-3 twin for the amplification comparison


def _zoo_checksum(source: str) -> str:
    import hashlib
    blob = f"{source}|{EPOCHS}|{RANGE_MAX}|{SEEDS}|{ZOO_CELLS}|{desk_spec(3, 0.0)}|v1"
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _train_cell(args):
    beta, bits, seed, train_images, train_labels = args
    ds = Dataset(train_images, train_labels, split="train")
    cell_seed = split_seed(seed, f"zoo/{beta:g}/{bits}")
    model = build_model(desk_spec(bits, beta), seed=cell_seed)
    train(model, ds, replace(desk_train_cfg(seed), seed=cell_seed))
    return beta, bits, seed, model.state_dict()


@pytest.fixture(scope="session")
def zoo(desk_data):
    """{(beta, bits, seed): Model}, trained once and cached on disk."""
    train_ds, _, source = desk_data
    checksum = _zoo_checksum(source)
    CACHE_DIR.mkdir(exist_ok=True)
    jobs = []
    for beta, bits in ZOO_CELLS:
        for seed in SEEDS:
            path = CACHE_DIR / f"zoo_{beta:g}_{bits}_{seed}_{checksum}.dqw"
            if not path.exists():
                jobs.append((beta, bits, seed, train_ds.images, train_ds.labels))
    if jobs:
        results = []
        try:
            import multiprocessing as mp
            with mp.get_context("fork").Pool(2) as pool:
                results = list(pool.imap_unordered(_train_cell, jobs))
        except (ValueError, OSError):
            results = [_train_cell(j) for j in jobs]
        for beta, bits, seed, state in results:
            save_weights(CACHE_DIR / f"zoo_{beta:g}_{bits}_{seed}_{checksum}.dqw", state)
    models = {}
    for beta, bits in ZOO_CELLS:
        for seed in SEEDS:
            model = build_model(desk_spec(bits, beta),
                                seed=split_seed(seed, f"zoo/{beta:g}/{bits}"))
            model.load_state_dict(
                load_weights(CACHE_DIR / f"zoo_{beta:g}_{bits}_{seed}_{checksum}.dqw"))
            models[(beta, bits, seed)] = model
    return models


def _acc_cache(desk_data):
    _, _, source = desk_data
    return CACHE_DIR / f"zoo_accs_{_zoo_checksum(source)}.json"


@pytest.fixture(scope="session")
def zoo_accuracies(zoo, desk_data):
    """Clean and FGSM(eps=8) accuracy per zoo cell, seed-resolved, cached."""
    _, test_ds, _ = desk_data
    cache = _acc_cache(desk_data)
    if cache.exists():
        raw = json.loads(cache.read_text())
        return {tuple(json.loads(k)): v for k, v in raw.items()}
    accs = {}
    for (beta, bits, seed), model in zoo.items():
        clean = evaluate(model, test_ds)
        adv = evaluate(model, test_ds,
                       AttackConfig(kind="fgsm", epsilon=ATTACK_EPS,
                                    seed=split_seed(seed, "eval/fgsm")))
        accs[(beta, bits, seed)] = {"clean": clean, "fgsm": adv}
    cache.write_text(json.dumps({json.dumps(k): v for k, v in accs.items()}))
    return accs


def seed_mean(accs, beta, bits, key):
    return float(np.mean([accs[(beta, bits, s)][key] for s in SEEDS]))


# ---------------------------------------------------------------------------
# criterion 1: autodiff gradients vs central finite differences


@pytest.mark.criterion(1, "autodiff gradient checks vs finite differences")
def test_criterion_1_gradient_checks():
    start = time.time()
    rng = np.random.default_rng(101)
    checks = 0

    def check(build, arrays):
        nonlocal checks
        tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        backward(build(*tensors))
        for i, t in enumerate(tensors):
            def f(*arrs):
                consts = [Tensor(a) for a in arrs]
                return float(build(*consts).data)
            fd = finite_difference(f, arrays, i, h=1e-4)
            assert rel_error(t.grad, fd) < 1e-3
            checks += 1

    for _ in range(20):
        n, cin, cout = rng.integers(1, 3), int(rng.integers(1, 3)), int(rng.integers(1, 3))
        h = int(rng.integers(3, 6))
        x = rng.standard_normal((n, cin, h, h))
        w = rng.standard_normal((cout, cin, 3, 3)) * 0.6
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        weightings = rng.standard_normal(
            conv2d(Tensor(x), Tensor(w), stride, pad).shape)
        check(lambda xt, wt: tsum(mul(conv2d(xt, wt, stride, pad), Tensor(weightings))),
              [x, w])

    for _ in range(20):
        c = int(rng.integers(1, 4))
        x = rng.standard_normal((int(rng.integers(2, 5)), c, 3, 3))
        g = rng.uniform(0.5, 1.5, c)
        b = rng.uniform(-0.5, 0.5, c)
        wgt = rng.standard_normal(x.shape)
        check(lambda xt, gt, bt: tsum(mul(
            batchnorm(xt, gt, bt, BatchNormState(c, dtype=np.float64), training=True),
            Tensor(wgt))), [x, g, b])

    for _ in range(20):
        nn, d, k = int(rng.integers(1, 5)), int(rng.integers(2, 6)), int(rng.integers(2, 5))
        x = rng.standard_normal((nn, d))
        w = rng.standard_normal((k, d))
        b = rng.standard_normal(k)
        wgt = rng.standard_normal((nn, k))
        check(lambda xt, wt, bt: tsum(mul(dense(xt, wt, bt), Tensor(wgt))), [x, w, b])

    for _ in range(20):
        nn, c = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        z = rng.standard_normal((nn, c))
        y = rng.integers(0, c, nn)
        check(lambda zt: cross_entropy(zt, y), [z])

    for _ in range(20):
        # keep samples away from the clamp kinks where the derivative jumps
        x = rng.uniform(0.1, 5.9, size=int(rng.integers(4, 30)))
        x[rng.random(x.size) < 0.3] -= 8.0  # solidly negative: gradient 0 region
        wgt = rng.standard_normal(x.shape)
        check(lambda xt: tsum(mul(clamp_range(xt, 6.0), Tensor(wgt))), [x])

    for _ in range(20):
        x = rng.standard_normal(int(rng.integers(3, 20)))
        wgt = rng.standard_normal(x.shape)
        check(lambda xt: tsum(mul(tanh(xt), Tensor(wgt))), [x])

    for _ in range(20):
        r, c, k = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
        a = rng.standard_normal((r, c))
        b = rng.standard_normal((c, k))
        wgt = rng.standard_normal((r, k))
        check(lambda at, bt: tsum(mul(matmul(at, bt), Tensor(wgt))), [a, b])

    for _ in range(20):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)), 2, 2)
        a = rng.standard_normal(shape)
        b = rng.standard_normal(shape)
        al = rng.uniform(0.1, 0.9)
        wgt = rng.standard_normal(shape)
        check(lambda at, bt, alt: tsum(mul(
            convex_aggregate(at, bt, AggregationCoeff(alt)), Tensor(wgt))),
            [a, b, np.asarray(al)])

    for _ in range(20):
        x = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(1, 4)), 3, 3))
        wgt = rng.standard_normal(x.shape[:2])
        check(lambda xt: tsum(mul(global_avg_pool(xt), Tensor(wgt))), [x])

    elapsed = time.time() - start
    assert checks >= 9 * 20
    assert elapsed < 60.0, f"gradient checks took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# criterion 2: quantizer equals brute-force enumeration


@pytest.mark.criterion(2, "quantizer matches nearest-level enumeration exactly")
@pytest.mark.parametrize("bits", range(1, 9))
def test_criterion_2_quantizer_oracle(bits):
    rng = np.random.default_rng(200 + bits)
    cfg = QuantConfig(bits=bits, range_max=6.0)
    xs = (rng.uniform(0.0, 6.0, size=100_000)).astype(np.float32)
    got = quantize_uniform(xs, cfg)

    # independent oracle: explicit distance to every level, ties toward +inf
    levels = (np.arange(2 ** bits, dtype=np.float64) * (6.0 / (2 ** bits - 1)))
    dist = np.abs(xs.astype(np.float64)[:, None] - levels[None, :])
    flipped = dist[:, ::-1]
    idx = dist.shape[1] - 1 - np.argmin(flipped, axis=1)  # last minimum = highest level
    want = levels[idx].astype(np.float32)

    assert np.array_equal(got, want)
    bound = quantization_error_bound(cfg)
    assert np.all(np.abs(got.astype(np.float64) - xs.astype(np.float64)) <= bound + 1e-12)


# ---------------------------------------------------------------------------
# criterion 3: straight-through contract


@pytest.mark.criterion(3, "STE gradient bit-identical to plain clamp")
def test_criterion_3_ste_contract():
    rng = np.random.default_rng(33)
    for bits in (1, 3, 6):
        cfg = QuantConfig(bits=bits, range_max=6.0)
        x = rng.uniform(-3.0, 9.0, size=4096).astype(np.float32)
        upstream = rng.standard_normal(4096).astype(np.float32)
        xq = Tensor(x, requires_grad=True)
        backward(tsum(mul(quantized_relu6(xq, cfg), Tensor(upstream))))
        xc = Tensor(x, requires_grad=True)
        backward(tsum(mul(clamp_range(xc, 6.0), Tensor(upstream))))
        assert np.array_equal(xq.grad, xc.grad)
        outside = (x <= 0.0) | (x >= 6.0)
        assert np.all(xq.grad[outside] == 0.0)
        inside = ~outside
        assert np.array_equal(xq.grad[inside], upstream[inside])


# ---------------------------------------------------------------------------
# criterion 4: orthogonality convergence


@pytest.mark.criterion(4, "penalty descent drives singular values into [0.99, 1.01]")
def test_criterion_4_orthogonality_convergence():
    start = time.time()
    rng = np.random.default_rng(4)
    w = Tensor(rng.normal(0.0, 0.1, size=(16, 32)), requires_grad=True, dtype=np.float64)
    for step in range(5000):
        backward(orthogonal_penalty(w))
        w.data -= 0.1 * w.grad
        w.grad = None
        if step % 50 == 0:
            s = np.linalg.svd(w.data, compute_uv=False)
            if np.all((s >= 0.99) & (s <= 1.01)):
                break
    s = np.linalg.svd(w.data, compute_uv=False)
    assert np.all(s >= 0.99) and np.all(s <= 1.01), f"singular values {s}"
    assert time.time() - start < 10.0


# ---------------------------------------------------------------------------
# criterion 5: non-expansive constructed network


@pytest.mark.criterion(5, "spectrally-normalized network is non-expansive")
def test_criterion_5_nonexpansive_network():
    rng = np.random.default_rng(5)

    def normalized(shape):
        w = rng.standard_normal(shape)
        mat = w.reshape(shape[0], -1)
        sigma = np.linalg.svd(mat, compute_uv=False)[0]
        return (w / (sigma * (1.0 + 1e-9))).astype(np.float64)

    # non-overlapping convs (stride == kernel) make the reshaped-matrix norm
    # exactly the operator norm; relu6 is 1-Lipschitz
    w1 = normalized((8, 3, 4, 4))
    w2 = normalized((16, 8, 2, 2))
    w3 = normalized((32, 16 * 4 * 4))
    w4 = normalized((10, 32))
    for w, shape in ((w1, None), (w2, None), (w3, None), (w4, None)):
        mat = w.reshape(w.shape[0], -1)
        assert spectral_norm(mat, iters=200, seed=1) <= 1.0 + 1e-7

    def f(x):
        with no_grad():
            h = conv2d(Tensor(x), Tensor(w1), stride=4, pad=0)
            h = clamp_range(h, 6.0)
            h = conv2d(h, Tensor(w2), stride=2, pad=0)
            h = clamp_range(h, 6.0)
            h = dense(Tensor(h.data.reshape(x.shape[0], -1)), Tensor(w3),
                      Tensor(np.zeros(32)))
            h = clamp_range(h, 6.0)
            return dense(h, Tensor(w4), Tensor(np.zeros(10))).data

    violations = 0
    for _ in range(10):  # 10 batches x 100 pairs
        x1 = rng.uniform(0, 1, size=(100, 3, 32, 32))
        x2 = np.clip(x1 + rng.uniform(-0.1, 0.1, size=x1.shape), 0, 1)
        d_in = np.linalg.norm((x1 - x2).reshape(100, -1), axis=1)
        d_out = np.linalg.norm((f(x1) - f(x2)).reshape(100, -1), axis=1)
        violations += int(np.sum(d_out > d_in + 1e-5))
    assert violations == 0


# ---------------------------------------------------------------------------
# criterion 6: attack schedule


@pytest.mark.criterion(6, "PGD iteration schedule floor(min(eps+4, 1.25 eps))")
def test_criterion_6_pgd_schedule():
    for eps in range(1, 17):
        assert pgd_schedule(eps) == math.floor(min(eps + 4, 1.25 * eps))
    assert pgd_schedule(8) == 10
    assert pgd_schedule(16) == 20


# ---------------------------------------------------------------------------
# criterion 7: attack ball invariants


@pytest.mark.criterion(7, "all attacks stay in the eps-ball and pixel range")
def test_criterion_7_ball_invariants():
    rng = np.random.default_rng(7)
    train_ds = synth_textures(4, 16, seed=7, split="train")
    spec = ModelSpec(blocks=[ConvBlockSpec(4, 3, 2), ConvBlockSpec(8, 3, 2)],
                     classes=4, in_shape=(3, 32, 32), residual=None, pool="avg",
                     quant=QuantConfig(bits=3, range_max=1.0), reg=RegConfig())
    model = build_model(spec, seed=7)
    train(model, train_ds, TrainConfig(epochs=2, lr=0.05, milestones=(), seed=7,
                                       batch_size=32))
    n = 10_000
    x = rng.uniform(0, 1, size=(n, 3, 32, 32)).astype(np.float32)
    y = rng.integers(0, 4, n)

    eps = 8.0
    bound = eps / 255.0 + 1e-7
    runners = {
        "random": lambda m, xb, yb, cfg: random_attack(xb, cfg),
        "fgsm": fgsm, "rfgsm": r_fgsm, "bim": bim, "pgd": pgd,  # default schedules
    }
    for kind, runner in runners.items():
        cfg = AttackConfig(kind=kind, epsilon=eps, seed=77)
        checked = 0
        for s in range(0, n, 500):
            xb, yb = x[s:s + 500], y[s:s + 500]
            adv = runner(model, xb, yb, cfg)
            assert np.abs(adv - xb).max() <= bound, kind
            assert adv.min() >= 0.0 and adv.max() <= 1.0, kind
            checked += len(xb)
        assert checked == n


# ---------------------------------------------------------------------------
# criterion 8: amplification profile and the DQ twin


@pytest.mark.criterion(8, "distance grows with depth; DQ shrinks the final layer")
def test_criterion_8_amplification(zoo, desk_data):
    """Per-layer normalized distances grow with depth on the vanilla model,
    and the regularized twin amplifies the same perturbed inputs less.

    The twin comparison feeds identical adversarial images through both
    models (crafted against the vanilla subject), isolating how much each
    network grows the same input noise; that is the quantity the layerwise
    Lipschitz product controls.
    """
    start = time.time()
    _, test_ds, _ = desk_data
    x = test_ds.images[:128]
    y = test_ds.labels[:128]
    rhos, final_vanilla, final_dq = [], [], []
    for seed in SEEDS:
        vanilla = zoo[(0.0, 3, seed)]
        dq_twin = zoo[(2e-3, 3, seed)]
        cfg = AttackConfig(kind="fgsm", epsilon=8.0, seed=split_seed(seed, "amp"))
        from qdlab.attacks import run_attack
        xa = run_attack(vanilla, x, y, cfg)
        prof_v = layer_profile(vanilla, x, xa, quant_on=True, eps=8.0)
        prof_d = layer_profile(dq_twin, x, xa, quant_on=True, eps=8.0)
        rhos.append(spearman(range(len(prof_v.distances)), prof_v.distances))
        final_vanilla.append(prof_v.final_distance())
        final_dq.append(prof_d.final_distance())
    assert float(np.mean(rhos)) > 0.5, f"mean Spearman {np.mean(rhos):.3f}, per-seed {rhos}"
    assert float(np.mean(final_dq)) < float(np.mean(final_vanilla)), \
        f"DQ final-layer distance {np.mean(final_dq):.4f} not below vanilla {np.mean(final_vanilla):.4f}"
    assert time.time() - start < 15 * 60


# ---------------------------------------------------------------------------
# criterion 9: bits-sweep directional reproduction


@pytest.mark.criterion(9, "bits sweep trend and quantize-gain sign flip")
def test_criterion_9_dq_beats_vanilla_same_bit(zoo_accuracies):
    """Regularized quantized models clear the same-bit vanilla cell by 3+ points."""
    accs = zoo_accuracies
    van_same_bit = seed_mean(accs, 0.0, 1, "fgsm")
    for beta in DQ_BETAS:
        dq_adv = seed_mean(accs, beta, 1, "fgsm")
        assert dq_adv >= van_same_bit + 3.0, \
            f"beta={beta}: DQ bits-1 {dq_adv:.1f} vs vanilla bits-1 {van_same_bit:.1f}"


@pytest.mark.criterion(9, "bits sweep trend and quantize-gain sign flip")
def test_criterion_9_dq_quantize_gain_non_negative(zoo_accuracies):
    accs = zoo_accuracies
    for beta in DQ_BETAS:
        dq_gain = seed_mean(accs, beta, 1, "fgsm") - seed_mean(accs, beta, 0, "fgsm")
        assert dq_gain >= 0.0, f"beta={beta}: DQ quantize gain {dq_gain:+.1f}"


@pytest.mark.criterion(9, "bits sweep trend and quantize-gain sign flip")
def test_criterion_9_vanilla_trend_and_negative_gain(zoo_accuracies, desk_data):
    """Vanilla fragility ordering: adversarial accuracy non-decreasing in bits,
    quantize gain negative.

    On the synthetic stand-in corpus this subclaim does not reproduce: at
    four blocks of depth the low-bit grid denoises more perturbation than
    the network can amplify, so the 1-bit cell comes out MORE robust than
    full precision. The inverted ordering is an emergent property of much
    deeper stacks, where amplification compounds across tens of quantized
    layers; it was not reachable in any desk-scale regime tried (depth 4/8,
    ranges 6/1, budgets 8-24, FGSM and PGD, four data designs). Expected to
    fail here; may pass when QDLAB_CIFAR10 provides real reduced CIFAR-10.
    """
    accs = zoo_accuracies
    vanilla_adv = [seed_mean(accs, 0.0, b, "fgsm") for b in (1, 2, 3, 4, 5)]
    vanilla_fp = seed_mean(accs, 0.0, 0, "fgsm")

    # non-decreasing within the 1-point seed noise the attack-ordering
    # invariant grants elsewhere (the quoted full-scale reference sequence
    # itself contains a 0.5-point dip)
    for lo, hi in zip(vanilla_adv, vanilla_adv[1:]):
        assert hi >= lo - 1.0, \
            f"vanilla adversarial accuracy decreasing in bits: {vanilla_adv}"
    assert spearman((1, 2, 3, 4, 5), vanilla_adv) > 0.0, vanilla_adv
    vanilla_gain = max(vanilla_adv) - vanilla_fp
    assert vanilla_gain < 0.0, f"vanilla quantize gain {vanilla_gain:+.1f} (want negative)"


# ---------------------------------------------------------------------------
# criterion 10: gradient-masking sentinel


@pytest.mark.criterion(10, "black-box PGD no stronger than white-box beyond 2 points")
def test_criterion_10_masking_sentinel(zoo, desk_data):
    _, test_ds, _ = desk_data
    subset = test_ds.subset(256)
    violations = []
    for (beta, bits, seed), model in zoo.items():
        if (beta, bits) == (2e-3, 3):
            continue  # amplification twin, not part of the criterion-9 grid
        substitute = zoo[(0.0, 0, (seed + 1) % len(SEEDS))]  # independent clean FP model
        atk = AttackConfig(kind="pgd", epsilon=8.0, seed=split_seed(seed, "sentinel"))
        white = evaluate(model, subset, atk)
        black = transfer_attack(substitute, model, subset, atk)
        if black < white - 2.0:
            violations.append((beta, bits, seed, white, black))
    assert not violations, f"gradient masking warning: white-box beats black-box on {violations}"


# ---------------------------------------------------------------------------
# criterion 11: feature-squeezing detection gap


@pytest.mark.criterion(11, "squeezing flags adversarials 10+ points above clean")
def test_criterion_11_feature_squeezing(zoo, desk_data):
    from qdlab.attacks import run_attack
    _, test_ds, _ = desk_data
    x = test_ds.images[:256]
    y = test_ds.labels[:256]
    cfg = SqueezeConfig(color_bits=5, median=True)
    gaps = []
    for seed in SEEDS:
        model = zoo[(0.0, 0, seed)]
        adv = run_attack(model, x, y,
                         AttackConfig(kind="fgsm", epsilon=8.0, seed=split_seed(seed, "fs")))
        clean_rate = 100.0 * feature_squeeze_detect(model, x, cfg).mean()
        adv_rate = 100.0 * feature_squeeze_detect(model, adv, cfg).mean()
        gaps.append(adv_rate - clean_rate)
    assert float(np.mean(gaps)) >= 10.0, f"detection gaps {gaps}"


# ---------------------------------------------------------------------------
# criterion 12: epsilon-sampling rule


@pytest.mark.criterion(12, "epsilon sampling: clip bound exact, mean on the oracle")
def test_criterion_12_epsilon_sampling():
    rng = np.random.default_rng(12)
    draws = np.array([sample_epsilon(8.0, rng) for _ in range(100_000)])
    assert draws.min() >= 0.0 and draws.max() <= 16.0

    # the stated sampling law |N(0, 8)| clipped to [0, 16] has exact mean
    # 8*(sqrt(2/pi) - 2*(phi(2) - 2*(1 - Phi(2)))) = 6.2472252 (verified by
    # quadrature); the clip at two sigmas shaves 2.13% off the unclipped
    # half-normal mean 8*sqrt(2/pi)
    oracle_mean = clipped_half_normal_mean(8.0)
    assert abs(oracle_mean - 6.2472252445) < 1e-9
    assert abs(draws.mean() - oracle_mean) / oracle_mean < 0.02
    nominal = 8.0 * math.sqrt(2.0 / math.pi)
    assert abs(draws.mean() - nominal) / nominal < 0.03  # nominal target, clip bias included


# ---------------------------------------------------------------------------
# criterion 13: determinism and round trips


@pytest.mark.criterion(13, "bit-exact determinism, lossless round trips")
def test_criterion_13_determinism_and_round_trips(tmp_path, desk_data):
    train_ds, test_ds, _ = desk_data
    small = train_ds.subset(256)
    curves = []
    models = []
    for _ in range(2):
        model = build_model(desk_spec(3, 1e-3), seed=9)
        curves.append(train(model, small, TrainConfig(epochs=3, lr=0.1, milestones=(),
                                                      batch_size=64, seed=9)))
        models.append(model)
    assert curves[0].rows == curves[1].rows
    for (n, p), (_, q) in zip(models[0].parameters(), models[1].parameters()):
        assert np.array_equal(p.data, q.data), n

    # checkpoint round trip reproduces evaluation bit-exactly
    path = tmp_path / "model.dqw"
    models[0].save(path)
    fresh = build_model(desk_spec(3, 1e-3), seed=1234)
    fresh.load(path)
    probe = test_ds.subset(128)
    with no_grad():
        a = models[0].forward(Tensor(probe.images)).data
        b = fresh.forward(Tensor(probe.images)).data
    assert np.array_equal(a, b)

    # loss-curve and report CSV round trips are lossless
    from qdlab.analysis import RobustnessReport
    from qdlab.training import LossCurve
    cpath = tmp_path / "curve.csv"
    curves[0].to_csv(cpath)
    assert LossCurve.from_csv(cpath).rows == curves[0].rows
    report = RobustnessReport()
    report.add("vanilla", 3, 0.0, "fgsm", 8.0, 12.345678901234567)
    report.add("dq", 1, 2e-3, "clean", 0.0, 91.0)
    rpath = tmp_path / "report.csv"
    report.to_csv(rpath)
    assert RobustnessReport.from_csv(rpath).records == report.records
