"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk configuration is M = 4, L = 3, 2,000 samples, T = 20 and at most
60 training epochs. Trained checkpoints are cached in the pytest cache under
a key built from the package source and the training setup, so a re-run
only retrains when something that affects training changed.
"""

import dataclasses
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

import isacdiff
from isacdiff import benchmark
from isacdiff import diffusion as D
from isacdiff.channel import ScenarioKnobs, draw_realization, received_pilots
from isacdiff.config import ScenarioConfig
from isacdiff.dataset import encode_samples, generate_dataset, sample_rng, save_dataset
from isacdiff.encoders import EncoderConfig, location_features, sensing_planes
from isacdiff.estimators import ls_estimate, mmse_estimate
from isacdiff.numerics import (
    Tensor,
    batchnorm_forward,
    conv2d_forward,
    grad_check,
    linear_forward,
    multihead_attention,
    relu,
    sigmoid,
    softmax,
)

RESULTS: list[str] = []

SAMPLES, STEPS, EPOCHS = 2000, 20, 60
SNR0 = (0.0, 0.0)
# criteria 4, 5 and 9: orthogonal-pilot surrogate U = 6, tau_p = 6
SCENARIO_A = ScenarioConfig(antennas=4, num_ues=(6, 6), pilot_lengths=(6,), snr_db=SNR0, seed=11)
# criteria 6 and 7: the sweep ranges, so every grid point is in-distribution
SCENARIO_B = ScenarioConfig(antennas=4, num_ues=(3, 8), pilot_lengths=(4,), snr_db=SNR0, seed=12)
TRAIN = D.TrainConfig(epochs=EPOCHS, seed=3)


def report(criterion: int, ok: bool, detail: str, started: float) -> None:
    line = f"ACCEPTANCE {criterion} {'PASS' if ok else 'FAIL'}: {detail} [{time.time() - started:.0f} s]"
    RESULTS.append(line)
    print(line)


def db(x):
    return float(10 * np.log10(x))


# shared trained models ---------------------------------------------------------------

def _source_digest() -> str:
    root = Path(isacdiff.__file__).parent
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


class Trained:
    def __init__(self, dataset, models, histories, seconds):
        self.dataset = dataset
        self.models = models
        self.histories = histories
        self.seconds = seconds


def _train_pair(request, scenario: ScenarioConfig, variants: tuple[str, ...]) -> Trained:
    t0 = time.time()
    dataset = generate_dataset(scenario, SAMPLES)
    key = hashlib.sha256(json.dumps([_source_digest(), scenario.fingerprint(), SAMPLES, STEPS,
                                     dataclasses.asdict(TRAIN), variants]).encode()).hexdigest()[:16]
    cache = Path(request.config.cache.mkdir(f"isacdiff-acceptance-{key}"))
    models, histories, seconds = {}, {}, {}
    for variant in variants:
        ckpt, log = cache / f"{variant}.ckpt", cache / f"{variant}.json"
        if ckpt.is_file() and log.is_file():
            model, _, _ = D.load_model(ckpt)
            record = json.loads(log.read_text())
        else:
            start = time.time()
            model = D.new_model(dataset, STEPS, variant == "cddm", TRAIN.seed)
            _, hist = D.train(model, D.items_for_split(model, dataset, "train"),
                              D.items_for_split(model, dataset, "val"), TRAIN)
            record = {"losses": [h.train_loss for h in hist], "seconds": time.time() - start}
            D.save_model(ckpt, model, None, scenario.to_dict(), {"variant": variant})
            log.write_text(json.dumps(record))
        models[variant], histories[variant], seconds[variant] = model, record["losses"], record["seconds"]
    seconds["data"] = time.time() - t0 - sum(v for k, v in seconds.items())
    return Trained(dataset, models, histories, seconds)


@pytest.fixture(scope="module")
def pair_a(request):
    return _train_pair(request, SCENARIO_A, ("cddm", "tddm"))


@pytest.fixture(scope="module")
def model_b(request):
    return _train_pair(request, SCENARIO_B, ("cddm",))


# 1: estimator identities -----------------------------------------------------------

def test_criterion_1_estimator_identities():
    t0 = time.time()
    sc = ScenarioConfig(antennas=4, rician_k=0.0)
    rng = sample_rng(1, 0)

    real = draw_realization(sc, ScenarioKnobs(4, 4, 10.0, 0.0), rng)
    obs = received_pilots(real, 0.0, rng)
    h_ls = ls_estimate(obs.y_pilot, real.pilot_assignment, real.powers, 4)
    exact_err = np.max(np.abs(h_ls - real.h_comm)) / np.max(np.abs(real.h_comm))

    real2 = draw_realization(sc, ScenarioKnobs(2, 1, 10.0, 0.0), rng)
    real2 = dataclasses.replace(real2, powers=np.full(2, 0.05))
    obs2 = received_pilots(real2, 0.0, rng)
    h2 = ls_estimate(obs2.y_pilot, real2.pilot_assignment, real2.powers, 1)
    both = real2.h_comm[:, 0] + real2.h_comm[:, 1]
    contam_err = max(np.max(np.abs(h2[:, u] - both)) for u in range(2)) / np.max(np.abs(both))

    mse_ls = mse_mmse = 0.0
    knobs = ScenarioKnobs(6, 4, 10.0, 0.0)
    for k in range(10_000):
        rng = sample_rng(2, k)
        real = draw_realization(sc, knobs, rng)
        obs = received_pilots(real, sc.noise_power, rng)
        ls = ls_estimate(obs.y_pilot, real.pilot_assignment, real.powers, 4)
        mm = mmse_estimate(obs.y_pilot, real.pilot_assignment, real.powers, real.large_scale,
                           sc.noise_power, 4)
        mse_ls += np.sum(np.abs(ls - real.h_comm) ** 2)
        mse_mmse += np.sum(np.abs(mm - real.h_comm) ** 2)

    ok = exact_err < 1e-10 and contam_err < 1e-12 and mse_mmse <= mse_ls and time.time() - t0 < 120
    report(1, ok, f"noiseless LS rel err {exact_err:.1e}, contamination identity rel err "
                  f"{contam_err:.1e}, MMSE/LS MSE ratio (K=0, 1e4 draws) {mse_mmse / mse_ls:.3f}", t0)
    assert ok


# 2: forward-process oracle ---------------------------------------------------------

def test_criterion_2_forward_process():
    t0 = time.time()
    sched = D.make_schedule(STEPS)
    alpha = np.linspace(0.9999, 0.98, STEPS)
    product_err = max(abs(sched.alpha_bar[t - 1] - np.prod(alpha[:t])) for t in range(1, STEPS + 1))

    rng = np.random.default_rng(0)
    x0 = np.array([1.5, -0.5, 0.0])
    draws = 100_000
    worst = 0.0
    for t in (1, 5, STEPS):
        chain = np.broadcast_to(x0, (draws, 3)).copy()
        for s in range(1, t + 1):
            chain = D.forward_step(chain, s, sched, rng)
        direct = D.forward_sample(np.broadcast_to(x0, (draws, 3)), t, sched, rng)
        ab = sched.alpha_bar[t - 1]
        # compare both to the closed-form mean and variance, relative to the marginal scale
        scale = np.sqrt(ab * x0 ** 2 + (1 - ab))
        for sample in (chain, direct):
            worst = max(worst, np.max(np.abs(sample.mean(0) - np.sqrt(ab) * x0) / scale))
            worst = max(worst, np.max(np.abs(sample.var(0) / (1 - ab) - 1)))
        worst = max(worst, np.max(np.abs(chain.var(0) / direct.var(0) - 1)))
    ok = product_err <= 1e-15 and worst < 0.02 and time.time() - t0 < 120
    report(2, ok, f"schedule product err {product_err:.1e}, worst moment deviation {worst:.4f}", t0)
    assert ok


# 3: gradient suite -----------------------------------------------------------------

TINY_ENC = EncoderConfig(receive_aps=2, antennas=3, conv_filters=(2, 3, 2), token_dim=4,
                         location_hidden=5, heads=2, ffn_hidden=6, mmt_dim=5)


def _param(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _layer_checks(rng) -> list[bool]:
    x = _param(rng, (3, 4))
    checks = [grad_check(linear_forward, [x, _param(rng, (4, 5)), _param(rng, 5)]).passed]
    img = _param(rng, (2, 2, 5, 5))
    checks.append(grad_check(lambda a, k: conv2d_forward(a, k, 1, 1), [img, _param(rng, (3, 2, 3, 3))]).passed)
    feats = Tensor(rng.standard_normal((8, 3)) * 2 + 1, requires_grad=True)
    bn = lambda a, g, b: batchnorm_forward(a, g, b, np.zeros(3), np.ones(3), True)
    checks.append(grad_check(bn, [feats, Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True),
                                  _param(rng, 3)]).passed)
    r = rng.standard_normal(20)
    r[np.abs(r) < 1e-3] = 0.5
    checks.append(grad_check(relu, [Tensor(r, requires_grad=True)]).passed)
    checks.append(grad_check(sigmoid, [_param(rng, 20)]).passed)
    checks.append(grad_check(lambda a: softmax(a, -1), [_param(rng, (3, 5))]).passed)
    d = 8
    attn = [_param(rng, (d, d)) for _ in range(4)] + [_param(rng, (d,)) for _ in range(4)]
    checks.append(grad_check(lambda q, kv, *p: multihead_attention(q, kv, 4, *p),
                             [_param(rng, (2, 3, d)), _param(rng, (2, 4, d)), *attn]).passed)
    return checks


def _end_to_end_check(seed: int) -> bool:
    """Sensing/location encoder feeding the gated reverse-step MLP."""
    rng = np.random.default_rng(seed)
    cfg = D.ModelConfig(aps=3, antennas=3, steps=5, hidden=(6, 5), encoder=TINY_ENC)
    model = D.DenoiserModel(cfg, rng)
    h = rng.standard_normal((2, 2, 3, 3)) + 1j * rng.standard_normal((2, 2, 3, 3))
    planes = sensing_planes(h)
    loc = location_features(rng.uniform(0, 100, (2, 2)))
    x = rng.standard_normal((2, cfg.signal_dim))
    params = [p for _, p in model.named_parameters()]
    # zero-initialized biases can put a whole ReLU layer exactly on its kink
    for name, p in model.named_parameters():
        if name.startswith("mlp") and name.endswith("bias"):
            p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
    fn = lambda *_: model.reverse_step(x, np.array([2, 5]), model.condition(planes, loc, 2))
    return grad_check(fn, params).passed


def test_criterion_3_gradient_suite():
    t0 = time.time()
    layer = [all(_layer_checks(np.random.default_rng(seed))) for seed in range(10)]
    stack = [_end_to_end_check(seed) for seed in range(10)]
    ok = all(layer) and all(stack) and time.time() - t0 < 300
    report(3, ok, f"layer checks passed for {sum(layer)}/10 seeds, encoder->MLP stack "
                  f"{sum(stack)}/10 seeds at 1e-4", t0)
    assert ok


# 4: NMSE at low SNR ----------------------------------------------------------------

def test_criterion_4_nmse_vs_baselines(pair_a):
    t0 = time.time()
    test = pair_a.dataset.split("test")
    res = benchmark.per_trial_nmse(test, pair_a.dataset.manifest.scenario,
                                   {"CDDM": pair_a.models["cddm"]})
    ls, mmse, cddm = (db(res[k].mean()) for k in ("LS", "MMSE", "CDDM"))
    elapsed = pair_a.seconds["cddm"] + pair_a.seconds["data"] + time.time() - t0
    ok = cddm <= ls - 3.0 and cddm < mmse and elapsed <= 1800
    report(4, ok, f"test split ({len(test)} samples): LS {ls:.2f} dB, MMSE {mmse:.2f} dB, "
                  f"CDDM {cddm:.2f} dB; training+eval {elapsed:.0f} s", t0)
    assert ok


# 5: conditioning benefit -----------------------------------------------------------

def test_criterion_5_conditioning_benefit(pair_a):
    t0 = time.time()
    near = [s for s in pair_a.dataset.split("test") if s.knobs.distance <= 10.0]
    res = benchmark.per_trial_nmse(near, pair_a.dataset.manifest.scenario,
                                   {"CDDM": pair_a.models["cddm"], "TDDM": pair_a.models["tddm"]})
    ratio = res["CDDM"].mean() / res["TDDM"].mean()
    ok = ratio <= 0.95
    report(5, ok, f"{len(near)} test samples with d <= 10 m: CDDM {db(res['CDDM'].mean()):.2f} dB, "
                  f"TDDM {db(res['TDDM'].mean()):.2f} dB, ratio {ratio:.3f}", t0)
    assert ok


# 6: pilot contamination ------------------------------------------------------------

def test_criterion_6_pilot_contamination(model_b):
    t0 = time.time()
    spec = benchmark.ExperimentSpec("num_ues", tuple(range(3, 9)), trials=200, seed=606)
    rows = benchmark.run_sweep(spec, model_b.dataset.manifest.scenario, {"CDDM": model_b.models["cddm"]})
    val = {(r.grid, r.method): r.nmse_db for r in rows}
    ls_ratio = 10 ** ((val[8.0, "LS"] - val[4.0, "LS"]) / 10)
    below = {int(u): val[u, "CDDM"] < val[u, "MMSE"] for u in spec.grid}
    ok = ls_ratio >= 5.0 and all(below.values()) and time.time() - t0 < 600
    curve = ", ".join(f"U={int(u)}: LS {val[u, 'LS']:.1f}/MMSE {val[u, 'MMSE']:.1f}/CDDM {val[u, 'CDDM']:.1f}"
                      for u in spec.grid)
    report(6, ok, f"LS(U=8)/LS(U=4) = {ls_ratio:.1f}; CDDM below MMSE at "
                  f"{sum(below.values())}/{len(below)} U; {curve}", t0)
    assert ok


# 7: distance trend -----------------------------------------------------------------

def spearman(x, y) -> float:
    rx = np.argsort(np.argsort(x)).astype(float)
    ry = np.argsort(np.argsort(y)).astype(float)
    return float(np.corrcoef(rx, ry)[0, 1])


def test_criterion_7_distance_trend(model_b):
    t0 = time.time()
    grid = (2.5, 5.0, 10.0, 15.0, 20.0)
    spec = benchmark.ExperimentSpec("distance", grid, trials=200, seed=707)
    rows = benchmark.run_sweep(spec, model_b.dataset.manifest.scenario, {"CDDM": model_b.models["cddm"]})
    curve = {m: np.array([r.nmse_db for r in rows if r.method == m]) for m in ("LS", "MMSE", "CDDM")}
    rho = spearman(grid, curve["CDDM"])
    spread = {m: float(np.max(np.abs(curve[m] - curve[m].mean()))) for m in ("LS", "MMSE")}
    ok = rho > 0 and all(s <= 0.5 for s in spread.values())
    text = "; ".join(f"{m} " + "/".join(f"{v:.2f}" for v in curve[m]) for m in curve)
    report(7, ok, f"Spearman(d, CDDM) = {rho:.2f}; max deviation from curve mean LS "
                  f"{spread['LS']:.2f} dB, MMSE {spread['MMSE']:.2f} dB; {text}", t0)
    assert ok


# 8: reproducibility ----------------------------------------------------------------

def test_criterion_8_reproducibility(tmp_path):
    t0 = time.time()
    sc = ScenarioConfig(antennas=4, num_ues=(3, 5), pilot_lengths=(4,), snr_db=SNR0, seed=8)
    digests = []
    for name in ("a", "b"):
        ds = generate_dataset(sc, 30)
        out = save_dataset(ds, tmp_path / name)
        digests.append(tuple(hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(out.iterdir())))
    same_data = digests[0] == digests[1] and encode_samples(ds.samples) == encode_samples(
        generate_dataset(sc, 30).samples)

    small = D.TrainConfig(epochs=2, seed=5)
    ckpts = []
    for name in ("a", "b"):
        m = D.new_model(ds, 5, True, 5, hidden=(32, 32))
        D.train(m, D.items_for_split(m, ds, "train"), D.items_for_split(m, ds, "val"), small)
        D.save_model(tmp_path / f"{name}.ckpt", m, None, sc.to_dict(), {})
        ckpts.append((tmp_path / f"{name}.ckpt").read_bytes())
    same_ckpt = ckpts[0] == ckpts[1]

    model, _, _ = D.load_model(tmp_path / "a.ckpt")
    spec = benchmark.ExperimentSpec("snr", (0.0, 10.0), {"num_ues": 4, "pilot_length": 4}, trials=10, seed=88)
    first = benchmark.run_sweep(spec, sc, {"CDDM": model})
    again = benchmark.read_csv(benchmark.rows_to_csv(benchmark.run_sweep(spec, sc, {"CDDM": model})))
    worst = max(max(abs(a.nmse_db - b.nmse_db), abs(a.nmse_std_db - b.nmse_std_db))
                for a, b in zip(first, again))
    ok = same_data and same_ckpt and worst <= 1e-12
    report(8, ok, f"datasets identical {same_data}, checkpoints identical {same_ckpt}, "
                  f"CSV metric drift {worst:.1e}", t0)
    assert ok


# 9: training curve -----------------------------------------------------------------

def test_criterion_9_training_curve(pair_a):
    t0 = time.time()
    c, t = pair_a.histories["cddm"], pair_a.histories["tddm"]
    halved = c[-1] <= 0.5 * c[0] and t[-1] <= 0.5 * t[0]
    ok = halved and c[-1] <= t[-1]
    report(9, ok, f"CDDM loss {c[0]:.4g} -> {c[-1]:.4g}, TDDM {t[0]:.4g} -> {t[-1]:.4g} "
                  f"over {len(c)} epochs", t0)
    assert ok
