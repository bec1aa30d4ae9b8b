"""Acceptance gate: the headline contracts checked end to end.

Each test prints one [PASS]/[FAIL] line (run with -s to watch them go by)
and asserts the same condition, so the file doubles as a release checklist.
The expensive fixtures are session scoped and shared: one real training run
feeds the training, calibration, sparsity, attack, and checkpoint checks.
On one CPU core the whole file takes roughly half an hour, dominated by the
training run and the calibration sweep.
"""

import os
import struct
import time

import numpy as np
import pytest

from cscnet.checkpoint import load_model, model_state, save_model
from cscnet.cli import main as cli_main
from cscnet.convops import ConvDictionary, adjoint, apply, random_dictionary
from cscnet.csclayer import CscLayer
from cscnet.data import (Dataset, NoiseSpec, channel_stats, corrupt,
                         load_mnist, synthesize_digits)
from cscnet.fista import (FistaConfig, kkt_residual, solve,
                          stable_recovery_trial)
from cscnet.nn import (SgdState, backward_model, cross_entropy, evaluate,
                       forward_model, parameters, sdnet_lite, train_model)
from cscnet.robust import adaptive_eval, calibrate, pgd_attack
from cscnet.tensor import Tensor
from cscnet.viz import sparsity_histogram

from oracles import (fd_check_directions, ista_matrix, materialize_operator,
                     naive_apply, rel_err)

TOPOLOGY = dict(in_channels=1, in_hw=(28, 28), channels=(32, 64), k=5,
                num_classes=10, iters=2)
LAM0 = 0.1
LAMBDA_GRID = tuple(np.linspace(0.1, 1.5, 15))
SEVERITIES = (0.0, 0.3, 0.4, 0.5, 0.65)
CAL_SUBSAMPLE = 500


def _report(num, name, ok, detail=""):
    line = "[%s] criterion %2d: %s" % ("PASS" if ok else "FAIL", num, name)
    if detail:
        line += "  (%s)" % detail
    print(line, flush=True)
    assert ok, line


# shared heavyweight fixtures --------------------------------------------------


@pytest.fixture(scope="session")
def digits_root(tmp_path_factory):
    root = os.environ.get("CSCNET_DATA", "data")
    if os.path.exists(os.path.join(root, "train-images-idx3-ubyte")):
        return root
    fresh = str(tmp_path_factory.mktemp("digits"))
    synthesize_digits(fresh)
    return fresh


@pytest.fixture(scope="session")
def train_ds(digits_root):
    ds = load_mnist(digits_root, "train")
    if ds.images.shape[0] > 12000:
        ds = ds.subset(range(12000))
    return ds


@pytest.fixture(scope="session")
def test_ds(digits_root):
    ds = load_mnist(digits_root, "test")
    if ds.images.shape[0] > 2000:
        ds = ds.subset(range(2000))
    return ds


@pytest.fixture(scope="session")
def trained(train_ds, test_ds):
    """The reference classifier trained with the stock recipe."""
    _, std = channel_stats(train_ds.images)
    model = sdnet_lite(lam=LAM0, seed=0, input_std=std,
                       **TOPOLOGY)
    state = SgdState(lr=0.1, momentum=0.9, weight_decay=5e-4,
                     schedule="cosine", horizon=5)
    t0 = time.time()
    history = train_model(model, train_ds.images.data, train_ds.labels,
                          state, epochs=5, batch_size=128, seed=0,
                          test_images=test_ds.images.data,
                          test_labels=test_ds.labels)
    return {"model": model, "history": history, "seconds": time.time() - t0}


@pytest.fixture(scope="session")
def robust_run(trained, train_ds, test_ds):
    """Calibration on corrupted training data plus the per-severity
    adaptive-vs-fixed evaluation on corrupted test data."""
    model = trained["model"]
    t0 = time.time()
    cal = calibrate(model, train_ds, "gaussian", list(SEVERITIES),
                    list(LAMBDA_GRID), subsample=CAL_SUBSAMPLE,
                    batch_size=128, seed=0)
    rows = []
    for j, sev in enumerate(SEVERITIES):
        noisy = corrupt(test_ds.images, NoiseSpec("gaussian", sev, seed=700 + j))
        rows.append(adaptive_eval(model, Dataset(noisy, test_ds.labels, "noisy"),
                                  cal, batch_size=128))
    return {"cal": cal, "rows": rows, "seconds": time.time() - t0}


# operator identities -----------------------------------------------------------


def test_c01_adjoint_identity_over_random_geometries():
    rng = np.random.default_rng(11)
    t0 = time.time()
    worst = 0.0
    for _ in range(100):
        m, c = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        k = int(rng.choice([1, 3, 5, 7]))
        s = int(rng.choice([1, 2]))
        h, w = (int(v) for v in rng.integers(6, 13, size=2))
        d = random_dictionary(m, c, k, stride=s, seed=int(rng.integers(1 << 31)))
        hc, wc = d.code_hw((h, w))
        z = Tensor(rng.standard_normal((2, c, hc, wc)))
        x = Tensor(rng.standard_normal((2, m, h, w)))
        lhs = float((apply(d, z, out_hw=(h, w)).data * x.data).sum())
        rhs = float((z.data * adjoint(d, x).data).sum())
        worst = max(worst, abs(lhs - rhs) / abs(lhs))
    elapsed = time.time() - t0
    _report(1, "apply/adjoint transpose identity",
            worst < 1e-10 and elapsed < 10.0,
            "max rel err %.2e over 100 triples, %.1f s" % (worst, elapsed))


def test_c02_apply_matches_nested_loop_correlation():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        m, c = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.choice([1, 3, 5]))
        s = int(rng.choice([1, 2]))
        h, w = (int(v) for v in rng.integers(5, 10, size=2))
        d = random_dictionary(m, c, k, stride=s, seed=int(rng.integers(1 << 31)))
        hc, wc = d.code_hw((h, w))
        z = rng.standard_normal((1, c, hc, wc))
        got = apply(d, Tensor(z), out_hw=(h, w)).data
        want = naive_apply(d.kernel.data, z, stride=s, out_hw=(h, w))
        worst = max(worst, float(np.abs(got - want).max()))
    _report(2, "apply equals the naive correlation",
            worst < 1e-12, "max abs diff %.2e over 50 cases" % worst)


# solver optimality --------------------------------------------------------------


def test_c03_unrolled_solver_reaches_the_lasso_optimum():
    rng = np.random.default_rng(3)
    t0 = time.time()
    worst_kkt = 0.0
    worst_gap = 0.0
    for i in range(20):
        c = int(rng.integers(2, 4))
        s = int(rng.choice([1, 2]))
        hw = int(rng.integers(6, 8))
        d = random_dictionary(1, c, 3, stride=s, seed=100 + i)
        x = rng.standard_normal((1, 1, hw, hw))
        x /= np.sqrt((x * x).sum())
        x = Tensor(x)
        trace = solve(d, x, FistaConfig(lam=0.05, iters=500),
                      keep_history=False)
        worst_kkt = max(worst_kkt,
                        kkt_residual(d, x, trace.z_final, 0.05))
        a_mat = materialize_operator(d.kernel.data, s, d.code_hw((hw, hw)),
                                     (hw, hw))
        _, obj_ref = ista_matrix(a_mat, x.data.reshape(-1), 0.05)
        worst_gap = max(worst_gap, abs(trace.objective - obj_ref))
    elapsed = time.time() - t0
    _report(3, "500-step solve is optimal (KKT + long-run oracle)",
            worst_kkt < 1e-4 and worst_gap < 1e-6 and elapsed < 60.0,
            "kkt %.2e, objective gap %.2e, %.1f s"
            % (worst_kkt, worst_gap, elapsed))


def test_c04_scalar_problem_recovers_the_soft_threshold():
    d = ConvDictionary(Tensor(np.ones((1, 1, 1, 1))))
    x = Tensor(np.full((1, 1, 1, 1), 1.0))
    trace = solve(d, x, FistaConfig(lam=0.3, iters=5), step=1.0,
                  keep_history=False)
    z = float(trace.z_final.data.reshape(()))
    _report(4, "1x1 lasso at unit step returns max(|x|-lam,0)*sign(x)",
            abs(z - 0.7) < 1e-6, "got %.9f, want 0.7" % z)


# gradient fidelity ---------------------------------------------------------------


def _layer_fd_medians(iters, seed):
    d = random_dictionary(1, 3, 3, seed=seed)
    layer = CscLayer(d, FistaConfig(lam=0.08, iters=iters), (8, 8))
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.standard_normal((2, 1, 8, 8)))
    z = layer.forward(x)
    g = rng.standard_normal(z.shape)
    out = layer.backward(Tensor(g))
    t = layer.cached_step

    def of_input(x_arr):
        tr = solve(layer.dict, Tensor(np.ascontiguousarray(x_arr)),
                   layer.cfg, step=t, keep_history=False)
        return float((g * tr.z_final.data).sum())

    def of_kernel(k_arr):
        d2 = ConvDictionary(Tensor(np.ascontiguousarray(k_arr)))
        tr = solve(d2, x, layer.cfg, step=t, keep_history=False)
        return float((g * tr.z_final.data).sum())

    err_x = fd_check_directions(of_input, x.data, out["grad_x"].data, rng)
    err_k = fd_check_directions(of_kernel, layer.dict.kernel.data,
                                out["grad_dict"].data, rng)
    return err_x, err_k


def test_c05_backward_matches_finite_differences():
    t0 = time.time()
    worst_layer = 0.0
    for ki, iters in enumerate((1, 2, 4)):
        err_x, err_k = _layer_fd_medians(iters, seed=40 + ki)
        worst_layer = max(worst_layer, err_x, err_k)

    # full classifier: central differences on sampled parameter entries
    model = sdnet_lite(in_channels=1, in_hw=(8, 8), channels=(3, 4), k=3,
                       num_classes=3, lam=0.12, iters=2, seed=5)
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((4, 1, 8, 8)))
    labels = [0, 1, 2, 1]
    out = forward_model(model, x, "train")
    ce = cross_entropy(out["logits"], labels)
    grads = backward_model(model, ce["grad_logits"])["param_grads"]

    def loss_with(key, probe):
        idx, name = key.split(".")[1:]
        blk = model.layers[int(idx)]
        if name == "kernel":
            d = ConvDictionary(Tensor(probe), stride=blk.dict.stride)
            blk.dict = d
            blk._step_kernel = d.kernel  # probe the fixed-step map
        else:
            blk.set_trainable(name, probe)
        res = forward_model(model, x, "train")
        return cross_entropy(res["logits"], labels)["loss"]

    h = 1e-5
    errs = []
    for key, arr, _ in parameters(model):
        base = arr.copy()
        flats = rng.choice(arr.size, size=min(10, arr.size), replace=False)
        for flat in flats:
            up, dn = base.copy(), base.copy()
            up.reshape(-1)[flat] += h
            dn.reshape(-1)[flat] -= h
            fd = (loss_with(key, up) - loss_with(key, dn)) / (2 * h)
            errs.append(rel_err(fd, grads[key].reshape(-1)[flat], floor=1e-6))
        loss_with(key, base)  # restore
    med_model = float(np.median(errs))
    elapsed = time.time() - t0
    _report(5, "hand-written gradients match central differences",
            worst_layer <= 1e-4 and med_model <= 1e-3 and elapsed < 120.0,
            "layer median %.2e (K=1,2,4), model median %.2e over %d entries, "
            "%.1f s" % (worst_layer, med_model, len(errs), elapsed))


# sparse recovery -----------------------------------------------------------------


def test_c06_single_spike_recovery_and_noise_scaling():
    t0 = time.time()
    contained = 0
    lo, hi = [], []
    for seed in range(100):
        a = stable_recovery_trial(2, 2, 3, 1, 0.01, seed)
        b = stable_recovery_trial(2, 2, 3, 1, 0.02, seed)
        contained += a["support_contained"]
        lo.append(a["abs_error"])
        hi.append(b["abs_error"])
    ratio = float(np.median(hi) / np.median(lo))
    elapsed = time.time() - t0
    _report(6, "spike support survives noise, error scales linearly",
            contained >= 95 and 1.5 <= ratio <= 2.5 and elapsed < 120.0,
            "containment %d/100, doubling ratio %.2f, %.1f s"
            % (contained, ratio, elapsed))


# training ------------------------------------------------------------------------


def test_c07_classifier_trains_to_97_percent(trained):
    history = trained["history"]
    best = max(row["test_accuracy"] for row in history)
    ok = best >= 0.97 and len(history) <= 5 and trained["seconds"] < 1800.0
    _report(7, "reference model reaches 97% test accuracy in 5 epochs",
            ok, "best %.4f after %d epochs, %.0f s"
            % (best, len(history), trained["seconds"]))


# robust inference ----------------------------------------------------------------


def test_c08_residual_calibration_helps_under_corruption(robust_run):
    cal = robust_run["cal"]
    rows = robust_run["rows"]
    lams = [lam for lam, _ in cal.points]
    rs = [r for _, r in cal.points]
    monotone_lam = all(b >= a for a, b in zip(lams, lams[1:]))
    monotone_r = all(b >= a for a, b in zip(rs, rs[1:]))
    never_worse = all(row["accuracy"] >= row["fixed_accuracy"]
                      for row in rows[1:])
    strict_top = rows[-1]["accuracy"] > rows[-1]["fixed_accuracy"]
    ok = (monotone_lam and monotone_r and never_worse and strict_top
          and robust_run["seconds"] < 1200.0)
    _report(8, "adaptive lambda never hurts and wins at the top severity",
            ok, "lam_c %s, adaptive-fixed gap at top %.4f, %.0f s"
            % (["%.2f" % l for l in lams],
               rows[-1]["accuracy"] - rows[-1]["fixed_accuracy"],
               robust_run["seconds"]))


def test_c09_accuracy_vs_lambda_peaks_inside_the_grid(robust_run):
    cal = robust_run["cal"]
    interior = []
    for sev in SEVERITIES[1:]:
        accs = [acc for _, acc in cal.curves[sev]]
        k = int(np.argmax(accs))
        interior.append(0 < k < len(accs) - 1)
    _report(9, "corrupted accuracy-vs-lambda has an interior peak",
            all(interior),
            "argmax indices %s of %d-point grid"
            % ([int(np.argmax([a for _, a in cal.curves[s]]))
                for s in SEVERITIES[1:]], len(LAMBDA_GRID)))


def test_c10_trained_codes_are_mostly_exact_zeros(trained, test_ds):
    model = trained["model"]
    n = min(1000, test_ds.images.shape[0])
    hist = sparsity_histogram(model, test_ds.subset(range(n)).images,
                              batch_size=128)
    _report(10, "first-layer code zero fraction exceeds 0.3 at lam=0.1",
            hist["zero_fraction"] > 0.3,
            "zero fraction %.3f over %d images" % (hist["zero_fraction"], n))


def test_c11_pgd_respects_constraints_and_lowers_accuracy(trained, test_ds):
    model = trained["model"]
    sub = test_ds.subset(range(256))
    labels = np.asarray(sub.labels)
    x0 = sub.images.data

    adv = pgd_attack(model, x0, labels, norm="linf", eps=0.1, iters=20, seed=0)
    linf_ok = (float(np.abs(adv - x0).max()) <= 0.1
               and float(adv.min()) >= 0.0 and float(adv.max()) <= 1.0)

    small = x0[:64]
    adv2 = pgd_attack(model, small, labels[:64], norm="l2", eps=1.0,
                      iters=10, seed=0)
    norms = np.sqrt(((adv2 - small) ** 2).sum(axis=(1, 2, 3)))
    l2_ok = (float(norms.max()) <= 1.0
             and float(adv2.min()) >= 0.0 and float(adv2.max()) <= 1.0)

    clean = evaluate(model, x0, labels, batch_size=128)["accuracy"]
    robust = evaluate(model, adv, labels, batch_size=128)["accuracy"]
    _report(11, "attacks stay inside their balls and do damage",
            linf_ok and l2_ok and robust < clean,
            "max|delta| %.17g, max l2 %.17g, clean %.3f -> adversarial %.3f"
            % (float(np.abs(adv - x0).max()), float(norms.max()),
               clean, robust))


# persistence and determinism ------------------------------------------------------


def _write_idx(path, magic, dims, payload):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">%dI" % len(dims), *dims))
        fh.write(payload.tobytes())


def _tiny_corpus(root):
    rng = np.random.default_rng(9)
    for prefix, n in (("train", 64), ("t10k", 16)):
        images = rng.integers(0, 256, size=(n, 28, 28)).astype(np.uint8)
        labels = rng.integers(0, 10, size=n).astype(np.uint8)
        _write_idx(os.path.join(root, "%s-images-idx3-ubyte" % prefix),
                   2051, (n, 28, 28), images)
        _write_idx(os.path.join(root, "%s-labels-idx1-ubyte" % prefix),
                   2049, (n,), labels)


def test_c12_checkpoints_and_seeded_runs_are_bit_exact(trained, test_ds,
                                                       tmp_path):
    model = trained["model"]
    p1 = tmp_path / "model.ckpt"
    save_model(str(p1), model, TOPOLOGY)
    model2, _ = load_model(str(p1))

    s1, s2 = model_state(model), model_state(model2)
    state_ok = (s1.keys() == s2.keys()
                and all(s1[k].tobytes() == s2[k].tobytes() for k in s1))
    xb = Tensor(np.ascontiguousarray(test_ds.images.data[:64]))
    logits1 = forward_model(model, xb, "eval")["logits"].data
    logits2 = forward_model(model2, xb, "eval")["logits"].data
    forward_ok = logits1.tobytes() == logits2.tobytes()
    p2 = tmp_path / "again.ckpt"
    save_model(str(p2), model2, TOPOLOGY)
    file_ok = p1.read_bytes() == p2.read_bytes()

    corpus = tmp_path / "tiny"
    corpus.mkdir()
    _tiny_corpus(str(corpus))
    outs = []
    for run in ("r1", "r2"):
        out_dir = tmp_path / run
        rc = cli_main(["train", "--dataset", "mnist",
                       "--data-root", str(corpus),
                       "--out-dir", str(out_dir),
                       "--epochs", "1", "--seed", "3",
                       "--set", "channels=4", "--set", "k=3",
                       "--set", "iters=1", "--set", "batch_size=32"])
        assert rc == 0
        outs.append(out_dir)
    metrics_ok = ((outs[0] / "metrics.csv").read_bytes()
                  == (outs[1] / "metrics.csv").read_bytes())
    ckpt_ok = ((outs[0] / "final.ckpt").read_bytes()
               == (outs[1] / "final.ckpt").read_bytes())

    _report(12, "checkpoint round trip and seeded training are bit-exact",
            state_ok and forward_ok and file_ok and metrics_ok and ckpt_ok,
            "state %s, forward %s, refile %s, metrics %s, ckpt %s"
            % (state_ok, forward_ok, file_ok, metrics_ok, ckpt_ok))
