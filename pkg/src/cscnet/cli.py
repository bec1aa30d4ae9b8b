"""Command-line surface: train, eval, robust, ablate-k, viz, attack, solve.

Every run is configured by the same flat key=value space (config file plus
--set overrides, see config.SCHEMA); configs validate fully before any
output file is created. Commands exit 0 on success and 1 with a one-line
diagnostic on failure.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from .checkpoint import load_model, save_model
from .config import RunConfig, parse_config_file, parse_lambda_grid
from .convops import apply, random_dictionary
from .data import Dataset, NoiseSpec, augment, channel_stats, corrupt, \
    load_cifar10, load_mnist, synthesize_digits
from .fista import FistaConfig, kkt_residual, solve
from .nn import SgdState, evaluate, sdnet_lite, train_model
from .robust import adaptive_eval, calibrate, pgd_attack, save_calibration
from .tensor import Tensor
from .viz import dictionary_grid, histogram_csv, psnr, read_ppm, reconstruct, \
    sparsity_histogram, write_ppm

__all__ = ["main"]


# configuration plumbing -------------------------------------------------------------


_FLAG_KEYS = ("dataset", "data_root", "out_dir", "seed", "epochs", "lam",
              "iters", "kind", "severities", "lambda_grid", "subsample",
              "norm", "eps", "step", "attack_iters", "count")


def _add_config_flags(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")
    for key in _FLAG_KEYS:
        p.add_argument("--" + key.replace("_", "-"), dest="opt_" + key)


def _build_config(args):
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {}
    for key in _FLAG_KEYS:
        value = getattr(args, "opt_" + key, None)
        if value is not None:
            overrides[key] = value
    for item in args.set:
        if "=" not in item:
            raise ValueError("--set expects key=value, got %r" % item)
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    return RunConfig(file_values, overrides)


def _load_split(cfg, split):
    if cfg.dataset == "cifar10":
        return load_cifar10(cfg.data_root, split)
    if cfg.dataset == "digits":
        marker = os.path.join(cfg.data_root, "train-images-idx3-ubyte")
        if not (os.path.exists(marker) or os.path.exists(marker + ".gz")):
            synthesize_digits(cfg.data_root)
        return load_mnist(cfg.data_root, split)
    return load_mnist(cfg.data_root, split)


def _build_model(cfg, train_images):
    # scale-only: keeps the zero background of [0,1] images exactly at
    # zero in model space, which is what makes code sparsity and the
    # residual-lambda threshold mechanism observable
    _, std = channel_stats(train_images)
    return sdnet_lite(lam=cfg.lam, seed=cfg.seed, input_std=std,
                      **cfg.topology())


def _ckpt_extra(cfg):
    return {"train.dataset": cfg.dataset, "train.lam0": repr(cfg.lam),
            "train.seed": str(cfg.seed)}


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(
                repr(v) if isinstance(v, float) else str(v) for v in row)
                + "\n")


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


# commands ---------------------------------------------------------------------------


def cmd_train(args):
    cfg = _build_config(args)
    train = _load_split(cfg, "train")
    test = _load_split(cfg, "test")
    model = _build_model(cfg, train.images)
    state = SgdState(lr=cfg.lr, momentum=cfg.momentum,
                     weight_decay=cfg.weight_decay, schedule=cfg.schedule,
                     horizon=cfg.horizon or max(cfg.epochs, 1))
    os.makedirs(cfg.out_dir, exist_ok=True)
    topology = cfg.topology()
    extra = _ckpt_extra(cfg)

    augment_fn = None
    if cfg.pad_crop or cfg.hflip:
        def augment_fn(images, rng):
            return augment(Tensor(images), cfg.pad_crop, cfg.hflip, rng).data

    best = {"accuracy": -1.0}

    def log(row):
        print("epoch %d loss %.4f acc %.4f lr %.4f residual %.4f"
              % (row["epoch"], row["train_loss"], row["test_accuracy"],
                 row["lr"], row["mean_residual"]))
        sys.stdout.flush()
        if row["test_accuracy"] > best["accuracy"]:
            best["accuracy"] = row["test_accuracy"]
            save_model(os.path.join(cfg.out_dir, "best.ckpt"), model,
                       topology, extra)

    history = train_model(model, train.images.data, train.labels, state,
                          epochs=cfg.epochs, batch_size=cfg.batch_size,
                          seed=cfg.seed, test_images=test.images.data,
                          test_labels=test.labels,
                          stop_accuracy=cfg.stop_accuracy,
                          augment_fn=augment_fn, log=log)
    _write_csv(os.path.join(cfg.out_dir, "metrics.csv"),
               "epoch,train_loss,test_accuracy,lr,mean_residual",
               [(r["epoch"], r["train_loss"], r["test_accuracy"], r["lr"],
                 r["mean_residual"]) for r in history])
    save_model(os.path.join(cfg.out_dir, "final.ckpt"), model, topology, extra)
    if best["accuracy"] < 0:
        save_model(os.path.join(cfg.out_dir, "best.ckpt"), model, topology,
                   extra)
    print("wrote %s" % os.path.join(cfg.out_dir, "metrics.csv"))
    return 0


def cmd_eval(args):
    cfg = _build_config(args)
    model, _ = load_model(args.checkpoint)
    data = _load_split(cfg, args.split)
    if args.lam_sweep:
        grid = parse_lambda_grid(args.lam_sweep)
        rows = []
        for lam in grid:
            model.set_lambda(lam)
            rep = evaluate(model, data.images.data, data.labels)
            rows.append((float(lam), rep["accuracy"]))
        if args.out:
            _write_csv(args.out, "lambda,accuracy", rows)
            print("wrote %s" % args.out)
        else:
            print("lambda,accuracy")
            for lam, acc in rows:
                print("%s,%s" % (_fmt(lam), _fmt(acc)))
        return 0
    if args.lam is not None:
        model.set_lambda(float(args.lam))
    rep = evaluate(model, data.images.data, data.labels)
    cap = min(data.images.shape[0], 2000)
    zero_fraction = sparsity_histogram(
        model, data.images.data[:cap])["zero_fraction"]
    print("accuracy=%s" % _fmt(rep["accuracy"]))
    print("mean_residual=%s" % _fmt(rep["mean_residual"]))
    print("zero_fraction=%s" % _fmt(zero_fraction))
    return 0


def cmd_robust(args):
    cfg = _build_config(args)
    model, _ = load_model(args.checkpoint)
    train = _load_split(cfg, "train")
    test = _load_split(cfg, "test")
    cal = calibrate(model, train, cfg.kind, cfg.severities, cfg.lambda_grid,
                    subsample=cfg.subsample, seed=cfg.seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    save_calibration(os.path.join(cfg.out_dir, "calibration.txt"), cal)
    rows = []
    print("severity,fixed_accuracy,adaptive_accuracy,lambda_used,r_test")
    for j, sev in enumerate(cfg.severities):
        noisy = corrupt(test.images, NoiseSpec(cfg.kind, sev,
                                               seed=cfg.seed + 500 + j))
        noisy_ds = Dataset(noisy, test.labels, "%s-%s" % (test.name, sev))
        rep = adaptive_eval(model, noisy_ds, cal)
        rows.append((sev, rep["fixed_accuracy"], rep["accuracy"],
                     rep["lambda_used"]))
        print(",".join(_fmt(v) for v in
                       (sev, rep["fixed_accuracy"], rep["accuracy"],
                        rep["lambda_used"], rep["r_test"])))
        sys.stdout.flush()
    _write_csv(os.path.join(cfg.out_dir, "robust.csv"),
               "severity,fixed_accuracy,adaptive_accuracy,lambda_used", rows)
    print("wrote %s" % os.path.join(cfg.out_dir, "robust.csv"))
    return 0


def cmd_ablate_k(args):
    cfg = _build_config(args)
    ks = [int(tok) for tok in args.k_list.split(",") if tok.strip()]
    if not ks:
        raise ValueError("k list is empty")
    if args.eval_only and not args.checkpoint:
        raise ValueError("--eval-only needs --checkpoint")
    test = _load_split(cfg, "test")
    severity = cfg.severities[-1]
    noisy = corrupt(test.images, NoiseSpec(cfg.kind, severity,
                                           seed=cfg.seed + 500))
    rows = []
    for k in ks:
        if args.eval_only:
            model, _ = load_model(args.checkpoint)
            for layer in model.csc_layers():
                layer.cfg = dataclasses.replace(layer.cfg, iters=k)
        else:
            train = _load_split(cfg, "train")
            model = _build_model(cfg, train.images)
            for layer in model.csc_layers():
                layer.cfg = dataclasses.replace(layer.cfg, iters=k)
            state = SgdState(lr=cfg.lr, momentum=cfg.momentum,
                             weight_decay=cfg.weight_decay,
                             schedule=cfg.schedule,
                             horizon=cfg.horizon or max(cfg.epochs, 1))
            train_model(model, train.images.data, train.labels, state,
                        epochs=cfg.epochs, batch_size=cfg.batch_size,
                        seed=cfg.seed, test_images=test.images.data,
                        test_labels=test.labels,
                        stop_accuracy=cfg.stop_accuracy)
        clean = evaluate(model, test.images.data, test.labels)["accuracy"]
        corr = evaluate(model, noisy.data, test.labels)["accuracy"]
        first = model.layers[model.csc_indices[0]]
        cap = min(test.images.shape[0], cfg.count)
        x_std = ((test.images.data[:cap] - model.input_mean)
                 / model.input_std)
        code = first.forward(Tensor(x_std))
        kkt = kkt_residual(first.dict, Tensor(x_std), code, first.cfg.lam)
        rows.append((k, clean, corr, float(kkt)))
        print("k=%d clean=%s corrupted=%s kkt=%s"
              % (k, _fmt(clean), _fmt(corr), _fmt(float(kkt))))
        sys.stdout.flush()
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_csv(os.path.join(cfg.out_dir, "ablate_k.csv"),
               "k,clean_accuracy,corrupted_accuracy,kkt_first_layer", rows)
    print("wrote %s" % os.path.join(cfg.out_dir, "ablate_k.csv"))
    return 0


def cmd_viz(args):
    cfg = _build_config(args)
    model, _ = load_model(args.checkpoint)
    data = _load_split(cfg, "test")
    count = min(args.images, data.images.shape[0])
    level = args.layer
    os.makedirs(cfg.out_dir, exist_ok=True)

    first = model.layers[model.csc_indices[0]]
    if first.dict.kernel.shape[0] in (1, 3):
        atoms_path = os.path.join(cfg.out_dir, "atoms.ppm")
        write_ppm(atoms_path, dictionary_grid(first.dict))
        print("wrote %s" % atoms_path)

    x = Tensor(np.ascontiguousarray(data.images.data[:count]))
    recon = reconstruct(model, x, level)
    for i in range(count):
        orig_path = os.path.join(cfg.out_dir, "orig_%02d.ppm" % i)
        recon_path = os.path.join(cfg.out_dir,
                                  "recon_l%d_%02d.ppm" % (level, i))
        write_ppm(orig_path, x.data[i])
        write_ppm(recon_path, np.clip(recon.data[i], 0.0, 1.0))
    print("wrote %d reconstruction pairs (psnr=%s)"
          % (count, _fmt(psnr(np.clip(recon.data, 0.0, 1.0), x.data))))

    cap = min(data.images.shape[0], 2000)
    hist = sparsity_histogram(model, data.images.data[:cap])
    hist_path = os.path.join(cfg.out_dir, "hist.csv")
    histogram_csv(hist_path, hist)
    print("wrote %s (zero_fraction=%s)"
          % (hist_path, _fmt(hist["zero_fraction"])))
    return 0


def cmd_attack(args):
    cfg = _build_config(args)
    model, _ = load_model(args.checkpoint)
    data = _load_split(cfg, "test")
    count = min(cfg.count, data.images.shape[0])
    images = data.images.data[:count]
    labels = np.asarray(data.labels[:count], dtype=np.int64)
    clean = evaluate(model, images, labels)["accuracy"]
    adv = pgd_attack(model, images, labels, norm=cfg.norm, eps=cfg.eps,
                     step=cfg.step, iters=cfg.attack_iters, seed=cfg.seed)
    robust = evaluate(model, adv, labels)["accuracy"]
    lines = ["norm=%s" % cfg.norm, "eps=%s" % _fmt(cfg.eps),
             "step=%s" % _fmt(cfg.step if cfg.step is not None
                              else cfg.eps / 4),
             "iters=%d" % cfg.attack_iters, "count=%d" % count,
             "clean_accuracy=%s" % _fmt(clean),
             "robust_accuracy=%s" % _fmt(robust)]
    os.makedirs(cfg.out_dir, exist_ok=True)
    report = os.path.join(cfg.out_dir, "attack.txt")
    with open(report, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    print("wrote %s" % report)
    return 0


def cmd_solve(args):
    pixels = read_ppm(args.image)
    x = Tensor(np.ascontiguousarray(pixels[None]))
    d = random_dictionary(pixels.shape[0], args.atoms, args.k, seed=args.seed)
    fcfg = FistaConfig(lam=args.lam, iters=args.solve_iters)
    trace = solve(d, x, fcfg, keep_history=False)
    z = trace.z_final
    recon = apply(d, z, out_hw=pixels.shape[1:])
    zero_fraction = float(np.mean(z.data == 0.0))
    print("objective=%s" % _fmt(trace.objective))
    print("kkt_residual=%s" % _fmt(float(kkt_residual(d, x, z, args.lam))))
    print("residual_norm=%s" % _fmt(float(trace.residual_norms[0])))
    print("zero_fraction=%s" % _fmt(zero_fraction))
    print("psnr=%s" % _fmt(psnr(np.clip(recon.data[0], 0.0, 1.0), pixels)))
    if args.out:
        write_ppm(args.out, np.clip(recon.data[0], 0.0, 1.0))
        print("wrote %s" % args.out)
    return 0


# entry point ------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cscnet",
        description="convolutional sparse coding toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model, write checkpoints")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--lam-override", dest="lam", type=float, default=None)
    p.add_argument("--lam-sweep", help="lo:hi:n or comma list; emits CSV")
    p.add_argument("--out", help="CSV destination for --lam-sweep")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("robust", help="calibrate lambda(r) and evaluate")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_robust)

    p = sub.add_parser("ablate-k", help="accuracy and KKT vs unroll depth")
    _add_config_flags(p)
    p.add_argument("--k-list", default="2,4,8")
    p.add_argument("--checkpoint")
    p.add_argument("--eval-only", action="store_true")
    p.set_defaults(func=cmd_ablate_k)

    p = sub.add_parser("viz", help="atom grids, reconstructions, histogram")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--layer", type=int, default=1)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("attack", help="PGD evaluation of a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("solve", help="run the lasso solver on one image")
    p.add_argument("--image", required=True, help="P5/P6 file")
    p.add_argument("--atoms", type=int, default=16)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--lam", type=float, default=0.05)
    p.add_argument("--solve-iters", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the reconstruction here")
    p.set_defaults(func=cmd_solve)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
