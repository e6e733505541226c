"""Command-line entry point.

Subcommands: generate | train | eval | infer | bench | verify. Exit codes:
0 success, 1 usage error, 2 runtime failure, 3 verification failure.

Flags may come from a flat ``key=value`` config file (--config); explicit
command-line flags win. ``--deterministic`` pins the BLAS thread pools to one
thread (set before numpy is imported, which is why heavy imports live inside
the command handlers) so repeated runs are byte-identical.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def read_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def merge_options(args, file_cfg: dict[str, str], defaults: dict):
    """CLI flag > config file > default; values coerced to the default's type."""
    eff = {}
    for key, default in defaults.items():
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            eff[key] = cli_val
        elif key in file_cfg:
            raw = file_cfg[key]
            try:
                if isinstance(default, bool):
                    eff[key] = raw.lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    eff[key] = int(raw)
                elif isinstance(default, float):
                    eff[key] = float(raw)
                else:
                    eff[key] = raw
            except ValueError as exc:
                raise UsageError(f"config key {key}={raw!r}: {exc}") from exc
        else:
            eff[key] = default
    return eff


def parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in str(text).split(",") if s != ""]
    except ValueError as exc:
        raise UsageError(f"bad seeds list {text!r}") from exc


def build_parser() -> _Parser:
    p = _Parser(prog="spironet", description="Vessel segmentation: synthetic data, training, evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value options file")
        sp.add_argument("--seed", type=int, help="single seed (overrides seeds list)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--precision", choices=("f32", "f64"))
        sp.add_argument("--deterministic", action="store_true", default=None,
                        help="single-threaded math for byte-identical runs")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g)
    g.add_argument("--count", type=int)
    g.add_argument("--train-frac", type=float, dest="train_frac")
    g.add_argument("--size", type=int)
    g.add_argument("--force", action="store_true", default=None)

    t = sub.add_parser("train", help="train one model per seed")
    common(t)
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--seeds", help="comma-separated seed list")
    t.add_argument("--variant", help="ablation variant: I..VII or full")
    t.add_argument("--size", type=int)
    t.add_argument("--base-channels", type=int, dest="base_channels")
    t.add_argument("--stages", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lr-init", type=float, dest="lr_init")
    t.add_argument("--no-augment", action="store_true", default=None, dest="no_augment")

    e = sub.add_parser("eval", help="evaluate checkpoints, write per-image metrics CSVs")
    common(e)
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--split", choices=("train", "test"))
    e.add_argument("--ckpt", nargs="+", required=True, help="checkpoint file(s)")

    i = sub.add_parser("infer", help="segment one PGM image")
    common(i)
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--mask-out", dest="mask_out", help="output mask PGM path")
    i.add_argument("--prob-out", dest="prob_out", help="optional probability map PGM")

    b = sub.add_parser("bench", help="eval-mode throughput")
    common(b)
    b.add_argument("--ckpt", required=True)
    b.add_argument("--batch-size", type=int, dest="batch_size")
    b.add_argument("--iters", type=int)
    b.add_argument("--repeats", type=int)

    v = sub.add_parser("verify", help="run oracle and invariant suites")
    common(v)
    v.add_argument("--inject-fault", dest="inject_fault",
                   help="test hook: perturb the named suite to prove detection")
    return p


# ---------------------------------------------------------------------------
# command implementations (heavy imports kept local)
# ---------------------------------------------------------------------------

def cmd_generate(args, file_cfg) -> int:
    from .data import SynthConfig, generate_dataset, split_dataset, write_dataset

    opts = merge_options(args, file_cfg, dict(
        out="dataset", seed=0, count=250, train_frac=0.8, size=64, force=False,
        n_branches=6, width_min=1.6, width_max=3.6, noise_sigma=0.05,
        bg_gradient=0.15, n_distractors=2,
    ))
    root = Path(opts["out"])
    if root.exists() and any(root.iterdir()) and not opts["force"]:
        raise UsageError(f"target {root} exists and is not empty (use --force)")
    cfg = SynthConfig(
        size=opts["size"], n_branches=opts["n_branches"],
        width_range=(opts["width_min"], opts["width_max"]),
        noise_sigma=opts["noise_sigma"], bg_gradient=opts["bg_gradient"],
        n_distractors=opts["n_distractors"], seed=opts["seed"],
    )
    samples = generate_dataset(cfg, opts["count"])
    train, test = split_dataset(samples, opts["train_frac"], seed=opts["seed"])
    write_dataset(root, train, test)
    print(f"wrote {len(train)} train / {len(test)} test samples to {root}")
    return EXIT_OK


def cmd_train(args, file_cfg) -> int:
    from .data import load_dataset
    from .network import count_params
    from .train import TrainSettings, train_one_seed

    opts = merge_options(args, file_cfg, dict(
        data="dataset", out="runs", seeds="0,1,2", variant="full", size=64,
        base_channels=16, stages=4, epochs=60, batch_size=4, lr_init=0.05,
        precision="f32", no_augment=False,
    ))
    if opts["epochs"] < 1 or opts["batch_size"] < 1:
        raise UsageError("epochs and batch_size must be >= 1")
    data_dir = Path(opts["data"])
    if not data_dir.exists():
        raise UsageError(f"dataset directory {data_dir} not found")
    seeds = [args.seed] if args.seed is not None else parse_seeds(opts["seeds"])

    ds = load_dataset(data_dir)
    settings = TrainSettings(
        variant=opts["variant"], input_size=opts["size"],
        base_channels=opts["base_channels"], stages=opts["stages"],
        epochs=opts["epochs"], batch_size=opts["batch_size"],
        lr_init=opts["lr_init"], precision=opts["precision"],
        augment=not opts["no_augment"],
    )
    for seed in seeds:
        t0 = time.monotonic()
        summary = train_one_seed(settings, ds["train"], ds["test"], seed, opts["out"])
        dt = time.monotonic() - t0
        print(
            f"seed {seed}: best val IoU {summary['best_val_iou']:.4f} "
            f"({summary['n_params']} params, {dt:.1f}s) -> {summary['checkpoint']}"
        )
    return EXIT_OK


def cmd_eval(args, file_cfg) -> int:
    import numpy as np

    from .data import load_dataset
    from .metrics import METRIC_NAMES, evaluate_dataset, write_metrics_csv
    from .network import load_checkpoint

    opts = merge_options(args, file_cfg, dict(data="dataset", out="eval", split="test"))
    ds = load_dataset(Path(opts["data"]))
    samples = ds[opts["split"]]
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    per_ckpt_means = []
    for ckpt in args.ckpt:
        params, meta = load_checkpoint(ckpt)
        if samples and samples[0].image.shape[0] != params.config.input_size:
            raise RuntimeError(
                f"checkpoint expects {params.config.input_size}px images, "
                f"dataset has {samples[0].image.shape[0]}px"
            )
        rows, mean, std = evaluate_dataset(params, samples)
        csv_path = out_dir / f"metrics_{Path(ckpt).stem}.csv"
        write_metrics_csv(csv_path, rows, mean, std)
        per_ckpt_means.append(mean)
        pretty = " ".join(f"{m}={mean[m]:.4f}" for m in METRIC_NAMES)
        print(f"{ckpt}: {pretty} ({len(rows)} images) -> {csv_path}")

    agg_mean = {m: float(np.mean([x[m] for x in per_ckpt_means])) for m in METRIC_NAMES}
    agg_std = {m: float(np.std([x[m] for x in per_ckpt_means])) for m in METRIC_NAMES}
    with open(out_dir / "aggregate.csv", "w") as f:
        f.write("metric,mean,std\n")
        for m in METRIC_NAMES:
            f.write(f"{m},{agg_mean[m]:.10g},{agg_std[m]:.10g}\n")
    pretty = " ".join(f"{m}={agg_mean[m]:.4f}+/-{agg_std[m]:.4f}" for m in METRIC_NAMES)
    print(f"aggregate over {len(per_ckpt_means)} checkpoint(s): {pretty}")
    return EXIT_OK


def cmd_infer(args, file_cfg) -> int:
    import numpy as np

    from .data import read_pgm, write_pgm
    from .network import forward, load_checkpoint
    from .tensor import Tensor, no_grad
    from .tensor import _sigmoid_stable  # stable probability map

    opts = merge_options(args, file_cfg, dict(out="."))
    params, _ = load_checkpoint(args.ckpt)
    img = read_pgm(args.image)
    size = params.config.input_size
    if img.shape != (size, size):
        raise RuntimeError(
            f"input is {img.shape[0]}x{img.shape[1]} but this checkpoint expects "
            f"{size}x{size}; resize or regenerate the input"
        )
    x = Tensor(img[None, None].astype(params.config.dtype))
    with no_grad():
        logits = forward(params, x, train=False)
    mask = (logits.data[0, 0] >= 0.0).astype(np.float64)
    mask_out = args.mask_out or str(Path(opts["out"]) / (Path(args.image).stem + "_mask.pgm"))
    Path(mask_out).parent.mkdir(parents=True, exist_ok=True)
    write_pgm(mask_out, mask)
    print(f"wrote mask {mask_out} ({int(mask.sum())} foreground px)")
    if args.prob_out:
        write_pgm(args.prob_out, _sigmoid_stable(logits.data[0, 0].astype(np.float64)))
        print(f"wrote probability map {args.prob_out}")
    return EXIT_OK


def bench_forward(params, x, iters: int, repeats: int) -> list[float]:
    """Timed eval-mode forwards; pure compute, no file I/O inside."""
    from .network import forward
    from .tensor import no_grad

    fps = []
    n = x.data.shape[0]
    with no_grad():
        forward(params, x, train=False)  # warm-up
        for _ in range(repeats):
            t0 = time.perf_counter()
            for _ in range(iters):
                forward(params, x, train=False)
            dt = time.perf_counter() - t0
            fps.append(n * iters / dt)
    return fps


def cmd_bench(args, file_cfg) -> int:
    import numpy as np

    from .network import load_checkpoint
    from .tensor import Tensor

    opts = merge_options(args, file_cfg, dict(batch_size=4, iters=5, repeats=5, seed=0))
    params, _ = load_checkpoint(args.ckpt)
    size = params.config.input_size
    rng = np.random.default_rng(opts["seed"])
    x = Tensor(rng.random((opts["batch_size"], 1, size, size)).astype(params.config.dtype))
    fps = bench_forward(params, x, opts["iters"], opts["repeats"])
    mean, std = float(np.mean(fps)), float(np.std(fps))
    print(f"throughput: {mean:.2f} +/- {std:.2f} FPS "
          f"(batch {opts['batch_size']}, {opts['iters']} iters x {opts['repeats']} repeats, "
          f"{size}x{size} input)")
    return EXIT_OK


def cmd_verify(args, file_cfg) -> int:
    from .verify import run_all

    results = run_all(inject_fault=args.inject_fault)
    for r in results:
        print(r.line())
    if all(r.passed for r in results):
        print("verification: all suites passed")
        return EXIT_OK
    failed = ", ".join(r.name for r in results if not r.passed)
    print(f"verification: FAILED ({failed})")
    return EXIT_VERIFY


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "deterministic", None):
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
            os.environ[var] = "1"
    try:
        file_cfg = read_config_file(args.config) if getattr(args, "config", None) else {}
        return COMMANDS[args.command](args, file_cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
