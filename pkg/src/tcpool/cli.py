"""Command-line interface.

Subcommands: ``pool`` (run a head's pooling on a clip file), ``equivalence``
(scan the two pooling routes against each other), ``gradcheck``
(finite-difference sweeps), ``sqrt-bench`` (square-root accuracy table),
``train`` (desk-scale synthetic training), and ``info`` (parameter and
floating-point-cost ledgers).

Exit codes are a stable contract: 0 success, 1 check failure, 2 file or
format error, 3 usage error.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import checks
from .head import (
    HeadConfig,
    clip_representation,
    count_flops,
    count_params,
    flop_breakdown,
    init_head,
    param_breakdown,
)
from .io import (
    FormatError,
    head_config_from_mapping,
    load_checkpoint,
    parse_config_text,
    read_clip,
    save_checkpoint,
    write_tensor,
)
from .tensor import ShapeError
from .train import OptimState, SyntheticSpec, train_loop

__all__ = ["main", "UsageError"]


class UsageError(Exception):
    """Bad flags or inconsistent option/shape combinations (exit code 3)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); route to our code 3
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in str(text).split(",") if part.strip() != ""]
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from None


# ---------------------------------------------------------------------------
# pool


def _cmd_pool(args) -> int:
    t0 = time.perf_counter()
    clip, _label = read_clip(args.input)
    if args.params:
        params = load_checkpoint(args.params)
        cfg = params.config
        if cfg.variant != args.variant:
            raise UsageError(f"checkpoint holds a {cfg.variant!r} head, "
                             f"--variant says {args.variant!r}")
        if clip.channels != cfg.channels:
            raise UsageError(f"clip has {clip.channels} channels, "
                             f"checkpoint expects {cfg.channels}")
    else:
        try:
            cfg = HeadConfig(
                variant=args.variant,
                channels=clip.channels,
                proj_dim=min(args.d, clip.channels) if args.variant == "gap" else args.d,
                frames=clip.length,
                positions=clip.positions,
                kernel_size=args.kappa,
                sqrt_iterations=args.K,
                centered=args.centered,
                seed=args.seed,
            )
        except (ShapeError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
        params = init_head(cfg)
    rep = clip_representation(clip, params)
    write_tensor(args.out, rep)
    dt = time.perf_counter() - t0
    print(f"variant={cfg.variant} dim={rep.shape[1]} seed={cfg.seed} wall={dt:.3f}s")
    return 0


# ---------------------------------------------------------------------------
# equivalence


def _cmd_equivalence(args) -> int:
    dtype = np.float64 if args.dtype == "double" else np.float32
    report = checks.equivalence_scan(
        frames=_int_list(args.frames),
        positions=_int_list(args.positions),
        dims=_int_list(args.dims),
        kappas=_int_list(args.kappas),
        trials=args.trials,
        seed=args.seed,
        dtype=dtype,
        tolerance=args.tolerance,
        fault=args.inject_fault,
    )
    print(f"runs={report.runs} dtype={args.dtype} seed={args.seed} "
          f"tolerance={report.tolerance:g}")
    if report.runs == 0:
        print("no trials requested; nothing to compare")
        return 0
    l, n, d, kappa, trial = report.worst_config
    print(f"max relative discrepancy {report.worst:.3e} at "
          f"frames={l} positions={n} width={d} kernel={kappa} trial={trial}")
    if not report.passed:
        print("FAIL: routes disagree beyond tolerance", file=sys.stderr)
        return 1
    print("PASS")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def _cmd_gradcheck(args) -> int:
    rows = checks.gradcheck_scope(args.scope, seed=args.seed)
    width = max(len(r.name) for r in rows)
    failed = 0
    print(f"scope={args.scope} seed={args.seed}")
    for r in rows:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  err={r.error:.3e}  tol={r.tolerance:g}  {status}")
        failed += 0 if r.passed else 1
    print(f"{len(rows) - failed}/{len(rows)} checks passed")
    return 0 if failed == 0 else 1


# ---------------------------------------------------------------------------
# sqrt-bench

_RESIDUAL_JITTER = 1e-13  # allowance for roundoff at the convergence floor


def _cmd_sqrt_bench(args) -> int:
    ks = _int_list(args.K)
    if not ks or min(ks) < 1:
        raise UsageError("--K needs positive iteration counts")
    rows = checks.sqrt_scan(args.d, ks, cond=args.cond, seed=args.seed)
    print(f"d={args.d} cond={args.cond:g} seed={args.seed}")
    print(f"{'K':>4}  {'residual':>12}  {'vs oracle':>12}")
    for k, res, err in rows:
        print(f"{k:>4}  {res:>12.3e}  {err:>12.3e}")
    ok = True
    for (_, r1, _), (_, r2, _) in zip(rows, rows[1:]):
        if r2 > r1 + _RESIDUAL_JITTER:
            ok = False
            print("FAIL: residual increased with more iterations", file=sys.stderr)
            break
    if max(ks) >= 20 and rows[-1][1] > 1e-6:
        ok = False
        print("FAIL: residual above 1e-6 at the largest K", file=sys.stderr)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# train

_TRAIN_KEYS = {
    "task", "num_samples", "noise_sigma",
    "epochs", "batch_size", "val_fraction", "log_every",
    "learning_rate", "momentum", "weight_decay", "decay_factor", "decay_every",
}
_HEAD_KEYS = {
    "variant", "channels", "proj_dim", "frames", "positions", "kernel_size",
    "sqrt_iterations", "num_classes", "use_attention", "centered",
    "dropout_rate", "seed",
}


def _cmd_train(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        mapping = parse_config_text(fh.read())
    unknown = set(mapping) - _TRAIN_KEYS - _HEAD_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        head_map = {k: v for k, v in mapping.items() if k in _HEAD_KEYS}
        # Synthetic tasks are binary, so that is the natural default here.
        head_map.setdefault("num_classes", "2")
        cfg = head_config_from_mapping(head_map)
        spec = SyntheticSpec(
            task=mapping.get("task", "order_pair"),
            num_samples=int(mapping.get("num_samples", "512")),
            frames=cfg.frames,
            positions=cfg.positions,
            channels=cfg.channels,
            num_classes=cfg.num_classes,
            noise_sigma=float(mapping.get("noise_sigma", "0")),
            seed=cfg.seed,
        )
        opt = OptimState(
            learning_rate=float(mapping.get("learning_rate", "0.01")),
            momentum=float(mapping.get("momentum", "0.9")),
            weight_decay=float(mapping.get("weight_decay", "1e-4")),
            decay_factor=float(mapping.get("decay_factor", "0.1")),
            decay_every=int(mapping.get("decay_every", "120")),
        )
        epochs = int(mapping.get("epochs", "200"))
        batch_size = int(mapping.get("batch_size", "32"))
        val_fraction = float(mapping.get("val_fraction", "0.25"))
        log_every = int(mapping.get("log_every", "1"))
    except (ShapeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc
    stream = None if args.quiet else sys.stdout
    result = train_loop(cfg, spec, opt, epochs=epochs, batch_size=batch_size,
                        val_fraction=val_fraction, stream=stream, log_every=log_every)
    print(f"stopped={result.stopped} epochs={len(result.history)} "
          f"final_val_accuracy={result.final_val_accuracy:.4f} seed={cfg.seed}")
    if args.out:
        save_checkpoint(args.out, result.params)
        print(f"checkpoint written to {args.out}")
    return 1 if result.stopped == "diverged" else 0


# ---------------------------------------------------------------------------
# info


def _cmd_info(args) -> int:
    if args.params:
        params = load_checkpoint(args.params)
        cfg = params.config
    else:
        try:
            cfg = HeadConfig(
                variant=args.variant, channels=args.channels, proj_dim=args.d,
                frames=args.frames, positions=args.positions,
                kernel_size=args.kappa, sqrt_iterations=args.K,
                num_classes=args.classes, seed=args.seed,
            )
        except (ShapeError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
        params = init_head(cfg)
    print(f"variant={cfg.variant} channels={cfg.channels} width={cfg.proj_dim} "
          f"frames={cfg.frames} positions={cfg.positions} "
          f"kernel={cfg.resolved_kernel_size} sqrt_iterations={cfg.sqrt_iterations} "
          f"classes={cfg.num_classes} seed={cfg.seed}")
    print("parameters:")
    for name, count in param_breakdown(params).items():
        print(f"  {name:<20}{count:>12,}")
    print("floating-point ops per clip (eval):")
    for name, count in flop_breakdown(cfg).items():
        print(f"  {name:<20}{count:>16,}")
    print(f"totals: params={count_params(params):,} flops={count_flops(cfg):,}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tcpool",
                     description="Temporal covariance pooling over feature clips")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pool", help="pool one clip file into a representation file")
    p.add_argument("--input", required=True, help="clip file to read")
    p.add_argument("--variant", choices=["gap", "gcp", "tcp"], default="tcp")
    p.add_argument("--d", type=int, default=128, help="projected channel width")
    p.add_argument("--kappa", type=int, default=None, help="temporal kernel size (odd)")
    p.add_argument("--K", type=int, default=3, help="square-root iterations")
    p.add_argument("--centered", action="store_true", help="center frames before covariance")
    p.add_argument("--params", default=None, help="checkpoint to pool with")
    p.add_argument("--seed", type=int, default=0, help="initialization seed")
    p.add_argument("--out", required=True, help="output tensor file")
    p.set_defaults(func=_cmd_pool)

    p = sub.add_parser("equivalence",
                       help="compare the efficient and expanded pooling routes")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=["single", "double"], default="double")
    p.add_argument("--frames", default="1,2,4,8")
    p.add_argument("--positions", default="1,4,16")
    p.add_argument("--dims", default="2,8,16")
    p.add_argument("--kappas", default="1,3,5")
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--inject-fault", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=_cmd_equivalence)

    p = sub.add_parser("gradcheck", help="finite-difference gradient sweeps")
    p.add_argument("--scope", choices=list(checks.GRADCHECK_SCOPES) + ["all"],
                   default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("sqrt-bench", help="square-root accuracy by iteration count")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--K", default="1,3,10,20", help="comma-separated iteration counts")
    p.add_argument("--cond", type=float, default=100.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_sqrt_bench)

    p = sub.add_parser("train", help="train a head on a synthetic task")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--out", default=None, help="checkpoint output path")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch metrics")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("info", help="parameter and floating-point cost ledgers")
    p.add_argument("--params", default=None, help="checkpoint to describe")
    p.add_argument("--variant", choices=["gap", "gcp", "tcp"], default="tcp")
    p.add_argument("--channels", type=int, default=2048)
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--kappa", type=int, default=None)
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--classes", type=int, default=400)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--positions", type=int, default=196)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_info)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 3
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
