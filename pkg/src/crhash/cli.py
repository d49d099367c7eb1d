"""Command-line front door.

Every command resolves its flags, runs deterministically under its seed,
writes output files atomically (temp + rename), and emits a manifest next
to its primary output recording the resolved configuration plus sha256
digests of all inputs and outputs.

Exit codes: 0 success, 2 usage/domain error, 3 file-format error,
4 numeric error, 5 verification failure.
"""

import argparse
import hashlib
import os
import sys
import time


def _apply_thread_cap() -> None:
    cap = os.environ.get("CRH_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


_apply_thread_cap()

from .errors import DegenerateInputError, FormatError, NoExemplarsError  # noqa: E402


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _atomic(path: str, write_fn) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _atomic_text(path: str, text: str) -> None:
    def write(tmp):
        with open(tmp, "w") as fh:
            fh.write(text)

    _atomic(path, write)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _render_report(pairs) -> str:
    return "".join(f"{k}\t{_fmt(v)}\n" for k, v in pairs)


def _write_manifest(command, flags, inputs, outputs, t0, manifest_path) -> None:
    lines = [f"command\t{command}"]
    for key in sorted(flags):
        lines.append(f"flag.{key}\t{_fmt(flags[key])}")
    for path in inputs:
        lines.append(f"input.{path}\t{_sha256(path)}")
    for path in outputs:
        lines.append(f"output.{path}\t{_sha256(path)}")
    lines.append(f"wall_time_s\t{time.time() - t0:.3f}")
    _atomic_text(manifest_path, "\n".join(lines) + "\n")


def _cmd_gen_data(args) -> int:
    from . import synthdata

    t0 = time.time()
    spec = synthdata.SynthSpec(
        n_coarse=args.n_coarse,
        fines_per_coarse=args.fines_per_coarse,
        samples_per_fine=args.samples_per_fine,
        channels=args.channels,
        positions=args.positions,
        coarse_spread=args.coarse_spread,
        fine_spread=args.fine_spread,
        noise_sigma=args.noise_sigma,
        rare_patch_strength=args.rare_strength,
        seed=args.seed,
    )
    ds = synthdata.generate(spec)
    _atomic(args.out, lambda tmp: synthdata.write_dataset(ds, tmp))
    flags = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
    flags["n"] = spec.n
    _write_manifest("gen-data", flags, [], [args.out], t0,
                    args.manifest or args.out + ".manifest")
    return 0


def _train_flags(cfg) -> dict:
    flags = {
        k: getattr(cfg, k)
        for k in cfg.__dataclass_fields__
        if k != "ap"
    }
    flags["ap.damping"] = cfg.ap.damping
    flags["ap.max_iter"] = cfg.ap.max_iter
    flags["ap.convergence_window"] = cfg.ap.convergence_window
    flags["ap.preference"] = cfg.ap.preference
    return flags


def _cmd_train(args) -> int:
    from . import synthdata, training
    from .codes import write_code_set

    t0 = time.time()
    ds = synthdata.read_dataset(args.data)
    loss_mode = {"l2": "l2_baseline"}.get(args.loss_mode, args.loss_mode)
    cfg = training.TrainConfig(
        bits=args.bits,
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        s=args.s,
        s1=args.s1,
        lambda_pseudo=args.lambda_pseudo,
        lambda_att=args.lambda_att,
        lambda_nhd=args.lambda_nhd,
        lambda_code=args.lambda_code,
        pseudo_refresh_epochs=args.pseudo_refresh,
        seed=args.seed,
        loss_mode=loss_mode,
        variant=args.variant,
        use_csa=not args.no_csa,
        anchor_noise=args.anchor_noise,
    )
    state, history = training.train(ds, cfg)
    codes = training.encode(ds, state)

    _atomic(args.out_model, lambda tmp: training.write_model(state, tmp))
    _atomic(args.out_codes, lambda tmp: write_code_set(codes, tmp))
    metrics_path = args.out_metrics or args.out_model + ".metrics.csv"
    rows = ["epoch,loss,mean_norm_v,p_collision,map"]
    for m in history:
        rows.append(
            f"{m.epoch},{m.mean_loss!r},{m.mean_norm_v!r},{m.p_collision!r},{m.mean_ap!r}"
        )
    _atomic_text(metrics_path, "\n".join(rows) + "\n")

    _write_manifest(
        "train", _train_flags(cfg), [args.data],
        [args.out_model, args.out_codes, metrics_path], t0,
        args.manifest or args.out_model + ".manifest",
    )
    return 0


def _cmd_eval(args) -> int:
    from . import synthdata
    from .codes import read_code_set
    from .retrieval import self_retrieval_map

    t0 = time.time()
    codes = read_code_set(args.codes)
    ds = synthdata.read_dataset(args.data)
    if codes.n != ds.n:
        raise ValueError(f"{codes.n} codes but {ds.n} samples")
    labels = ds.fine_labels if args.label == "fine" else ds.coarse_labels
    value = self_retrieval_map(codes, labels, top_k=args.top_k)
    report = _render_report(
        [
            ("n", codes.n),
            ("bits", codes.length),
            ("label", args.label),
            ("top_k", args.top_k if args.top_k is not None else "full"),
            ("map", value),
        ]
    )
    return _finish_report(args, "eval", report, [args.codes, args.data], t0)


def _cmd_collision(args) -> int:
    from .codes import read_code_set
    from .retrieval import collision_report

    t0 = time.time()
    codes = read_code_set(args.codes)
    rep = collision_report(codes)
    report = _render_report(
        [
            ("n", codes.n),
            ("bits", codes.length),
            ("p_collision", rep["p_collision"]),
            ("n_groups", rep["n_groups"]),
            ("largest_group", rep["largest_group"]),
            ("ideal", rep["ideal"]),
        ]
    )
    return _finish_report(args, "collision", report, [args.codes], t0)


def _cmd_rand_stats(args) -> int:
    from .codes import random_code_stats

    t0 = time.time()
    stats = random_code_stats(args.bits, args.pairs, args.seed)
    report = _render_report(
        [
            ("bits", args.bits),
            ("pairs", args.pairs),
            ("seed", args.seed),
            ("mean_nhd", stats["mean_nhd"]),
            ("std_nhd", stats["std_nhd"]),
            ("collision_rate", stats["collision_rate"]),
            ("ideal_collision_rate", 2.0 ** (-args.bits)),
            ("ideal_std_nhd", args.bits ** -0.5),
        ]
    )
    return _finish_report(args, "rand-stats", report, [], t0)


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    t0 = time.time()
    results = run_all(seed=args.seed, n_instances=args.instances)
    pairs = []
    for r in results:
        pairs.append((r.name, f"{r.max_rel_err!r}\t{'PASS' if r.passed else 'FAIL'}"))
    worst = max(results, key=lambda r: r.max_rel_err / r.tolerance)
    pairs.append(("worst", f"{worst.name}\t{worst.max_rel_err!r}"))
    ok = all(r.passed for r in results)
    pairs.append(("status", "PASS" if ok else "FAIL"))
    report = "".join(f"{k}\t{v}\n" for k, v in pairs)
    code = _finish_report(args, "gradcheck", report, [], t0)
    if code != 0:
        return code
    return 0 if ok else 5


def _finish_report(args, command, report, inputs, t0) -> int:
    sys.stdout.write(report)
    flags = {
        k: v
        for k, v in vars(args).items()
        if k not in ("func", "out", "manifest") and v is not None
    }
    if args.out:
        _atomic_text(args.out, report)
        _write_manifest(command, flags, inputs, [args.out], t0,
                        args.manifest or args.out + ".manifest")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crhash",
        description="Collision-resistant hashing: data generation, training, "
        "retrieval evaluation, and verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic CRHF dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n-coarse", type=int, default=8)
    p.add_argument("--fines-per-coarse", type=int, default=4)
    p.add_argument("--samples-per-fine", type=int, default=32)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--positions", type=int, default=9)
    p.add_argument("--coarse-spread", type=float, default=10.0)
    p.add_argument("--fine-spread", type=float, default=2.0)
    p.add_argument("--noise-sigma", type=float, default=0.5)
    p.add_argument("--rare-strength", type=float, default=4.0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a CRHF dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-codes", required=True)
    p.add_argument("--out-metrics")
    p.add_argument("--manifest")
    p.add_argument("--bits", type=int, default=16)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=8e-3)
    p.add_argument("--s", type=float, default=8.0)
    p.add_argument("--s1", type=float, default=8.0)
    p.add_argument("--lambda-pseudo", type=float, default=1.0)
    p.add_argument("--lambda-att", type=float, default=1.0)
    p.add_argument("--lambda-nhd", type=float, default=1.0)
    p.add_argument("--lambda-code", type=float, default=1.0)
    p.add_argument("--pseudo-refresh", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--loss-mode", choices=["nhd_full", "nhd_only", "l2", "l2_baseline"],
        default="nhd_full",
    )
    p.add_argument("--variant", choices=["sign", "codebook"], default="sign")
    p.add_argument("--no-csa", action="store_true")
    p.add_argument("--anchor-noise", type=float, default=0.0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="self-retrieval mAP of a code set")
    p.add_argument("--codes", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--label", choices=["fine", "coarse"], default="fine")
    p.add_argument("--top-k", type=int)
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("collision", help="collision census of a code set")
    p.add_argument("--codes", required=True)
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.set_defaults(func=_cmd_collision)

    p = sub.add_parser("rand-stats", help="random-code NHD and collision stats")
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.set_defaults(func=_cmd_rand_stats)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.func(args)
    except (FormatError, OSError) as e:
        print(f"crhash: file error: {e}", file=sys.stderr)
        return 3
    except (DegenerateInputError, NoExemplarsError) as e:
        print(f"crhash: numeric error: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"crhash: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
