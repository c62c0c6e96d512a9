"""Command-line entry points: prepare, train, eval, predict, verify-counts,
bench.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error,
3 verification mismatch. Heavy imports happen inside the command handlers so
``--threads`` can pin BLAS pools before numpy loads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_MISMATCH = 3


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_manifest(out_dir: Path, payload: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _apply_precision(precision: str | None) -> None:
    if precision:
        import numpy as np

        from . import autodiff as ad
        ad.set_default_dtype(np.float32 if precision == "f32" else np.float64)


def cmd_prepare(args) -> int:
    from .dataset import prepare_dataset, read_xyz_path, save_cache
    from .ingest import XyzParseError, load_atomref

    try:
        molecules = read_xyz_path(args.input)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except XyzParseError as e:
        print(f"error: {args.input}: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    refs = None if args.no_atomref else load_atomref(args.atomref)
    exclude = None
    if args.exclude:
        exclude = set(Path(args.exclude).read_text().split())
    try:
        cache = prepare_dataset(molecules, cutoff=args.cutoff, k_rbf=args.k_rbf,
                                refs=refs, exclude_ids=exclude)
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    save_cache(cache, args.out)

    n_pairs = sum(g.n_pairs for g in cache.graphs)
    n_e11 = sum(g.e11_src.size for g in cache.graphs)
    n_e12 = sum(g.e12_atom.size for g in cache.graphs)
    n_e22 = sum(g.e22_src.size for g in cache.graphs)
    v1, v2 = cache.vocab.sizes
    print(f"prepared {cache.n_molecules} molecules -> {args.out}")
    print(f"  atoms {sum(g.n_atoms for g in cache.graphs)}, 2-bodies {n_pairs}")
    print(f"  edges: 1-1 {n_e11}, 1-2 {n_e12}, 2-2 {n_e22} (directed/incidence)")
    print(f"  composition vocabulary: {v1} order-1, {v2} order-2")
    return EXIT_OK


def _load_train_config(args):
    from .ingest import PROPERTY_NAMES
    from .train import TrainConfig

    raw = {}
    if args.config:
        with open(args.config) as f:
            raw = json.load(f)
        if not isinstance(raw, dict):
            raise ValueError("config file must hold a flat JSON object")
    config = TrainConfig.from_dict(raw)
    if args.seed is not None:
        from dataclasses import replace
        config = replace(config, seed=args.seed)
    if args.precision:
        from dataclasses import replace
        config = replace(config, precision=args.precision)
    if config.target not in PROPERTY_NAMES:
        raise ValueError(
            f"invalid target {config.target!r}; valid targets: "
            f"{', '.join(PROPERTY_NAMES)}"
        )
    return config


def cmd_train(args) -> int:
    try:
        config = _load_train_config(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    from .dataset import load_cache
    from .train import train_loop

    if not Path(args.cache).exists():
        print(f"error: dataset cache not found: {args.cache}", file=sys.stderr)
        return EXIT_USAGE
    cache = load_cache(args.cache)
    out_dir = Path(args.out)
    started = _now()
    result = train_loop(cache, config, out_dir, resume_from=args.resume)
    _write_manifest(out_dir, {
        "command": "train",
        "config": config.to_dict(),
        "cache": {"path": str(args.cache), "sha256": _sha256(args.cache)},
        "seed": config.seed,
        "artifacts": {
            "checkpoint_best": str(result.checkpoint_best),
            "checkpoint_last": str(result.checkpoint_last),
            "metrics": str(result.metrics_path),
        },
        "result": {
            "best_step": result.best_step,
            "best_val_mae": result.best_val_mae,
            "steps_run": result.steps_run,
            "stopped_early": result.stopped_early,
        },
        "started": started, "finished": _now(),
    })
    print(f"trained {result.steps_run} steps; best val MAE "
          f"{result.best_val_mae:.6g} at step {result.best_step}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataset import load_cache
    from .train import evaluate, load_checkpoint, resolve_splits

    params, _, mconfig, tconfig, _, _, counters = load_checkpoint(args.checkpoint)
    cache = load_cache(args.cache)
    splits = dict(zip(("train", "val", "test"), resolve_splits(cache, tconfig)))
    indices = splits[args.split]
    report = evaluate(params, mconfig, cache, indices, tconfig.target,
                      split=args.split, step=int(counters["step"]))
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    from .dataset import read_xyz_path
    from .featurize import FeatureBanks, featurize_hmg
    from .graph import build_hmg, build_molecular_graph
    from .ingest import XyzParseError
    from .model import predict
    from .train import load_checkpoint

    params, _, mconfig, _, vocab, banks_meta, _ = load_checkpoint(args.checkpoint)
    banks = FeatureBanks.from_meta(banks_meta)
    try:
        molecules = read_xyz_path(args.input)
    except (FileNotFoundError, XyzParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    orders = ("1", "2") if mconfig.use_order_2 else ("1",)
    header = ["id", "y_fused"] + [f"y_{p}" for p in orders] \
        + [f"alpha_{p}" for p in orders]
    lines = ["\t".join(header)]
    for mol in molecules:
        try:
            hmg = build_hmg(build_molecular_graph(mol, banks.cutoff), mol, vocab)
        except KeyError as e:
            print(f"error: molecule {mol.id}: composition unseen in training: "
                  f"{e.args[0]}", file=sys.stderr)
            return EXIT_RUNTIME
        feats = featurize_hmg(hmg, banks)
        fused, per_order, alpha = predict(params, mconfig, hmg, feats)
        row = [mol.id, repr(float(fused[0]))]
        row += [repr(float(v)) for v in per_order[0]]
        row += [repr(float(v)) for v in alpha[0]]
        lines.append("\t".join(row))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_verify_counts(args) -> int:
    from .graph import count_message_edges, count_message_edges_brute_force

    if args.n_max > 10:
        print("error: --n-max is capped at 10", file=sys.stderr)
        return EXIT_USAGE
    order = args.order
    ok = True
    print(f"{'N':>3} {'formula':>12} {'brute force':>12} match")
    for n in range(max(2, order), args.n_max + 1):
        formula = count_message_edges(n, order)
        brute = count_message_edges_brute_force(n, order)
        match = formula == brute
        ok = ok and match
        print(f"{n:>3} {formula:>12} {brute:>12} {'yes' if match else 'NO'}")
    return EXIT_OK if ok else EXIT_MISMATCH


def cmd_bench(args) -> int:
    import numpy as np

    from .dataset import load_cache
    from .featurize import featurize_hmg
    from .model import forward
    from .train import load_checkpoint

    n = args.n
    if n == 0:
        print("bench: nothing to do (n=0)")
        return EXIT_OK
    cache = load_cache(args.cache)
    if cache.n_molecules < n:
        print(f"error: cache has {cache.n_molecules} molecules, need {n}",
              file=sys.stderr)
        return EXIT_RUNTIME
    params, _, mconfig, _, _, _, _ = load_checkpoint(args.checkpoint)

    t0 = time.perf_counter()
    for i in range(n):
        featurize_hmg(cache.graphs[i], cache.banks)
    t_feat = time.perf_counter() - t0

    indices = np.arange(n)
    t0 = time.perf_counter()
    for lo in range(0, n, args.batch_size):
        hmg, feats, _ = cache.make_batch(indices[lo : lo + args.batch_size])
        forward(params, mconfig, hmg, feats, training=False)
    t_infer = time.perf_counter() - t0

    report = {
        "n_molecules": n,
        "threads": args.threads or 0,
        "featurization_per_s": n / t_feat,
        "inference_per_s": n / t_infer,
        "featurization_s": t_feat,
        "inference_s": t_infer,
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        _write_manifest(Path(args.out), {"command": "bench", **report,
                                         "finished": _now()})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hmgnet",
        description="Heterogeneous molecular graph networks: dataset "
                    "preparation, training, evaluation, and prediction.",
    )
    parser.add_argument("--config", help="flat JSON config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--threads", type=int,
                        help="pin BLAS/OpenMP thread count")
    parser.add_argument("--precision", choices=("f32", "f64"),
                        help="floating point width (default f64)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse XYZ input into a dataset cache")
    p.add_argument("input", help="XYZ file (.xyz/.xyz.gz) or directory")
    p.add_argument("--cutoff", type=float, default=5.0)
    p.add_argument("--k-rbf", type=int, default=64)
    p.add_argument("--out", required=True, help="cache output path")
    p.add_argument("--atomref", help="reference table path (default packaged)")
    p.add_argument("--no-atomref", action="store_true",
                   help="skip reference subtraction")
    p.add_argument("--exclude", help="file of record ids to drop")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model from a dataset cache")
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("checkpoint")
    p.add_argument("--cache", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict properties for XYZ input")
    p.add_argument("checkpoint")
    p.add_argument("input", help="XYZ file or directory")
    p.add_argument("--out", help="output TSV path (default stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("verify-counts",
                       help="check the complete-graph message-count formula")
    p.add_argument("--n-max", type=int, default=8)
    p.add_argument("--order", type=int, default=2)
    p.set_defaults(func=cmd_verify_counts)

    p = sub.add_parser("bench", help="measure featurization/inference throughput")
    p.add_argument("checkpoint")
    p.add_argument("--cache", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", help="directory for the bench manifest")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    _apply_precision(args.precision)
    try:
        return args.func(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
