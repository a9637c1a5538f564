"""Command line front end: `privlora <subcommand> ...`.

Every failure exits nonzero with one diagnostic line on stderr; argument
errors print usage and exit 2.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import ckks
from .ckks import serialize as ser

KEY_FILES = {"params": "params.bin", "public": "public.key", "rotations": "rotation.keys", "secret": "secret.key"}


class CliError(Exception):
    pass


# ---------------------------------------------------------------- argument types

def positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be positive: {v}")
    return v


def nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must not be negative: {v}")
    return v


def power_of_two(text: str) -> int:
    v = positive_int(text)
    if v & (v - 1) or v < 4:
        raise argparse.ArgumentTypeError(f"must be a power of two >= 4: {v}")
    return v


def int_list(text: str) -> list[int]:
    try:
        values = [positive_int(t) for t in text.split(",") if t.strip()]
    except argparse.ArgumentTypeError as exc:
        raise argparse.ArgumentTypeError(f"bad list {text!r}: {exc}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit() or not 0 < int(port) < 65536:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


# ---------------------------------------------------------------- key directories

def save_keys(keys: ckks.KeyMaterial, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    pk, rot = ser.dump_public_set(keys.public_set)
    blobs = {"params": ser.dump_params(keys.params), "public": pk, "rotations": rot,
             "secret": ser.dump_secret_key(keys.secret)}
    paths = []
    for name, blob in blobs.items():
        path = out / KEY_FILES[name]
        path.write_bytes(blob)
        paths.append(path)
    os.chmod(out / KEY_FILES["secret"], 0o600)
    return paths


def load_keys(directory: Path) -> ckks.KeyMaterial:
    try:
        raw = {name: (directory / fname).read_bytes() for name, fname in KEY_FILES.items()}
    except OSError as exc:
        raise CliError(f"cannot read key directory {directory}: {exc.strerror}: {exc.filename}") from None
    params = ser.load_params(raw["params"])
    return ckks.KeyMaterial(ser.load_secret_key(raw["secret"], params), ser.load_public_key(raw["public"], params),
                            ser.load_rotation_keys(raw["rotations"], params))


def read_bytes(path: Path, what: str) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc.strerror}") from None


# ---------------------------------------------------------------- subcommands

def cmd_keygen(args) -> int:
    from .linalg import PackLayout, next_pow2

    params = ckks.CkksParams.generate(args.n)
    steps = set()
    for r in args.ranks:
        if next_pow2(args.m) * next_pow2(r) > params.slot_count:
            raise CliError(f"m={args.m}, rank={r} do not fit into {params.slot_count} slots")
        steps.update(PackLayout.for_dims(1, args.m, r, min(args.m, next_pow2(args.m)), params.slot_count)
                     .rotation_steps())
    keys = ckks.keygen(params, sorted(steps), args.seed)
    for path in save_keys(keys, Path(args.out)):
        print(f"wrote {path} ({path.stat().st_size} bytes)")
    print(f"fingerprint {keys.fingerprint.hex()}")
    return 0


def cmd_serve(args) -> int:
    from .bench import bench_adapters
    from .server import PrivLoraServer
    from .toymodel import load_model

    model = load_model(read_bytes(Path(args.weights), "weights")) if args.weights else None
    extra = bench_adapters(args.bench_ranks, seed=args.seed or 0) if args.bench_ranks else []
    if model is None and not extra:
        raise CliError("nothing to serve: give --weights and/or --bench-ranks")
    params = ser.load_params(read_bytes(Path(args.params), "parameters")) if args.params else None
    server = PrivLoraServer(model, host=args.host, port=args.port, seed=args.seed, workers=args.workers,
                            adapters=extra, params=params, ring_degree=args.n)
    host, port = server.address
    print(f"listening on {host}:{port} with {len(server.adapters)} adapters", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return 0


def cmd_infer(args) -> int:
    import torch

    from .client import EncryptedBypass, PrivLoraClient
    from .toymodel import LABEL_TOKENS, class_logits, encode_text

    prompts = [line.rstrip("\n") for line in read_bytes(Path(args.prompts), "prompt file").decode("utf-8").splitlines()]
    prompts = [p for p in prompts if p.strip()]
    if not prompts:
        raise CliError(f"no prompts in {args.prompts}")
    keys = load_keys(Path(args.keys)) if args.keys else None
    with PrivLoraClient(args.server, keys=keys, seed=args.seed) as client:
        if client.model is None:
            raise CliError("server did not ship a model")
        bypass = EncryptedBypass(client)
        labels = "".join(chr(t) for t in LABEL_TOKENS)
        for prompt in prompts:
            tokens = encode_text(prompt, client.model.cfg.max_len)
            with torch.no_grad():
                logits = class_logits(client.model(tokens, bypass))[0]
            pred = labels[int(logits.argmax())]
            print(f"{pred}\t{logits[0]:.4f}\t{logits[1]:.4f}\t{prompt}")
    return 0


def cmd_train_toy(args) -> int:
    from .toymodel import dump_model, toy_experiment

    model, result = toy_experiment(not args.plain, seed=args.seed, steps=args.steps)
    losses = result.losses
    head = float(np.mean(losses[:5])) if losses else float("nan")
    tail = float(np.mean(losses[-10:])) if losses else float("nan")
    kind = "plain LoRA" if args.plain else "private linear layer"
    print(f"{kind}: loss {head:.4f} -> {tail:.4f} over {len(losses)} steps, held-out accuracy {result.accuracy:.4f}")
    if args.out:
        Path(args.out).write_bytes(dump_model(model))
        print(f"wrote {args.out}")
    return 0


def _bench_target(args):
    """Either the given server address or a freshly started in-process bench server."""
    from .bench import bench_server
    from .reference import RANK_GRID

    if args.server:
        return args.server, None
    ranks = sorted(set(RANK_GRID) | set(getattr(args, "ranks", None) or []) | {getattr(args, "rank", 8)})
    server = bench_server(ranks, seed=args.seed, workers=args.parallel).start()
    return server.address, server


def _emit_report(report, args) -> None:
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(report.rows)} rows to {args.out}")
    else:
        sys.stdout.write(text)


def cmd_bench_tokens(args) -> int:
    from .bench import run_token_bench

    if args.trials == 0:
        from .bench import BenchReport

        _emit_report(BenchReport("tokens", dict(trials=0)), args)
        return 0
    addr, server = _bench_target(args)
    try:
        report = run_token_bench(addr, args.tokens, args.rank, args.trials, args.seed, args.session_mode,
                                 parallel_mode=args.parallel > 1)
    finally:
        if server is not None:
            server.close()
    _emit_report(report, args)
    best = report.best("tokens")
    print("per-token ms: " + ", ".join(f"{t}={v:.2f}" for t, v in best.items()), file=sys.stderr)
    print(f"amortization ratio {report.amortization_ratio():.3f}, strictly decreasing: "
          f"{report.strictly_decreasing()}", file=sys.stderr)
    return 0


def cmd_bench_rank(args) -> int:
    from .bench import BenchReport, run_rank_bench

    if args.trials == 0:
        _emit_report(BenchReport("rank", dict(trials=0)), args)
        return 0
    addr, server = _bench_target(args)
    try:
        report = run_rank_bench(addr, args.ranks, args.token_count, args.trials, args.seed, args.session_mode,
                                parallel_mode=args.parallel > 1)
    finally:
        if server is not None:
            server.close()
    _emit_report(report, args)
    best = report.best("rank")
    print("per-token ms: " + ", ".join(f"r={r}: {v:.2f}" for r, v in best.items()), file=sys.stderr)
    if len(best) >= 3:
        fit = report.linear_fit()
        print(f"linear fit slope {fit.slope:.4f} ms/rank, R^2 {fit.r2:.4f}, monotone: {report.monotone_in_rank()}",
              file=sys.stderr)
    return 0


def cmd_attack(args) -> int:
    import warnings

    from .attacks import CountingOracle, extract_plain_linear, extraction_residuals, make_pll_oracle
    from .pll import PllConfig, PllConfigWarning, pll_init

    rng = np.random.default_rng(args.seed)
    n = args.n
    if args.mode == "plain":
        a = rng.standard_normal((n, n))
        oracle = CountingOracle(lambda x: x @ a)
        est = extract_plain_linear(oracle, n)
        err = float(np.abs(est - a).max())
        print(f"plain linear layer {n}x{n}: {oracle.calls} queries, "
              f"max abs error {err:.3g}, exact recovery: {'yes' if err == 0 else 'no'}")
        return 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PllConfigWarning)
        w = pll_init(PllConfig(n, n, q=args.q), rng)
    stats = extraction_residuals(make_pll_oracle(w, rng), n, args.trials, truth=w.matrix)
    print(f"private linear layer {n}x{n}, q={args.q:g}: {stats.queries} queries over {stats.trials} trials, "
          f"repeat-query disagreement {stats.disagreement_rate:.4f}, residual variance {stats.residual_variance:.4g}, "
          f"max estimate error {stats.max_error:.4g}")
    return 0


def _table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def cmd_report(args) -> int:
    from .bench import BenchReport
    from .reference import PRIOR_WORK, RANK_CURVE, TOKEN_CURVE, amortization_ratio

    rows = BenchReport.rows_from_csv(read_bytes(Path(args.input), "bench CSV").decode("utf-8"))
    if not rows:
        raise CliError(f"{args.input} holds no measurements")
    with_ref = args.against != "none"
    out = []
    tokens = sorted({r.tokens for r in rows})
    ranks = sorted({r.rank for r in rows})
    if len(tokens) > 1:
        rep = BenchReport("tokens", rows=rows)
        ref = dict(TOKEN_CURVE)
        best = rep.best("tokens")
        table = [[t, f"{v:.3f}", f"{ref[t]:.4f}" if with_ref and t in ref else ""] for t, v in best.items()]
        out.append(_table(["tokens", "measured ms/token (best)", "reference s/token"], table))
        line = f"amortization ratio: measured {rep.amortization_ratio():.3f}"
        if with_ref:
            line += f", reference {amortization_ratio(TOKEN_CURVE):.3f}"
        out.append(line)
    if len(ranks) > 1:
        rep = BenchReport("rank", rows=rows)
        ref = dict(RANK_CURVE)
        best = rep.best("rank")
        table = [[r, f"{v:.3f}", f"{ref[r]:.4f}" if with_ref and r in ref else ""] for r, v in best.items()]
        out.append(_table(["rank", "measured ms/token (best)", "reference s/token"], table))
        if len(best) >= 3:
            line = f"linear fit R^2: measured {rep.linear_fit().r2:.4f}"
            if with_ref:
                ref_rep = BenchReport("rank", rows=[_ref_row(r, v) for r, v in RANK_CURVE])
                line += f", reference {ref_rep.linear_fit().r2:.4f}"
            out.append(line)
    if len(tokens) == 1 and len(ranks) == 1:
        rep = BenchReport("tokens", rows=rows)
        out.append(f"single configuration tokens={tokens[0]} rank={ranks[0]}: "
                   f"{rep.best('tokens')[tokens[0]]:.3f} ms/token (best of {len(rows)})")
    if with_ref:
        prior = [[p.year, p.scheme, p.model, p.parameters,
                  "-" if p.seconds_per_token is None else f"{p.seconds_per_token:g}s", p.group] for p in PRIOR_WORK]
        out.append("reference rows (published, not measured here):")
        out.append(_table(["year", "scheme", "model", "parameters", "time/token", "group"], prior))
    print("\n\n".join(out))
    return 0


def _ref_row(rank, seconds):
    from .bench import BenchRow

    return BenchRow("reference", 0, rank, 0, seconds * 1000, seconds * 1000, False)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    env_seed = os.environ.get("PRIVLORA_SEED")
    default_seed = int(env_seed) if env_seed and env_seed.lstrip("-").isdigit() else 0
    p = argparse.ArgumentParser(prog="privlora", description="Encrypted private-LoRA split inference toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log protocol events to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("keygen", help="generate CKKS keys for a client")
    s.add_argument("--n", type=power_of_two, default=8192, help="ring degree N")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--m", type=positive_int, default=64, help="adapter input width")
    s.add_argument("--ranks", type=int_list, default=[8], help="comma-separated adapter ranks to cover")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("serve", help="run the adapter server")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=nonneg_int, default=7070)
    s.add_argument("--weights", help="toy checkpoint with adapters")
    s.add_argument("--params", help="serialized CKKS parameters to offer")
    s.add_argument("--n", type=power_of_two, default=8192, help="default ring degree")
    s.add_argument("--bench-ranks", type=int_list, help="also serve synthetic adapters of these ranks")
    s.add_argument("--workers", type=positive_int, default=1, help="threads per request")
    s.add_argument("--seed", type=int, default=None, help="round randomness seed (default: PRIVLORA_SEED or random)")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("infer", help="classify prompts through the encrypted adapters")
    s.add_argument("--server", type=address, required=True, help="HOST:PORT")
    s.add_argument("--prompts", required=True, help="file with one prompt per line")
    s.add_argument("--keys", help="key directory from keygen (default: generate per session)")
    s.add_argument("--seed", type=int, default=default_seed)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("train-toy", help="train the toy model's adapters")
    s.add_argument("--steps", type=nonneg_int, default=300)
    s.add_argument("--seed", type=int, default=default_seed)
    s.add_argument("--plain", action="store_true", help="train plain LoRA instead of the private layer")
    s.add_argument("--out", help="write the trained checkpoint here")
    s.set_defaults(func=cmd_train_toy)

    for name, helptext in (("bench-tokens", "time per token against batch size"),
                           ("bench-rank", "time per token against adapter rank")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--server", type=address, help="HOST:PORT (default: start an in-process server)")
        s.add_argument("--trials", type=nonneg_int, default=3)
        s.add_argument("--seed", type=int, default=default_seed)
        s.add_argument("--session-mode", choices=("fresh", "upload", "cached", "persistent"), default="fresh")
        s.add_argument("--parallel", type=positive_int, default=1,
                       help="worker threads for the in-process server (parallel-chunk mode when > 1)")
        s.add_argument("--out", help="CSV output path (default: stdout)")
        if name == "bench-tokens":
            s.add_argument("--tokens", type=int_list, default=[50, 100, 200, 500, 700, 1000])
            s.add_argument("--rank", type=positive_int, default=8)
            s.set_defaults(func=cmd_bench_tokens)
        else:
            s.add_argument("--ranks", type=int_list, default=[8, 16, 24, 48])
            s.add_argument("--token-count", type=positive_int, default=500)
            s.set_defaults(func=cmd_bench_rank)

    s = sub.add_parser("attack", help="run the unit-vector extraction attack")
    s.add_argument("--mode", choices=("plain", "pll"), required=True)
    s.add_argument("--n", type=positive_int, default=16, help="layer width")
    s.add_argument("--trials", type=positive_int, default=100, help="attack repetitions (pll mode)")
    s.add_argument("--q", type=float, default=1.0, help="modulus of the private layer (pll mode)")
    s.add_argument("--seed", type=int, default=default_seed)
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("report", help="summarize a bench CSV next to the published reference data")
    s.add_argument("--in", dest="input", required=True, help="bench CSV")
    s.add_argument("--against", choices=("paper", "none"), default="paper",
                   help="include the published reference columns and rows")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "attack" and args.mode == "pll" and not (math.isfinite(args.q) and args.q > 0):
        parser.error("--q must be a positive finite number")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # one line, no traceback
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"privlora: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
