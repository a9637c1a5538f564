"""Timing harness for the encrypted LoRA call: batch-size sweep and rank sweep.

Each measurement is one token batch pushed through the full client pipeline
(pack, encrypt, request, server evaluation, response, decrypt, demodulate).
`session_mode` decides how much session setup is inside the timed region:

* "fresh": a new client with newly generated keys per batch (key upload included)
* "upload": a new session per batch reusing the client's keys, always uploading them
* "cached": a new session per batch whose keys the server already holds
* "persistent": one session for the whole run, only the LoRA call is timed
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import time
import uuid
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .client import PrivLoraClient
from .pll import PllConfig, pll_init
from .reference import RANK_GRID, TOKEN_GRID
from .server import PrivLoraServer, ServerAdapter
from .toymodel import TOY_M_PRIME, SplitPoint

SESSION_MODES = ("fresh", "upload", "cached", "persistent")
CSV_FIELDS = ("run_id", "tokens", "rank", "trial", "wall_ms", "per_token_ms", "parallel_mode")


class BenchError(RuntimeError):
    pass


@dataclass
class BenchRow:
    run_id: str
    tokens: int
    rank: int
    trial: int
    wall_ms: float
    per_token_ms: float
    parallel_mode: bool


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r2: float


@dataclass
class BenchReport:
    kind: str                              # "tokens" or "rank"
    config: dict = field(default_factory=dict)
    rows: list[BenchRow] = field(default_factory=list)

    def best(self, key: str) -> dict[int, float]:
        """Fastest per-token time (ms) for each token count or rank.

        The raw samples stay in `rows`; the minimum over trials is the
        summary because timing noise only ever adds time.
        """
        out: dict[int, float] = {}
        for row in self.rows:
            k = getattr(row, key)
            out[k] = min(out.get(k, math.inf), row.per_token_ms)
        return dict(sorted(out.items()))

    def seconds_per_token(self) -> dict[int, float]:
        return {k: v / 1000 for k, v in self.best("tokens" if self.kind == "tokens" else "rank").items()}

    def amortization_ratio(self) -> float:
        curve = self.best("tokens")
        if len(curve) < 2:
            return float("nan")
        values = list(curve.values())
        return values[0] / values[-1]

    def strictly_decreasing(self) -> bool:
        values = list(self.best("tokens").values())
        return len(values) >= 2 and all(b < a for a, b in zip(values, values[1:]))

    def monotone_in_rank(self) -> bool:
        values = list(self.best("rank").values())
        return len(values) >= 2 and all(b > a for a, b in zip(values, values[1:]))

    def linear_fit(self) -> LinearFit:
        curve = self.best("rank")
        if len(curve) < 3:
            raise BenchError("a linear fit needs at least three ranks")
        res = stats.linregress(list(curve), list(curve.values()))
        return LinearFit(float(res.slope), float(res.intercept), float(res.rvalue ** 2))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            d = asdict(row)
            d["parallel_mode"] = int(row.parallel_mode)
            writer.writerow(d)
        return buf.getvalue()

    @staticmethod
    def rows_from_csv(text: str) -> list[BenchRow]:
        reader = csv.DictReader(io.StringIO(text))
        missing = set(CSV_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise BenchError(f"CSV is missing columns {sorted(missing)}")
        rows = []
        for line, rec in enumerate(reader, start=2):
            try:
                rows.append(BenchRow(rec["run_id"], int(rec["tokens"]), int(rec["rank"]), int(rec["trial"]),
                                     float(rec["wall_ms"]), float(rec["per_token_ms"]),
                                     rec["parallel_mode"].strip().lower() in ("1", "true")))
            except (TypeError, ValueError) as exc:
                raise BenchError(f"bad CSV row on line {line}: {exc}") from None
        return rows


# ---------------------------------------------------------------- synthetic adapters

def bench_adapters(ranks, m: int = 64, n: int = 64, seed: int = 0, m_prime: int = TOY_M_PRIME) -> list[ServerAdapter]:
    """One PLL-wrapped LoRA adapter per rank, with q sized for unit-variance inputs."""
    rng = np.random.default_rng(seed)
    out = []
    for i, r in enumerate(ranks):
        a1 = rng.normal(0.0, 1.0 / math.sqrt(m), (m, r))
        a2 = rng.normal(0.0, 1.0 / math.sqrt(r), (r, n))
        q = 8.0 * float(np.std(rng.standard_normal((256, m)) @ a1 @ a2))
        cfg = PllConfig(m, n, m_prime=m_prime, q=q, lora_rank=r, lora_alpha=float(r))
        w = dataclasses.replace(pll_init(cfg, rng), a1=a1, a2=a2)
        out.append(ServerAdapter(SplitPoint(i, "q"), cfg.scaling * a1, a2, w))
    return out


def bench_server(ranks=RANK_GRID, seed: int = 0, workers: int = 1, **kw) -> PrivLoraServer:
    return PrivLoraServer(adapters=bench_adapters(ranks, seed=seed), seed=seed, workers=workers, **kw)


# ---------------------------------------------------------------- runners

class _Runner:
    def __init__(self, address, session_mode: str, seed: int, ring_degree: int):
        if session_mode not in SESSION_MODES:
            raise BenchError(f"unknown session mode {session_mode!r}, expected one of {SESSION_MODES}")
        self.address = tuple(address)
        self.mode = session_mode
        self.ring_degree = ring_degree
        self.rng = np.random.default_rng(seed)
        self.client: PrivLoraClient | None = None
        self.keys = None

    def _connect(self, keys=None, use_cache=True) -> PrivLoraClient:
        try:
            return PrivLoraClient(self.address, keys=keys, ring_degree=self.ring_degree,
                                  seed=self.rng.integers(2 ** 63), use_key_cache=use_cache)
        except OSError as exc:
            raise BenchError(f"cannot reach server at {self.address[0]}:{self.address[1]}: {exc}") from None

    def __enter__(self):
        # the warm-up session generates the keys reused by the non-fresh modes
        # and brings the server's operand caches and compiled kernels up
        self.client = self._connect()
        self.keys = self.client.keys
        return self

    def __exit__(self, *exc):
        if self.client is not None:
            self.client.close()

    def adapter_for(self, rank: int) -> int:
        for i, a in enumerate(self.client.adapters):
            if a.rank == rank:
                return i
        raise BenchError(f"server has no adapter of rank {rank}")

    def warm(self, adapter_id: int, m: int) -> None:
        self.client.lora_call(adapter_id, self.rng.standard_normal((1, m)))

    def measure(self, adapter_id: int, x: np.ndarray) -> float:
        """Wall-clock milliseconds for one batch under the configured session mode."""
        t0 = time.perf_counter()
        if self.mode == "persistent":
            self.client.lora_call(adapter_id, x)
        else:
            keys = None if self.mode == "fresh" else self.keys
            client = self._connect(keys, use_cache=self.mode == "cached")
            try:
                client.lora_call(adapter_id, x)
            finally:
                client.close()
        return (time.perf_counter() - t0) * 1000


def run_token_bench(address, token_counts=TOKEN_GRID, rank: int = 8, trials: int = 3, seed: int = 0,
                    session_mode: str = "fresh", parallel_mode: bool = False, ring_degree: int = 0) -> BenchReport:
    token_counts = [int(t) for t in token_counts]
    config = dict(token_counts=token_counts, rank=rank, trials=trials, seed=seed, session_mode=session_mode,
                  parallel_mode=parallel_mode)
    report = BenchReport("tokens", config)
    if trials <= 0 or not token_counts:
        return report
    if min(token_counts) < 1:
        raise BenchError("token counts must be positive")
    run_id = uuid.uuid4().hex[:12]
    with _Runner(address, session_mode, seed, ring_degree) as runner:
        aid = runner.adapter_for(rank)
        m = runner.client.adapters[aid].m
        runner.warm(aid, m)
        for trial in range(trials):
            for tokens in token_counts:
                x = runner.rng.standard_normal((tokens, m))
                wall = runner.measure(aid, x)
                report.rows.append(BenchRow(run_id, tokens, rank, trial, wall, wall / tokens, parallel_mode))
    return report


def run_rank_bench(address, ranks=RANK_GRID, token_count: int = 500, trials: int = 3, seed: int = 0,
                   session_mode: str = "fresh", parallel_mode: bool = False, ring_degree: int = 0) -> BenchReport:
    ranks = [int(r) for r in ranks]
    config = dict(ranks=ranks, token_count=token_count, trials=trials, seed=seed, session_mode=session_mode,
                  parallel_mode=parallel_mode)
    report = BenchReport("rank", config)
    if trials <= 0 or not ranks:
        return report
    if token_count < 1:
        raise BenchError("token count must be positive")
    run_id = uuid.uuid4().hex[:12]
    with _Runner(address, session_mode, seed, ring_degree) as runner:
        ids = {r: runner.adapter_for(r) for r in ranks}
        for r, aid in ids.items():
            runner.warm(aid, runner.client.adapters[aid].m)
        for trial in range(trials):
            for r, aid in ids.items():
                x = runner.rng.standard_normal((token_count, runner.client.adapters[aid].m))
                wall = runner.measure(aid, x)
                report.rows.append(BenchRow(run_id, token_count, r, trial, wall, wall / token_count, parallel_mode))
    return report
