"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The numbered lines are printed with capture disabled so they show up in a
plain `pytest -v` run; the assertion then fails the test whenever the line
says FAIL.
"""

import math
import os
import threading
import time
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
import torch

from privlora import ckks
from privlora.attacks import (
    CountingOracle, alg1_convert, clwe_sample, extract_plain_linear, extraction_residuals, make_pll_oracle,
    solve_matrix_residual, uniform_range_test,
)
from privlora.bench import bench_adapters, run_rank_bench, run_token_bench
from privlora.client import EncryptedBypass, PrivLoraClient
from privlora.linalg import PackLayout, build_server_operands, extract_result, he_lora_apply, pack_input
from privlora.pll import PllConfig, demodulate, masked_noise, pll_forward_reference, pll_init, shift_term
from privlora.protocol import ErrorCode, Frame, LoraMsg, MsgType, parse_error, read_frame, write_frame
from privlora.reference import TOKEN_GRID
from privlora.server import PrivLoraServer
from privlora.toymodel import PlainBypass, encode_text, make_dataset, pinf1, pinf2, toy_experiment

from test_attacks import exact_clwe
from test_pll import centered_oracle, exact_round, exact_weights, frac
from test_protocol import expected, make_adapters, raw_session, request_frame, round_for, upload, M

def report(capsys, number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def rel_err(got, want):
    return float(np.abs(got - want).max() / max(np.abs(want).max(), 1e-12))


@pytest.fixture(scope="module")
def experiments():
    """toy_experiment results, computed on first use and shared by criteria 7 and 9."""
    cache = {}

    def get(use_pll, seed):
        if (use_pll, seed) not in cache:
            cache[use_pll, seed] = toy_experiment(use_pll, seed)
        return cache[use_pll, seed]

    return get


# ---------------------------------------------------------------- 1

def test_criterion_01_he_sweep(keys, capsys):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst, count = 0.0, 60
    for _ in range(count):
        d, m, r = (int(v) for v in rng.integers(1, [9, 65, 9]))
        n = int(rng.integers(1, min(64, 1 << (m - 1).bit_length()) + 1))
        x, a1, a2, qt = (rng.uniform(-1, 1, s) for s in ((d, m), (m, r), (r, n), (d, n)))
        layout = PackLayout.for_dims(d, m, r, n, keys.params.slot_count)
        ops = build_server_operands(a1, a2, qt, layout, keys.params)
        out = he_lora_apply(pack_input(x, layout, keys, rng), ops, keys)
        worst = max(worst, rel_err(extract_result(out, keys), x @ a1 @ a2 + qt))
    elapsed = time.perf_counter() - start
    report(capsys, 1, worst <= 1e-3 and elapsed <= 300,
           f"{count} instances, worst relative error {worst:.2e} (<= 1e-3), {elapsed:.1f} s (<= 300 s)")


# ---------------------------------------------------------------- 2

def test_criterion_02_depth_and_rotations(keys, capsys, monkeypatch):
    calls = Counter()
    for name in ("rotate", "rescale", "cmult_plain"):
        real = getattr(ckks, name)

        def counted(*a, _real=real, _name=name, **kw):
            calls[_name] += 1
            return _real(*a, **kw)

        monkeypatch.setattr(ckks, name, counted)
    rng = np.random.default_rng(202)
    params = keys.params
    bad = []
    cases = [(1, 1, 1, 1), (3, 5, 3, 4), (9, 64, 8, 64), (20, 64, 8, 64), (33, 17, 2, 30), (4, 2, 7, 2),
             (64, 32, 4, 16), (8, 64, 1, 1)]
    for d, m, r, n in cases:
        layout = PackLayout.for_dims(d, m, r, n, params.slot_count)
        x, a1, a2, qt = (rng.uniform(-1, 1, s) for s in ((d, m), (m, r), (r, n), (d, n)))
        ops = build_server_operands(a1, a2, qt, layout, params)
        packed = pack_input(x, layout, keys, rng)
        calls.clear()
        out = he_lora_apply(packed, ops, keys)
        cts = layout.ct_count
        want_rot = 2 * int(math.log2(layout.m_pad)) + int(math.log2(layout.r))
        levels = {ct.level for ct in out.ciphertexts}
        ok = (calls["rotate"] == cts * want_rot and calls["rescale"] == 3 * cts and calls["cmult_plain"] == 3 * cts
              and levels == {params.max_level - 3})
        if not ok:
            bad.append(((d, m, r, n), dict(calls), levels))
    report(capsys, 2, not bad,
           f"{len(cases)} layouts, rotations = 2*log2(m_pad)+log2(r) per ciphertext, 3 levels consumed"
           + (f"; mismatches {bad}" if bad else ""))


# ---------------------------------------------------------------- 3

def test_criterion_03_demodulation_exact(capsys):
    failures = 0
    for seed in range(100):
        rng = np.random.default_rng(3000 + seed)
        m, n, d = (int(v) for v in rng.integers(1, 9, 3))
        q = float(rng.uniform(0.25, 32))
        w = exact_weights(rng, m, n, int(rng.integers(1, 9)), q, rank=int(rng.integers(0, 4)))
        rnd = exact_round(w, d, rng)
        x = frac(rng.normal(0, 2, (d, m)))
        got = demodulate(pll_forward_reference(x, w, rnd), w.config.q)
        clean = x @ w.matrix + masked_noise(w, rnd.p)[None, :] + shift_term(w, d)
        failures += not np.all(got == centered_oracle(clean, w.config.q))
    report(capsys, 3, failures == 0, f"100 random configurations over exact rationals, {failures} mismatches")


# ---------------------------------------------------------------- 4

def test_criterion_04_solve_matrix_identity(capsys):
    failures = 0
    for seed in range(100):
        rng = np.random.default_rng(4000 + seed)
        m, n, d = (int(v) for v in rng.integers(1, 9, 3))
        w = exact_weights(rng, m, n, int(rng.integers(1, 9)), float(rng.uniform(0.5, 16)))
        rnd = exact_round(w, d, rng)
        x = frac(rng.normal(0, 1, (d, m)))
        b = demodulate(pll_forward_reference(x, w, rnd), w.config.q)
        e = masked_noise(w, rnd.p)
        resid = demodulate(b - ((x + w.s[None, :]) @ w.a + e[None, :]), w.config.q)
        failures += not all(v == 0 for v in resid.ravel())
    report(capsys, 4, failures == 0, f"b = (x+s)A + e mod q on 100 seeds, {failures} failures")


# ---------------------------------------------------------------- 5

def test_criterion_05_extraction(capsys):
    plain_ok = 0
    for seed in range(20):
        a = np.random.default_rng(5000 + seed).normal(size=(16, 16))
        oracle = CountingOracle(lambda x, a=a: x @ a)
        plain_ok += np.array_equal(extract_plain_linear(oracle, 16), a) and oracle.calls == 16
    rng = np.random.default_rng(5100)
    w = pll_init(PllConfig(16, 16), rng)
    stats = extraction_residuals(make_pll_oracle(w, rng), 16, 1000, truth=w.matrix)
    ok = plain_ok == 20 and stats.disagreement_rate > 0.99 and stats.residual_variance > 0
    report(capsys, 5, ok, f"plain: {plain_ok}/20 exact in 16 queries; PLL over 1000 trials: disagreement "
                          f"{stats.disagreement_rate:.4f} (> 0.99), residual variance {stats.residual_variance:.3g} (> 0)")


# ---------------------------------------------------------------- 6

def test_criterion_06_algorithm_one(capsys):
    failures = 0
    for seed in range(100):
        rng = np.random.default_rng(6000 + seed)
        m, n, t = int(rng.integers(2, 7)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        samples = exact_clwe(rng, m, n, 1, Fraction(int(rng.integers(2, 40)), int(rng.integers(1, 5))))
        samples.b = np.repeat(samples.b[None, :], t, axis=0)
        q = Fraction(int(rng.integers(1, 50)), int(rng.integers(1, 9)))
        conv = alg1_convert(samples, q, xs=frac(rng.standard_normal((t, m))))
        failures += not all(v == 0 for v in solve_matrix_residual(conv).ravel())
    rng = np.random.default_rng(6100)
    s = clwe_sample(16, 8, 1000, gamma=8.0, beta=0.0, tag="uniform", rng=rng)
    conv = alg1_convert(s, 3.0, rng)
    uniform_ok = uniform_range_test(np.array([smp.b for smp in conv.samples]), -1.5, 1.5)
    report(capsys, 6, failures == 0 and uniform_ok,
           f"beta=0 residual exactly zero on {100 - failures}/100 seeds; uniform input passes range/mean test: "
           f"{uniform_ok}")


# ---------------------------------------------------------------- 7

def test_criterion_07_split_equivalence(experiments, params, capsys):
    model, _ = experiments(True, 0)
    plain_model, _ = experiments(False, 0)
    texts, _ = make_dataset(50, seed=7)
    tokens = torch.stack([encode_text(t) for t in texts])

    split_exact = True
    for mdl in (plain_model, model):
        ref = PlainBypass(mdl, np.random.default_rng(1))
        mono = mdl(tokens, ref)
        for split in mdl.cfg.split_points():
            replay = PlainBypass(mdl, rounds=[r for _, r in ref.log])
            state = pinf1(mdl, tokens, split, replay)
            out = pinf2(state, replay(split, state.x_l), replay)
            split_exact &= torch.equal(out, mono)

    worst = 0.0
    with PrivLoraServer(model, seed=7, params=params, record_rounds=True) as srv:
        with PrivLoraClient(srv.address, seed=8) as client:
            for batch in range(0, 50, 10):
                first = len(srv.rounds)
                got = client.model(tokens[batch:batch + 10], EncryptedBypass(client))
                replay = PlainBypass(model, rounds=[r.round for r in srv.rounds[first:]])
                want = model(tokens[batch:batch + 10], replay)
                worst = max(worst, (got - want).abs().max().item())
    report(capsys, 7, split_exact and worst <= 1e-2,
           f"split path bit-identical at every split point: {split_exact}; encrypted path max |logit diff| "
           f"{worst:.2e} (<= 1e-2) on 50 prompts")


# ---------------------------------------------------------------- 8

def test_criterion_08_protocol(small_params, capsys):
    with PrivLoraServer(adapters=make_adapters(), seed=8, params=small_params, record_rounds=True) as srv:
        rng = np.random.default_rng(800)
        frames_ok = True
        with PrivLoraClient(srv.address, seed=1) as client:
            for d in (1, 16, 64, 200):
                sent, recv = client.frames_sent, client.frames_received
                client.lora_call(0, rng.uniform(-1, 1, (d, M)))
                frames_ok &= (client.frames_sent - sent, client.frames_received - recv) == (1, 1)
            keys = client.keys

        sock, _ = raw_session(srv)
        upload(sock, keys)
        msg = request_frame(keys, np.ones((1, M)))
        tampered = bytearray(msg.cts[0])
        tampered[-8:] = b"\xff" * 8
        write_frame(sock, Frame(MsgType.LORA_REQ, LoraMsg(1, 0, 0, 1, msg.layout, 0, (bytes(tampered),)).encode()))
        err = read_frame(sock)
        write_frame(sock, Frame(MsgType.LORA_REQ, request_frame(keys, np.ones((1, M)), t=2).encode()))
        after = read_frame(sock)
        sock.close()
        tamper_ok = (err.type == MsgType.ERROR and parse_error(err.payload).code == ErrorCode.MALFORMED
                     and after.type == MsgType.LORA_RESP)

        worst, errors = 0.0, []

        def worker(i):
            nonlocal worst
            try:
                local = np.random.default_rng(900 + i)
                with PrivLoraClient(srv.address, seed=i) as c:
                    for _ in range(3):
                        x = local.uniform(-1, 1, (int(local.integers(1, 30)), M))
                        aid = int(local.integers(0, 2))
                        y = c.lora_call(aid, x)
                        worst = max(worst, float(np.abs(y - expected(srv, aid, x, round_for(srv, c, c.t))).max()))
            except Exception as exc:           # reported below
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        concurrent_ok = not errors and worst <= 1e-4
    report(capsys, 8, frames_ok and tamper_ok and concurrent_ok,
           f"2 frames per call: {frames_ok}; tampered frame answered with ERROR and session survives: {tamper_ok}; "
           f"6 concurrent sessions, max deviation {worst:.1e}, errors {len(errors)}")


# ---------------------------------------------------------------- 9

def test_criterion_09_training(experiments, capsys):
    lines, ok = [], True
    for seed in range(3):
        _, plain = experiments(False, seed)
        _, pll = experiments(True, seed)
        first, last = np.mean(pll.losses[:10]), np.mean(pll.losses[-10:])
        gap = abs(plain.accuracy - pll.accuracy) * 100
        ok &= last < 0.5 * first and gap <= 5
        lines.append(f"seed {seed}: loss {first:.3f}->{last:.3f}, acc plain {plain.accuracy:.3f} "
                     f"pll {pll.accuracy:.3f} (gap {gap:.1f} pts)")
    report(capsys, 9, ok, "; ".join(lines))


# ---------------------------------------------------------------- 10

def test_criterion_10_bench(capsys):
    from privlora.bench import bench_server

    with bench_server(seed=10) as srv:
        tokens = run_token_bench(srv.address, TOKEN_GRID, rank=8, trials=3, seed=10)
        ranks = run_rank_bench(srv.address, token_count=64, trials=2, seed=10)
    per_token = tokens.best("tokens")
    fit = ranks.linear_fit()
    shape_ok = tokens.strictly_decreasing() and ranks.monotone_in_rank() and fit.r2 >= 0.9

    cores = os.cpu_count() or 1
    serial, parallel = [], []
    for workers, sink in ((1, serial), (4, parallel)):
        with PrivLoraServer(adapters=bench_adapters([8], seed=10), seed=10, workers=workers) as srv:
            rep = run_token_bench(srv.address, [512], rank=8, trials=2, seed=10, session_mode="persistent",
                                  parallel_mode=workers > 1)
            sink.append(rep.best("tokens")[512])
    speedup = serial[0] / parallel[0] - 1
    parallel_ok = cores >= 4 and speedup >= 0.10
    per_token_txt = ", ".join(f"{t}:{v:.1f}" for t, v in per_token.items())
    rank_txt = ", ".join(f"{r}:{v:.1f}" for r, v in ranks.best("rank").items())
    reason = "" if cores >= 4 else f" [host has {cores} core(s); the criterion requires >= 4]"
    report(capsys, 10, shape_ok and parallel_ok,
           f"per-token ms {{{per_token_txt}}} strictly decreasing: {tokens.strictly_decreasing()}; rank ms "
           f"{{{rank_txt}}} monotone: {ranks.monotone_in_rank()}, R^2 {fit.r2:.3f} (>= 0.9); parallel throughput "
           f"gain {speedup * 100:+.1f}% (>= 10%){reason}")


# ---------------------------------------------------------------- 11

ROT_STEPS = [1, 2, 3, 5, 7, 16, 100, 255, -1, -4, -33]


def test_criterion_11_ckks_unit_suite(params, small_params, capsys):
    rng = np.random.default_rng(1100)
    big_keys = ckks.keygen(params, [1], rng=11)
    keys = ckks.keygen(small_params, ROT_STEPS, rng=12)
    slots = small_params.slot_count

    def enc(v, k, **kw):
        return ckks.encrypt(ckks.encode(v, k.params, **kw), k, rng)

    def dec(ct, k, size):
        return ckks.decode(ckks.decrypt(ct, k))[:size]

    worst = Counter()
    for _ in range(1000):
        # full slot vectors with |v| <= 1: the fresh-encryption noise is an absolute floor of
        # about 1e-7 per slot at this scale, so relative error is only meaningful near unit magnitude
        v = rng.uniform(-1, 1, params.slot_count)
        worst["roundtrip"] = max(worst["roundtrip"], rel_err(dec(enc(v, big_keys), big_keys, len(v)), v))

        a, b = rng.uniform(-1, 1, (2, slots)) * 2.0 ** rng.integers(-4, 5)
        got = dec(ckks.add(enc(a, keys), enc(b, keys)), keys, slots)
        worst["add"] = max(worst["add"], float(np.abs(got - (a + b)).max() / max(np.abs(a).max(), np.abs(b).max())))

        got = dec(ckks.rescale(ckks.cmult_plain(enc(a, keys), ckks.encode(b, small_params))), keys, slots)
        worst["cmult"] = max(worst["cmult"], rel_err(got, a * b))

        got = dec(ckks.rescale(enc(a, keys, scale=small_params.scale * small_params.moduli[small_params.max_level])),
                  keys, slots)
        worst["rescale"] = max(worst["rescale"], rel_err(got, a))

        step = int(rng.choice(ROT_STEPS))
        got = dec(ckks.rotate(enc(a, keys), step, keys), keys, slots)
        worst["rotate"] = max(worst["rotate"], rel_err(got, np.roll(a, -step)))

    limits = dict(roundtrip=1e-6, add=1e-6, cmult=1e-4, rescale=1e-6, rotate=1e-5)
    ok = all(worst[k] <= lim for k, lim in limits.items())
    report(capsys, 11, ok, "1000 cases each, worst relative error " +
           ", ".join(f"{k} {worst[k]:.1e} (<= {lim:g})" for k, lim in limits.items()))
