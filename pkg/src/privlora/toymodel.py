"""Desk-scale pre-norm transformer with LoRA bypasses on the attention projections.

Row convention throughout: activations are (batch, tokens, features) and a
projection is x @ W. A LoRA target computes x @ W + (alpha/r) x @ A1 @ A2,
optionally routed through a private linear layer and demodulated mod q.

The forward pass is written as a generator that pauses at every adapter
call, yielding the split point and the activation the bypass needs and
resuming with the bypass output. The monolithic forward, the split
pinf1/pinf2 pair and the encrypted client all drive the same generator, so
they execute identical floating-point operations.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .pll import PllConfig, PllWeights, demodulate, demodulate_ste, pll_init, sample_round

TARGETS = ("q", "k", "v")
LABEL_TOKENS = (ord("N"), ord("Y"))
WRAP_MARGIN = 0.9
TOY_M_PRIME = 64
Q_FACTOR = 8.0


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class ToyModelConfig:
    vocab: int = 256
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 64
    lora_targets: tuple = TARGETS
    lora_rank: int = 8
    lora_alpha: float = 8.0
    mask_mode: str = "additive"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not set(self.lora_targets) <= set(TARGETS):
            raise ValueError(f"LoRA targets must be a subset of {TARGETS}")
        if self.lora_rank and not self.lora_targets:
            raise ValueError("LoRA is enabled but no target matrix is selected")
        if self.mask_mode not in ("additive", "multiplicative"):
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.lora_rank if self.lora_rank else 0.0

    def split_points(self) -> list[SplitPoint]:
        return [SplitPoint(layer, t) for layer in range(self.n_layers) for t in TARGETS if t in self.lora_targets]


@dataclass(frozen=True, order=True)
class SplitPoint:
    layer: int
    target: str

    @property
    def key(self) -> str:
        return f"{self.layer}_{self.target}"


# ---------------------------------------------------------------- attention

def causal_mask(t: int, mode: str = "additive", dtype=torch.float64) -> torch.Tensor:
    keep = torch.tril(torch.ones(t, t, dtype=torch.bool))
    if mode == "additive":
        return torch.zeros(t, t, dtype=dtype).masked_fill(~keep, float("-inf"))
    return keep.to(dtype)


def self_attention_forward(q, k, v, n_heads: int, mask: torch.Tensor | None = None, mode: str = "additive"):
    """Multi-head softmax(Q K^T / sqrt(d_h) (+ or *) M) V over (batch, tokens, d_model) inputs."""
    if q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"Q, K, V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    b, t, d = q.shape
    if d % n_heads:
        raise ValueError("model width is not divisible by the head count")
    dh = d // n_heads

    def heads(x):
        return x.view(b, t, n_heads, dh).transpose(1, 2)

    scores = heads(q) @ heads(k).transpose(-1, -2) / math.sqrt(dh)
    if mask is not None:
        scores = scores + mask if mode == "additive" else scores * mask
    weights = torch.softmax(scores, dim=-1)
    return (weights @ heads(v)).transpose(1, 2).reshape(b, t, d)


# ---------------------------------------------------------------- adapters

class PllState(torch.nn.Module):
    """Trainable E' plus the frozen s and q of a private linear layer."""

    def __init__(self, weights: PllWeights):
        super().__init__()
        c = weights.config
        self.q = float(c.q)
        self.gamma = float(c.gamma)
        self.p_bern = float(c.p_bern)
        self.m_prime = c.m_prime
        self.e_prime = torch.nn.Parameter(torch.tensor(weights.e_prime, dtype=torch.float64))
        self.register_buffer("s", torch.tensor(weights.s, dtype=torch.float64))


class LoraAdapter(torch.nn.Module):
    def __init__(self, m: int, n: int, rank: int, alpha: float, generator: torch.Generator):
        super().__init__()
        self.rank = rank
        self.alpha = float(alpha)
        self.a1 = torch.nn.Parameter(torch.randn(m, rank, generator=generator, dtype=torch.float64) / math.sqrt(m))
        self.a2 = torch.nn.Parameter(torch.zeros(rank, n, dtype=torch.float64))
        self.pll: PllState | None = None
        self.range_penalty: torch.Tensor | None = None

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def matrix(self) -> torch.Tensor:
        return self.scaling * self.a1 @ self.a2

    def attach_pll(self, q: float, rng, m_prime: int = TOY_M_PRIME, p_bern: float = 0.9, sigma_init: float = 0.02):
        m, n = self.a1.shape[0], self.a2.shape[1]
        cfg = PllConfig(m, n, m_prime=m_prime, q=q, p_bern=p_bern, lora_rank=self.rank,
                        lora_alpha=self.alpha, sigma_init=sigma_init)
        self.pll = PllState(pll_init(cfg, rng))

    def pll_weights(self) -> PllWeights:
        if self.pll is None:
            raise ValueError("adapter is not wrapped in a private linear layer")
        m, n = self.a1.shape[0], self.a2.shape[1]
        p = self.pll
        cfg = PllConfig(m, n, m_prime=p.m_prime, q=p.q, gamma=p.gamma, p_bern=p.p_bern,
                        lora_rank=self.rank, lora_alpha=self.alpha)
        return PllWeights(cfg, p.e_prime.detach().numpy().copy(), p.s.numpy().copy(),
                          a1=self.a1.detach().numpy().copy(), a2=self.a2.detach().numpy().copy())

    def training_delta(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable bypass: plain LoRA, or the masked mod-q layer with a fresh Bernoulli P."""
        a = self.matrix()
        if self.pll is None:
            return x @ a
        p = self.pll
        mask = (torch.rand(p.e_prime.shape, dtype=torch.float64) < p.p_bern).to(torch.float64)
        offset = demodulate_ste((p.e_prime * mask).sum(dim=0) + p.s @ a.detach(), p.q)
        pre = x @ a + offset
        # hinge on the part of the signal that would wrap around; the identity
        # gradient of the reduction would otherwise push it further out
        self.range_penalty = (torch.relu(pre.abs() - WRAP_MARGIN * p.q / 2) ** 2).mean()
        return demodulate_ste(pre, p.q)

    @torch.no_grad()
    def compensate(self, old_matrix: torch.Tensor) -> None:
        """Keep the offset E + sA fixed mod q after A moved (see pll.offset_compensation)."""
        if self.pll is None:
            return
        p = self.pll
        e = p.p_bern * p.e_prime.sum(dim=0)
        shifted = e - p.s @ (self.matrix() - old_matrix)
        delta = shifted - p.q * torch.floor((shifted + p.q / 2) / p.q) - e
        p.e_prime += delta / (p.p_bern * p.m_prime)


# ---------------------------------------------------------------- model

class Block(torch.nn.Module):
    def __init__(self, cfg: ToyModelConfig, g: torch.Generator):
        super().__init__()
        d, f = cfg.d_model, cfg.d_ff

        def mat(rows, cols):
            return torch.nn.Parameter(torch.randn(rows, cols, generator=g, dtype=torch.float64) / math.sqrt(rows))

        self.ln1_w = torch.nn.Parameter(torch.ones(d, dtype=torch.float64))
        self.ln1_b = torch.nn.Parameter(torch.zeros(d, dtype=torch.float64))
        self.wq, self.wk, self.wv, self.wo = mat(d, d), mat(d, d), mat(d, d), mat(d, d)
        self.ln2_w = torch.nn.Parameter(torch.ones(d, dtype=torch.float64))
        self.ln2_b = torch.nn.Parameter(torch.zeros(d, dtype=torch.float64))
        self.w1, self.w2 = mat(d, f), mat(f, d)
        self.b1 = torch.nn.Parameter(torch.zeros(f, dtype=torch.float64))
        self.b2 = torch.nn.Parameter(torch.zeros(d, dtype=torch.float64))

    def tensors(self) -> list[torch.nn.Parameter]:
        return [self.ln1_w, self.ln1_b, self.wq, self.wk, self.wv, self.wo,
                self.ln2_w, self.ln2_b, self.w1, self.b1, self.w2, self.b2]


class ToyModel(torch.nn.Module):
    def __init__(self, cfg: ToyModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(seed)
        d = cfg.d_model
        self.tok_emb = torch.nn.Parameter(torch.randn(cfg.vocab, d, generator=g, dtype=torch.float64))
        self.pos_emb = torch.nn.Parameter(0.1 * torch.randn(cfg.max_len, d, generator=g, dtype=torch.float64))
        self.blocks = torch.nn.ModuleList(Block(cfg, g) for _ in range(cfg.n_layers))
        self.lnf_w = torch.nn.Parameter(torch.ones(d, dtype=torch.float64))
        self.lnf_b = torch.nn.Parameter(torch.zeros(d, dtype=torch.float64))
        self.head = torch.nn.Parameter(torch.randn(d, cfg.vocab, generator=g, dtype=torch.float64) / math.sqrt(d))
        self.adapters = torch.nn.ModuleDict()
        if cfg.lora_rank:
            for p in cfg.split_points():
                self.adapters[p.key] = LoraAdapter(d, d, cfg.lora_rank, cfg.lora_alpha, g)

    # -- parameter groups
    def base_tensors(self) -> list[torch.nn.Parameter]:
        out = [self.tok_emb, self.pos_emb]
        for b in self.blocks:
            out += b.tensors()
        return out + [self.lnf_w, self.lnf_b, self.head]

    def adapter(self, point: SplitPoint) -> LoraAdapter:
        try:
            return self.adapters[point.key]
        except KeyError:
            raise SplitError(f"no adapter at {point}") from None

    def adapter_parameters(self) -> list[torch.nn.Parameter]:
        return list(self.adapters.parameters())

    def freeze_base(self) -> None:
        for t in self.base_tensors():
            t.requires_grad_(False)

    def attach_pll(self, qs: dict[str, float], seed: int = 0, **kw) -> None:
        for i, (key, ad) in enumerate(self.adapters.items()):
            ad.attach_pll(qs[key], np.random.default_rng([seed, i]), **kw)

    @property
    def uses_pll(self) -> bool:
        return any(a.pll is not None for a in self.adapters.values())

    # -- forward
    def steps(self, tokens: torch.Tensor):
        """Generator: yields (SplitPoint, x_L), receives the bypass output, returns logits."""
        cfg = self.cfg
        if tokens.dim() == 1:
            tokens = tokens[None]
        t = tokens.shape[1]
        if t > cfg.max_len:
            raise ValueError(f"sequence of {t} tokens exceeds max_len={cfg.max_len}")
        mask = causal_mask(t, cfg.mask_mode)
        x = self.tok_emb[tokens] + self.pos_emb[:t]
        for li, blk in enumerate(self.blocks):
            h = F.layer_norm(x, (cfg.d_model,), blk.ln1_w, blk.ln1_b)
            proj = {"q": h @ blk.wq, "k": h @ blk.wk, "v": h @ blk.wv}
            for tgt in TARGETS:
                if cfg.lora_rank and tgt in cfg.lora_targets:
                    delta = yield SplitPoint(li, tgt), h
                    if delta.shape != proj[tgt].shape:
                        raise SplitError(f"bypass output {tuple(delta.shape)} != {tuple(proj[tgt].shape)}")
                    proj[tgt] = proj[tgt] + delta
            attn = self_attention_forward(proj["q"], proj["k"], proj["v"], cfg.n_heads, mask, cfg.mask_mode)
            x = x + attn @ blk.wo
            u = F.layer_norm(x, (cfg.d_model,), blk.ln2_w, blk.ln2_b)
            x = x + F.gelu(u @ blk.w1 + blk.b1) @ blk.w2 + blk.b2
        return F.layer_norm(x, (cfg.d_model,), self.lnf_w, self.lnf_b) @ self.head

    def forward(self, tokens: torch.Tensor, bypass=None) -> torch.Tensor:
        bypass = bypass or self.training_bypass
        gen = self.steps(tokens)
        try:
            point, x = next(gen)
            while True:
                point, x = gen.send(bypass(point, x))
        except StopIteration as stop:
            return stop.value

    def training_bypass(self, point: SplitPoint, x: torch.Tensor) -> torch.Tensor:
        return self.adapter(point).training_delta(x)


def lora_forward(x, w, adapter: LoraAdapter):
    """x @ W + (alpha/r) x @ A1 @ A2 for the plain adapter."""
    if x.shape[-1] != w.shape[0] or adapter.a1.shape[0] != w.shape[0] or adapter.a2.shape[1] != w.shape[1]:
        raise ValueError("dimension mismatch between input, base weight and adapter")
    return x @ w + adapter.scaling * (x @ adapter.a1) @ adapter.a2


# ---------------------------------------------------------------- plaintext bypass

@dataclass
class PlainBypass:
    """Reference bypass evaluated in plaintext.

    For PLL-wrapped adapters a round (P, k) is sampled per call from `rng`,
    unless `rounds` supplies recorded rounds keyed by call index. Every
    round used is appended to `log`.
    """

    model: ToyModel
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    rounds: list | None = None
    log: list = field(default_factory=list)

    @torch.no_grad()
    def __call__(self, point: SplitPoint, x: torch.Tensor) -> torch.Tensor:
        ad = self.model.adapter(point)
        if ad.pll is None:
            return x @ ad.matrix()
        w = ad.pll_weights()
        rows = x.reshape(-1, x.shape[-1]).numpy()
        rnd = self.rounds[len(self.log)] if self.rounds is not None else sample_round(w, rows.shape[0], self.rng)
        self.log.append((point, rnd))
        y = demodulate(rows @ w.matrix + rnd.qt, w.config.q)
        return torch.from_numpy(np.ascontiguousarray(y)).reshape(*x.shape[:-1], -1)


# ---------------------------------------------------------------- split inference

@dataclass
class SplitState:
    generator: object
    split: SplitPoint
    x_l: torch.Tensor
    done: bool = False


def encode_text(text: str | bytes, max_len: int | None = None) -> torch.Tensor:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    if max_len is not None:
        raw = raw[:max_len]
    return torch.tensor(list(raw), dtype=torch.long)


def _resume(gen, value, bypass, stop_at=None):
    try:
        point, x = gen.send(value)
        while point != stop_at:
            point, x = gen.send(bypass(point, x))
        return point, x, None
    except StopIteration as stop:
        return None, None, stop.value


def pinf1(model: ToyModel, tokens, split: SplitPoint, bypass=None) -> SplitState:
    """Run the client-side forward up to `split`; earlier adapter calls use `bypass`."""
    if split not in model.cfg.split_points():
        raise SplitError(f"{split} is not an adapter call of this model")
    bypass = bypass or PlainBypass(model)
    gen = model.steps(tokens)
    point, x, _ = _resume(gen, None, bypass, split)
    return SplitState(gen, split, x)


def pinf2(state: SplitState, x_l_prime: torch.Tensor, bypass=None) -> torch.Tensor:
    """Feed the bypass output for the paused call and finish the forward pass."""
    if state.done:
        raise SplitError("split state was already resumed")
    state.done = True
    bypass = bypass or (lambda p, x: (_ for _ in ()).throw(SplitError(f"no bypass for {p}")))
    _, _, logits = _resume(state.generator, x_l_prime, bypass)
    return logits


# ---------------------------------------------------------------- toy task and training

DIGITS = b"0123456789"
LETTERS = b"abcdefghijklmnopqrstuvwxyz    "


def make_dataset(n: int, length: int = 16, seed: int = 0):
    """Byte strings labelled 1 when they contain a run of four or more digits."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for i in range(n):
        chars = rng.choice(list(LETTERS), size=length)
        label = i % 2
        if label:
            run = int(rng.integers(4, 8))
            start = int(rng.integers(0, length - run + 1))
            chars[start:start + run] = rng.choice(list(DIGITS), size=run)
        elif rng.random() < 0.5:
            # isolated digits, never four in a row
            pos = rng.choice(length, size=2, replace=False)
            chars[pos] = rng.choice(list(DIGITS), size=2)
        xs.append(bytes(chars.tolist()))
        ys.append(label)
    order = rng.permutation(n)
    return [xs[i] for i in order], np.array(ys)[order]


def class_logits(logits: torch.Tensor) -> torch.Tensor:
    return logits[..., -1, list(LABEL_TOKENS)]


def calibrate_q(model: ToyModel, tokens: torch.Tensor, factor: float = Q_FACTOR) -> dict[str, float]:
    """Per-adapter modulus: `factor` times the std of the base projection x @ W on a batch."""
    out = {}
    with torch.no_grad():
        gen = model.steps(tokens)
        try:
            point, x = next(gen)
            while True:
                w = getattr(model.blocks[point.layer], "w" + point.target)
                out[point.key] = factor * float((x @ w).std())
                point, x = gen.send(torch.zeros_like(x @ w))
        except StopIteration:
            pass
    return out


@dataclass
class TrainResult:
    losses: list
    accuracy: float


def evaluate(model: ToyModel, texts, labels, bypass=None) -> float:
    with torch.no_grad():
        tokens = torch.stack([encode_text(t) for t in texts])
        pred = class_logits(model(tokens, bypass)).argmax(dim=-1).numpy()
    return float((pred == labels).mean())


def train_toy_lora(model: ToyModel, dataset, steps: int = 300, batch: int = 32, lr: float = 1e-2,
                   seed: int = 0, eval_set=None, range_weight: float = 1.0) -> TrainResult:
    """Train the adapters (A1, A2 and E' when wrapped) with Adam; base weights stay frozen."""
    texts, labels = dataset
    model.freeze_base()
    factors = [p for a in model.adapters.values() for p in (a.a1, a.a2)]
    groups = [{"params": factors}]
    offsets = [a.pll.e_prime for a in model.adapters.values() if a.pll is not None]
    if offsets:
        # all m' rows of E' move together under Adam; scale so their sum moves like one bias
        groups.append({"params": offsets, "lr": lr / offsets[0].shape[0]})
    opt = torch.optim.Adam(groups, lr=lr)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    tokens = torch.stack([encode_text(t) for t in texts])
    target = torch.as_tensor(labels, dtype=torch.long)
    losses = []
    for _ in range(steps):
        idx = torch.as_tensor(rng.choice(len(texts), size=batch, replace=False))
        loss = F.cross_entropy(class_logits(model(tokens[idx])), target[idx])
        penalties = [a.range_penalty for a in model.adapters.values() if a.range_penalty is not None]
        objective = loss + range_weight * sum(penalties) if penalties else loss
        if not torch.isfinite(objective):
            raise ArithmeticError(f"training diverged with loss {loss.item()}")
        old = {k: a.matrix().detach().clone() for k, a in model.adapters.items()}
        opt.zero_grad()
        objective.backward()
        opt.step()
        for k, a in model.adapters.items():
            a.compensate(old[k])
        losses.append(loss.item())
    acc = evaluate(model, *(eval_set or dataset), PlainBypass(model, np.random.default_rng(seed))) \
        if steps or eval_set else float("nan")
    return TrainResult(losses, acc)


def toy_experiment(use_pll: bool, seed: int = 0, steps: int = 300, train_size: int = 2000, test_size: int = 400,
                   cfg: ToyModelConfig | None = None) -> tuple[ToyModel, TrainResult]:
    """Build a toy model, optionally wrap its adapters, train them and score on a held-out set.

    The datasets are fixed (seeds 1 and 2); `seed` drives the model
    initialisation, the private-layer secrets and the batch order.
    """
    train = make_dataset(train_size, seed=1)
    test = make_dataset(test_size, seed=2)
    model = ToyModel(cfg or ToyModelConfig(), seed=seed)
    if use_pll:
        calib = torch.stack([encode_text(t) for t in train[0][:64]])
        model.attach_pll(calibrate_q(model, calib), seed)
    return model, train_toy_lora(model, train, steps=steps, seed=seed, eval_set=test)


# ---------------------------------------------------------------- checkpoint

TOYM_MAGIC = b"TOYM"
TOYM_VERSION = 1
_CFG = struct.Struct("<IIIIIIIdBB")
_PLL = struct.Struct("<dddI")


def _tensor_bytes(t) -> bytes:
    return np.ascontiguousarray(t.detach().numpy(), dtype="<f8").tobytes()


def dump_model(model: ToyModel, include_adapters: bool = True) -> bytes:
    """Serialize base weights and, unless stripped, the adapters and their private layers."""
    c = model.cfg
    targets = sum(1 << TARGETS.index(t) for t in c.lora_targets)
    parts = [TOYM_MAGIC, struct.pack("<H", TOYM_VERSION),
             _CFG.pack(c.vocab, c.n_layers, c.d_model, c.n_heads, c.d_ff, c.max_len, c.lora_rank, c.lora_alpha,
                       targets, c.mask_mode == "multiplicative")]
    parts += [_tensor_bytes(t) for t in model.base_tensors()]
    adapters = list(model.adapters.items()) if include_adapters else []
    parts.append(struct.pack("<I", len(adapters)))
    for key, ad in adapters:
        layer, tgt = key.split("_")
        parts += [struct.pack("<IB", int(layer), TARGETS.index(tgt)), _tensor_bytes(ad.a1), _tensor_bytes(ad.a2)]
        if ad.pll is None:
            parts.append(b"\x00")
        else:
            p = ad.pll
            parts += [b"\x01", _PLL.pack(p.q, p.gamma, p.p_bern, p.m_prime), _tensor_bytes(p.e_prime), _tensor_bytes(p.s)]
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.off = raw, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise ValueError("truncated TOYM checkpoint")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def tensor(self, shape) -> torch.Tensor:
        count = math.prod(shape)
        return torch.from_numpy(np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).copy())


def load_model(raw: bytes) -> ToyModel:
    r = _Reader(raw)
    if r.take(4) != TOYM_MAGIC:
        raise ValueError("bad TOYM magic")
    (version,) = r.unpack(struct.Struct("<H"))
    if version != TOYM_VERSION:
        raise ValueError(f"unsupported TOYM version {version}")
    vocab, n_layers, d, heads, d_ff, max_len, rank, alpha, targets, mult = r.unpack(_CFG)
    cfg = ToyModelConfig(vocab, n_layers, d, heads, d_ff, max_len,
                         tuple(t for i, t in enumerate(TARGETS) if targets >> i & 1), rank, alpha,
                         "multiplicative" if mult else "additive")
    model = ToyModel(cfg)
    with torch.no_grad():
        for t in model.base_tensors():
            t.copy_(r.tensor(tuple(t.shape)))
        (count,) = r.unpack(struct.Struct("<I"))
        present = set()
        for _ in range(count):
            layer, tgt = r.unpack(struct.Struct("<IB"))
            ad = model.adapter(SplitPoint(layer, TARGETS[tgt]))
            present.add(SplitPoint(layer, TARGETS[tgt]).key)
            ad.a1.copy_(r.tensor(tuple(ad.a1.shape)))
            ad.a2.copy_(r.tensor(tuple(ad.a2.shape)))
            if r.take(1) == b"\x01":
                q, gamma, p_bern, m_prime = r.unpack(_PLL)
                cfg_p = PllConfig(d, d, m_prime=m_prime, q=q, gamma=gamma, p_bern=p_bern,
                                  lora_rank=rank, lora_alpha=alpha)
                e_prime = r.tensor((m_prime, d)).numpy()
                s = r.tensor((d,)).numpy()
                ad.pll = PllState(PllWeights(cfg_p, e_prime, s, a1=ad.a1.detach().numpy(), a2=ad.a2.detach().numpy()))
    if r.off != len(raw):
        raise ValueError("trailing bytes in TOYM checkpoint")
    for key in list(model.adapters):
        if key not in present:
            del model.adapters[key]
    return model
