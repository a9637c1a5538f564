"""Private linear layer: y = xA + x'(E' * P) + sA + kq, demodulated client-side.

x' is an all-ones row, so x'(E' * P) is the column sum of the masked E'
broadcast over every input row. All reference functions keep the dtype of
their inputs, so passing object arrays of `fractions.Fraction` gives exact
rational arithmetic.
"""

from __future__ import annotations

import dataclasses
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_M_PRIME = 16
DEFAULT_P_BERN = 0.9
DEFAULT_SIGMA_INIT = 0.02


class PllConfigWarning(UserWarning):
    pass


class PllError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    pass


def round_half_even(q) -> int:
    return int(round(q))


def mask_bound(q) -> int:
    """Largest |k| drawn per round."""
    return round_half_even(q)


@dataclass(frozen=True)
class PllConfig:
    m: int
    n: int
    m_prime: int = DEFAULT_M_PRIME
    q: float = 1.0
    gamma: float | None = None        # defaults to 2*sqrt(m)*q
    p_bern: float = DEFAULT_P_BERN
    lora_rank: int = 0                # 0 means a dense A
    lora_alpha: float | None = None   # defaults to the rank, so alpha/r = 1
    sigma_init: float = DEFAULT_SIGMA_INIT
    s_rows: int = 0                   # 0: one s shared by every row; d > 0: d independent s rows
    strict: bool = False

    def __post_init__(self):
        if self.m < 1 or self.n < 1 or self.m_prime < 1:
            raise PllError("m, n and m_prime must be positive")
        if not self.q > 0:
            raise PllError(f"modulus q must be positive, got {self.q}")
        if not 0 < self.p_bern <= 1:
            raise PllError(f"p_bern must lie in (0, 1], got {self.p_bern}")
        if self.lora_rank < 0 or self.s_rows < 0:
            raise PllError("lora_rank and s_rows must be non-negative")
        if self.gamma is None:
            object.__setattr__(self, "gamma", 2.0 * math.sqrt(self.m) * self.q)
        if not self.gamma >= 0:
            raise PllError("gamma must be non-negative")
        ratio = self.gamma / self.q
        floor = 2.0 * math.sqrt(self.m)
        if ratio < floor * (1 - 1e-12):
            msg = f"gamma/q = {ratio:.4g} is below 2*sqrt(m) = {floor:.4g}"
            if self.strict:
                raise PllError(msg)
            warnings.warn(msg, PllConfigWarning, stacklevel=3)

    @property
    def scaling(self) -> float:
        if not self.lora_rank:
            return 1.0
        alpha = self.lora_rank if self.lora_alpha is None else self.lora_alpha
        return alpha / self.lora_rank

    @property
    def k_bound(self) -> int:
        return mask_bound(self.q)


@dataclass(frozen=True, eq=False)
class PllWeights:
    config: PllConfig
    e_prime: np.ndarray            # (m', n)
    s: np.ndarray                  # (m,) or (s_rows, m), norm gamma per row
    a: np.ndarray | None = None    # dense (m, n)
    a1: np.ndarray | None = None   # (m, r)
    a2: np.ndarray | None = None   # (r, n)

    def __post_init__(self):
        c = self.config
        if self.e_prime.shape != (c.m_prime, c.n):
            raise PllError(f"E' has shape {self.e_prime.shape}, expected {(c.m_prime, c.n)}")
        want_s = (c.s_rows, c.m) if c.s_rows else (c.m,)
        if self.s.shape != want_s:
            raise PllError(f"s has shape {self.s.shape}, expected {want_s}")
        if c.lora_rank:
            if self.a1 is None or self.a2 is None:
                raise PllError("factored layer needs both A1 and A2")
            if self.a1.shape != (c.m, c.lora_rank) or self.a2.shape != (c.lora_rank, c.n):
                raise PllError(f"factor shapes {self.a1.shape} / {self.a2.shape} do not match the config")
        elif self.a is None or self.a.shape != (c.m, c.n):
            raise PllError("dense layer needs A of shape (m, n)")

    @property
    def factored(self) -> bool:
        return self.config.lora_rank > 0

    @property
    def matrix(self) -> np.ndarray:
        """The effective A, i.e. (alpha/r) * A1 @ A2 for a factored layer."""
        if self.factored:
            return self.config.scaling * (self.a1 @ self.a2)
        return self.a

    @property
    def x_prime(self) -> np.ndarray:
        return np.ones(self.config.m_prime, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class PllRound:
    p: np.ndarray      # (m', n) in {0, 1}
    k: np.ndarray      # (d, n) integers
    qt: np.ndarray     # (d, n)
    meta: dict = field(default_factory=dict)


def sample_sphere(rng: np.random.Generator, dim: int, radius: float, rows: int = 0) -> np.ndarray:
    shape = (rows, dim) if rows else (dim,)
    v = rng.standard_normal(shape)
    return radius * v / np.linalg.norm(v, axis=-1, keepdims=True)


def pll_init(config: PllConfig, rng=None) -> PllWeights:
    rng = np.random.default_rng(rng)
    s = sample_sphere(rng, config.m, config.gamma, config.s_rows)
    e_prime = rng.normal(0.0, config.sigma_init, (config.m_prime, config.n))
    if config.lora_rank:
        a1 = rng.normal(0.0, 1.0 / math.sqrt(config.m), (config.m, config.lora_rank))
        a2 = np.zeros((config.lora_rank, config.n))
        return PllWeights(config, e_prime, s, a1=a1, a2=a2)
    a = rng.normal(0.0, 1.0 / math.sqrt(config.m), (config.m, config.n))
    return PllWeights(config, e_prime, s, a=a)


def masked_noise(w: PllWeights, p) -> np.ndarray:
    """x'(E' * P): a length-n row."""
    return w.x_prime.astype(w.e_prime.dtype) @ (w.e_prime * p)


def shift_term(w: PllWeights, d: int) -> np.ndarray:
    """sA broadcast to (d, n)."""
    sa = w.s @ w.matrix
    if sa.ndim == 1:
        return np.broadcast_to(sa, (d, w.config.n))
    if sa.shape[0] != d:
        raise PllError(f"weights carry {sa.shape[0]} rows of s but the input has {d} rows")
    return sa


def build_qt(w: PllWeights, d: int, randomness) -> np.ndarray:
    """Qt = x'(E' * P) + sA + kq for a (P, k) pair."""
    p, k = randomness
    p = np.asarray(p)
    k = np.asarray(k)
    if p.shape != w.e_prime.shape:
        raise PllError(f"P has shape {p.shape}, expected {w.e_prime.shape}")
    if k.shape != (d, w.config.n):
        raise PllError(f"k has shape {k.shape}, expected {(d, w.config.n)}")
    return masked_noise(w, p)[None, :] + shift_term(w, d) + k * w.config.q


def sample_round(w: PllWeights, d: int, rng) -> PllRound:
    c = w.config
    p = (rng.random((c.m_prime, c.n)) < c.p_bern).astype(np.int64)
    k = rng.integers(-c.k_bound, c.k_bound + 1, size=(d, c.n), dtype=np.int64)
    return PllRound(p, k, build_qt(w, d, (p, k)))


def pll_forward_reference(x, w: PllWeights, rnd: PllRound):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != w.config.m:
        raise PllError(f"input of shape {x.shape} does not have {w.config.m} columns")
    if rnd.qt.shape != (x.shape[0], w.config.n):
        raise PllError(f"round was sampled for {rnd.qt.shape[0]} rows, input has {x.shape[0]}")
    return x @ w.matrix + rnd.qt


def demodulate(y, q):
    """Centered representative of y mod q, in [-q/2, q/2)."""
    if not q > 0:
        raise PllError(f"modulus q must be positive, got {q}")
    y = np.asarray(y)
    return y - q * ((y + q / 2) // q)


# ---------------------------------------------------------------- training

def _torch():
    import torch

    return torch


def demodulate_ste(y, q):
    """Centered mod q whose backward pass is the identity."""
    torch = _torch()
    with torch.no_grad():
        shift = q * torch.floor((y + q / 2) / q)
    return y - shift


def _trainable(w: PllWeights):
    torch = _torch()
    names = ("a1", "a2", "e_prime") if w.factored else ("a", "e_prime")
    return {k: torch.tensor(getattr(w, k), dtype=torch.float64, requires_grad=True) for k in names}


def _training_forward(w: PllWeights, params: dict, x, p_mask=None, shift_grad=True):
    torch = _torch()
    c = w.config
    a = c.scaling * params["a1"] @ params["a2"] if w.factored else params["a"]
    e = params["e_prime"] if p_mask is None else params["e_prime"] * p_mask
    s = torch.as_tensor(w.s, dtype=torch.float64)
    y = x @ a + e.sum(dim=0) + s @ (a if shift_grad else a.detach())
    return demodulate_ste(y, c.q)


def _mse(pred, target):
    return ((pred - target) ** 2).mean()


def pll_loss_and_grads(w: PllWeights, x, target, loss_fn=None, p_mask=None, shift_grad=True):
    """Loss of the mod-q training forward and gradients of every trainable array (numpy).

    With `shift_grad=False` the sA term is held constant, which gives the
    gradient with respect to A at a fixed total offset b = E + sA.
    """
    torch = _torch()
    loss_fn = loss_fn or _mse
    params = _trainable(w)
    x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    target = torch.as_tensor(np.asarray(target, dtype=np.float64))
    pm = None if p_mask is None else torch.as_tensor(np.asarray(p_mask, dtype=np.float64))
    loss = loss_fn(_training_forward(w, params, x, pm, shift_grad), target)
    loss.backward()
    return loss.item(), {k: v.grad.numpy().copy() for k, v in params.items()}


def pll_training_loss(w: PllWeights, x, target, loss_fn=None, p_mask=None) -> float:
    torch = _torch()
    loss_fn = loss_fn or _mse
    with torch.no_grad():
        params = {k: v.detach() for k, v in _trainable(w).items()}
        pm = None if p_mask is None else torch.as_tensor(np.asarray(p_mask, dtype=np.float64))
        y = _training_forward(w, params, torch.as_tensor(np.asarray(x, dtype=np.float64)), pm)
        return float(loss_fn(y, torch.as_tensor(np.asarray(target, dtype=np.float64))))


def offset_compensation(w: PllWeights, new_matrix: np.ndarray, keep: float | None = None) -> np.ndarray:
    """Row increment for E' that cancels the change of sA, reduced mod q.

    Moving A to `new_matrix` shifts sA by s(A_new - A_old). The masked sum
    x'(E' * P) has expectation p * sum(E'), so that expectation is moved by
    the negated shift and wrapped into [-q/2, q/2), which keeps E' small and
    the dropout noise it feeds bounded. `keep` overrides the keep rate,
    e.g. 1.0 when training without the mask.
    """
    c = w.config
    keep = c.p_bern if keep is None else keep
    s = w.s if w.s.ndim == 1 else w.s.mean(axis=0)
    e = keep * w.e_prime.sum(axis=0)
    delta = demodulate(e - s @ (new_matrix - w.matrix), c.q) - e
    return np.broadcast_to(delta / (keep * c.m_prime), w.e_prime.shape)


def pll_train_step(w: PllWeights, batch, loss_fn=None, lr: float = 1e-2, rng=None, compensate: bool = True):
    """One gradient step on A (or A1, A2) and E'. s, x' and q are never touched.

    With `compensate` (the default) the step is taken in the coordinates
    (A, b = E + sA): A follows its gradient at fixed b and E' absorbs the
    resulting change of sA. Without it, plain SGD on (A, E') is used, which
    is ill-conditioned because |s| = gamma is large. With `rng`, a fresh
    Bernoulli mask multiplies E' in the forward pass. Returns (weights, loss).
    """
    x, target = batch
    p_mask = None
    if rng is not None:
        p_mask = (rng.random(w.e_prime.shape) < w.config.p_bern).astype(np.float64)
    loss, grads = pll_loss_and_grads(w, x, target, loss_fn, p_mask, shift_grad=not compensate)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite training loss {loss}")
    updates = {k: getattr(w, k) - lr * g for k, g in grads.items()}
    new = dataclasses.replace(w, **updates)
    if compensate and not np.array_equal(new.matrix, w.matrix):
        new = dataclasses.replace(new, e_prime=new.e_prime + offset_compensation(w, new.matrix, None if rng is not None else 1.0))
    return new, loss


# ---------------------------------------------------------------- checkpoint

PLLW_MAGIC = b"PLLW"
PLLW_VERSION = 1
_PLLW_HEAD = struct.Struct("<4sHIIIIIdddddB")


def dump_pll(w: PllWeights) -> bytes:
    c = w.config
    alpha = float("nan") if c.lora_alpha is None else c.lora_alpha
    head = _PLLW_HEAD.pack(PLLW_MAGIC, PLLW_VERSION, c.m, c.n, c.m_prime, c.lora_rank, c.s_rows,
                           c.q, c.gamma, c.p_bern, alpha, c.sigma_init, int(c.strict))
    arrays = [w.a1, w.a2] if w.factored else [w.a]
    arrays += [w.e_prime, w.s]
    return head + b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def load_pll(raw: bytes) -> PllWeights:
    if len(raw) < _PLLW_HEAD.size:
        raise PllError("truncated PLLW header")
    magic, version, m, n, m_prime, r, s_rows, q, gamma, p_bern, alpha, sigma, strict = \
        _PLLW_HEAD.unpack_from(raw)
    if magic != PLLW_MAGIC:
        raise PllError(f"bad magic {magic!r}")
    if version != PLLW_VERSION:
        raise PllError(f"unsupported PLLW version {version}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PllConfigWarning)
        config = PllConfig(m, n, m_prime, q, gamma, p_bern, r, None if math.isnan(alpha) else alpha,
                           sigma, s_rows, bool(strict))
    shapes = [(m, r), (r, n)] if r else [(m, n)]
    shapes += [(m_prime, n), (s_rows, m) if s_rows else (m,)]
    need = _PLLW_HEAD.size + 8 * sum(math.prod(s) for s in shapes)
    if len(raw) != need:
        raise PllError(f"PLLW body holds {len(raw)} bytes, expected {need}")
    arrays, off = [], _PLLW_HEAD.size
    for shape in shapes:
        count = math.prod(shape)
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy())
        off += 8 * count
    if r:
        a1, a2, e_prime, s = arrays
        return PllWeights(config, e_prime, s, a1=a1, a2=a2)
    a, e_prime, s = arrays
    return PllWeights(config, e_prime, s, a=a)
