"""Published reference measurements, kept apart from anything this package measures.

All values are copied verbatim and only ever shown in columns labelled as
reference data. Their units are the published ones (seconds per token), and
they come from a 6B-parameter model on different hardware, so only curve
shapes are comparable with desk-scale measurements.
"""

from __future__ import annotations

from dataclasses import dataclass

# time per token (s) against the number of tokens processed, rank 8
TOKEN_CURVE: tuple[tuple[int, float], ...] = (
    (50, 315.586), (100, 231.223), (200, 188.6815), (500, 171.5818), (700, 168.355), (1000, 160.6188),
)

# time per token (s) against LoRA rank, 500 tokens
RANK_CURVE: tuple[tuple[int, float], ...] = ((8, 1.715818), (16, 2.49392), (24, 3.36596), (48, 5.6657))
RANK_CURVE_TOKENS = 500

TOKEN_GRID = tuple(t for t, _ in TOKEN_CURVE)
RANK_GRID = tuple(r for r, _ in RANK_CURVE)


@dataclass(frozen=True)
class PriorWork:
    year: int
    scheme: str
    model: str
    parameters: str
    seconds_per_token: float | None     # None where no figure was given
    group: str                          # "sub-billion" or "billion+"


PRIOR_WORK: tuple[PriorWork, ...] = (
    PriorWork(2022, "THE-X", "Bert-tiny", "<14.5M", None, "sub-billion"),
    PriorWork(2022, "Iron", "Bert-Large", "340M", 6000.0, "sub-billion"),
    PriorWork(2023, "BumbleBee", "GPT2-Base", "117M", 204.6, "sub-billion"),
    PriorWork(2023, "CipherGPT", "GPT2-Base", "117M", 1500.0, "sub-billion"),
    PriorWork(2023, "PUMA", "GPT2-Base", "117M", 15.5, "sub-billion"),
    PriorWork(2023, "BumbleBee", "LLaMA-7B", "7B", 832.2, "billion+"),
    PriorWork(2023, "PUMA", "LLaMA-7B", "7B", 200.0, "billion+"),
    PriorWork(2024, "Ours", "ChatGLM2", "6B", 1.61, "billion+"),
)


def amortization_ratio(curve) -> float:
    """Time per token at the smallest batch divided by time per token at the largest."""
    pts = sorted(curve)
    return pts[0][1] / pts[-1][1]
