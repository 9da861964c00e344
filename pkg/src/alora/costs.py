"""Operation and byte accounting, plus closed-form first-token predictions.

Counters are incremented at the numeric call sites (projections, attention,
MLP, unembedding) with exact formulas: a matmul of m x k by k x n adds
2*m*n*k. ``predict_first_token`` recomputes the same totals from the
configuration alone, by independent arithmetic, so measured-vs-predicted
comparisons are exact equalities rather than tolerance checks.

Low-rank delta products are intentionally NOT counted: the cost queries
carry no rank, and the separation claims concern the dense transformer
costs, to which adapter-rank work is a negligible, mode-independent side
term.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import TYPE_CHECKING, Iterable, List, Tuple

if TYPE_CHECKING:
    from .model import ModelConfig

from .errors import ContractViolationError

U64_MAX = 2**64 - 1

CSV_HEADER = ("mode,seed,T_cache,T_new,N,first_token_flops,total_flops,"
              "cache_bytes_incremental,wall_ns,predicted_flops,predicted_bytes")

MODE_LORA = "lora"
MODE_ALORA = "alora"


@dataclass
class CostLedger:
    matmul_flops: int = 0
    attention_score_flops: int = 0
    softmax_ops: int = 0
    rows_projected_fresh: int = 0
    rows_reused: int = 0
    cache_bytes_incremental: int = 0
    wall_ns: int = 0
    saturated: bool = False

    _COUNTERS = ("matmul_flops", "attention_score_flops", "softmax_ops",
                 "rows_projected_fresh", "rows_reused",
                 "cache_bytes_incremental", "wall_ns")

    def _add(self, name: str, amount: int) -> None:
        if amount < 0:
            raise ContractViolationError(f"negative cost event for {name}")
        total = getattr(self, name) + amount
        if total > U64_MAX:
            total = U64_MAX
            self.saturated = True
        setattr(self, name, total)

    def add_matmul(self, m: int, k: int, n: int) -> None:
        self._add("matmul_flops", 2 * m * k * n)

    def add_attention(self, flops: int) -> None:
        self._add("attention_score_flops", flops)

    def add_softmax(self, count: int) -> None:
        self._add("softmax_ops", count)

    def merge(self, other: "CostLedger") -> None:
        for name in self._COUNTERS:
            self._add(name, getattr(other, name))
        self.saturated = self.saturated or other.saturated

    def copy(self) -> "CostLedger":
        return CostLedger(**{f.name: getattr(self, f.name) for f in fields(self)})

    @property
    def counted_flops(self) -> int:
        return min(U64_MAX,
                   self.matmul_flops + self.attention_score_flops + self.softmax_ops)

    def __eq__(self, other):
        if not isinstance(other, CostLedger):
            return NotImplemented
        return all(getattr(self, n) == getattr(other, n)
                   for n in self._COUNTERS if n != "wall_ns")


# Event objects for the generic record() entry point.

@dataclass(frozen=True)
class MatmulEvent:
    m: int
    k: int
    n: int


@dataclass(frozen=True)
class AttentionEvent:
    flops: int


@dataclass(frozen=True)
class SoftmaxEvent:
    count: int


@dataclass(frozen=True)
class FreshRowsEvent:
    rows: int


@dataclass(frozen=True)
class ReusedRowsEvent:
    rows: int


@dataclass(frozen=True)
class CacheBytesEvent:
    bytes: int


def record(ledger: CostLedger, event) -> None:
    """Apply one cost event to a ledger."""
    if isinstance(event, MatmulEvent):
        ledger.add_matmul(event.m, event.k, event.n)
    elif isinstance(event, AttentionEvent):
        ledger.add_attention(event.flops)
    elif isinstance(event, SoftmaxEvent):
        ledger.add_softmax(event.count)
    elif isinstance(event, FreshRowsEvent):
        ledger._add("rows_projected_fresh", event.rows)
    elif isinstance(event, ReusedRowsEvent):
        ledger._add("rows_reused", event.rows)
    elif isinstance(event, CacheBytesEvent):
        ledger._add("cache_bytes_incremental", event.bytes)
    else:
        raise ContractViolationError(f"unknown cost event {event!r}")


@dataclass(frozen=True)
class CostQuery:
    t_cache: int
    t_new: int
    n_adapters: int
    mode: str
    config: "ModelConfig"

    def __post_init__(self):
        if self.t_new < 1:
            raise ContractViolationError("t_new must be >= 1")
        if self.n_adapters < 1:
            raise ContractViolationError("n_adapters must be >= 1")
        if self.mode not in (MODE_LORA, MODE_ALORA):
            raise ContractViolationError(f"unknown mode {self.mode!r}")


def predict_first_token(query: CostQuery) -> CostLedger:
    """Exact expected counters through the first generated token.

    The window covers prefilling the fresh input rows plus running the first
    generated token itself through the layers (the "+1" row), whose query
    attends across all cached-plus-new keys. For the classic adapter every
    input position is a fresh row; for the activated adapter only the
    uncached tail is. Logits are evaluated twice inside the window (last
    prefill row and the generated row). Byte counts are the prefill-owned
    rows, i.e. the additional cache the adapter must maintain for its input.
    """
    cfg = query.config
    d = cfg.d_model
    if query.mode == MODE_ALORA:
        fresh_positions = range(query.t_cache, query.t_cache + query.t_new + 1)
        reused = query.t_cache
        owned_prefill_rows = query.t_new
    else:
        fresh_positions = range(0, query.t_cache + query.t_new + 1)
        reused = 0
        owned_prefill_rows = query.t_cache + query.t_new
    matmul = 0
    attention = 0
    softmax = 0
    for p in fresh_positions:
        coverage = p + 1
        matmul += cfg.n_layers * (24 * d * d)          # qkv + w_o + mlp up/down
        attention += cfg.n_layers * 4 * coverage * d   # scores + weighted sums
        softmax += cfg.n_layers * cfg.n_heads * coverage
    matmul += 2 * (2 * d * cfg.vocab_size)             # prefill-final + first-decode logits

    from .cache import row_bytes  # local import to avoid a cycle at module load

    n = query.n_adapters
    ledger = CostLedger()
    ledger.matmul_flops = n * matmul
    ledger.attention_score_flops = n * attention
    ledger.softmax_ops = n * softmax
    ledger.rows_projected_fresh = n * (len(fresh_positions))
    ledger.rows_reused = n * reused
    ledger.cache_bytes_incremental = n * owned_prefill_rows * row_bytes(cfg)
    return ledger


@dataclass(frozen=True)
class SpeedupRow:
    t_cache: int
    t_new: int
    n_adapters: int
    measured_ratio: float
    predicted_ratio: float
    relative_deviation: float


def speedup_report(measurements: Iterable[Tuple[CostQuery, CostLedger]]
                   ) -> Tuple[List[SpeedupRow], List[str]]:
    """Pair classic/activated measurements and compute first-token flop ratios.

    Returns (rows, diagnostics). Measurements with an empty ledger are
    filtered out with a diagnostic. Unpaired keys raise.
    """
    diagnostics: List[str] = []
    groups: dict = {}
    for query, ledger in measurements:
        if ledger.counted_flops == 0:
            diagnostics.append(
                f"filtered zero-length workload: mode={query.mode} "
                f"T_cache={query.t_cache} T_new={query.t_new} N={query.n_adapters}")
            continue
        key = (query.t_cache, query.t_new, query.n_adapters)
        slot = groups.setdefault(key, {})
        if query.mode in slot:
            raise ContractViolationError(
                f"duplicate {query.mode} measurement for {key}")
        slot[query.mode] = (query, ledger)
    rows = []
    for key in sorted(groups):
        slot = groups[key]
        if MODE_LORA not in slot or MODE_ALORA not in slot:
            raise ContractViolationError(
                f"unpaired measurement for T_cache={key[0]} T_new={key[1]} N={key[2]}")
        lora_q, lora_l = slot[MODE_LORA]
        alora_q, alora_l = slot[MODE_ALORA]
        measured = lora_l.counted_flops / alora_l.counted_flops
        predicted = (predict_first_token(lora_q).counted_flops
                     / predict_first_token(alora_q).counted_flops)
        rows.append(SpeedupRow(
            t_cache=key[0], t_new=key[1], n_adapters=key[2],
            measured_ratio=measured, predicted_ratio=predicted,
            relative_deviation=abs(measured - predicted) / predicted))
    return rows, diagnostics
