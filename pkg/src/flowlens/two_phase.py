"""Two-phase monitoring: cheap detection for all flows, full state on demand.

Phase 1 keeps three registers per flow (monitoring start time, bytes sent,
last update time), enough to compute an average rate. Flows whose rate falls
below the badness threshold are promoted to a full phase-2 state machine,
seeding constants either from cached handshake options or by midstream
inference (running-max MSS, lower-bound window scale).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

# Phase-1 register census for the data-plane cost model (bytes).
PHASE1_REGISTER_CENSUS = (
    ("init_time", 4),
    ("bytes_sent", 4),
    ("update_time", 4),
)
PHASE1_PAYLOAD_BYTES = sum(w for _, w in PHASE1_REGISTER_CENSUS)  # 12

# Guards so a threshold alone does not flag every freshly started flow.
DEFAULT_MIN_AGE_NS = 1_000_000_000
DEFAULT_MIN_BYTES_MSS = 10


class Phase1State:
    """Lightweight detection state: exactly three registers."""

    __slots__ = ("init_time", "bytes_sent", "update_time")

    def __init__(self, init_time: int):
        self.init_time = init_time
        self.bytes_sent = 0
        self.update_time = init_time


@dataclass(slots=True)
class PromotionRecord:
    """Why and when a flow was switched to full diagnosis."""

    promoted_at: int
    option_source: str          # "cached" | "midstream"
    trigger: str                # "badness" | "forced"
    rate_bps: Optional[float] = None
    threshold_bps: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "promoted_at": self.promoted_at,
            "option_source": self.option_source,
            "trigger": self.trigger,
            "rate_bps": self.rate_bps,
            "threshold_bps": self.threshold_bps,
        }


def phase1_update(state: Phase1State, payload_len: int, now: int) -> Phase1State:
    """Fold one packet into the detection registers."""
    state.bytes_sent += payload_len
    state.update_time = now
    return state


def average_rate_bps(state: Phase1State) -> Optional[float]:
    elapsed = state.update_time - state.init_time
    if elapsed <= 0:
        return None
    return state.bytes_sent * 8.0 / (elapsed / 1_000_000_000)


def badness(
    state: Phase1State,
    threshold_bps: float,
    now: int,
    min_age_ns: int = DEFAULT_MIN_AGE_NS,
    min_bytes: int = DEFAULT_MIN_BYTES_MSS * 1460,
) -> bool:
    """True iff the flow's average rate marks it troubled.

    Strictly below the threshold, and only once the flow is old and large
    enough that the rate means something.
    """
    if now - state.init_time < min_age_ns:
        return False
    if state.bytes_sent < min_bytes:
        return False
    rate = average_rate_bps(state)
    if rate is None:
        return False
    return rate < threshold_bps


def infer_wscale(flight_size: int, raw_rwnd: int) -> Optional[int]:
    """Lower bound on the window-scale shift from one (flight, raw window)
    observation: the smallest s with raw_rwnd * 2^s >= flight_size.

    Callers fold the running maximum over a flow's packets, which never
    exceeds the true negotiated scale and is monotone non-decreasing.
    Returns None for a zero window or zero flight (sample skipped).
    """
    if raw_rwnd <= 0 or flight_size <= 0:
        return None
    q = -(-flight_size // raw_rwnd)  # ceil division
    bound = (q - 1).bit_length()
    return bound if bound < 14 else 14


def promote(
    phase1: Phase1State,
    engine_config,
    now: int,
    cached_options=None,
    trigger: str = "badness",
    rate_bps: Optional[float] = None,
    threshold_bps: Optional[float] = None,
):
    """Allocate the full phase-2 state machine for a troubled flow.

    cached mode seeds MSS/wscale from the retained handshake options;
    midstream mode leaves them to running-max / lower-bound inference.
    Phase-2 counters start at zero with a promoted_at marker so rates are
    computed over the phase-2 epoch only; the Phase1State stays behind for
    the record. Returns (ConnectionEngine, PromotionRecord).
    """
    from flowlens.metrics_engine import ConnectionEngine  # deferred: two-way dependency

    engine = ConnectionEngine(engine_config, now)
    engine.state.promoted_at = now
    if cached_options is not None and (cached_options.mss is not None or cached_options.wscale is not None):
        source = "cached"
        if cached_options.mss is not None:
            engine.state.mss = cached_options.mss
            engine.state.mss_source = "cached"
        if cached_options.wscale is not None:
            engine.state.wscale = cached_options.wscale
            engine.state.wscale_source = "cached"
    else:
        source = "midstream"
        engine.seed_midstream(now)
    record = PromotionRecord(
        promoted_at=now,
        option_source=source,
        trigger=trigger,
        rate_bps=rate_bps,
        threshold_bps=threshold_bps,
    )
    return engine, record
