"""Bidirectional flow hashing and per-flow slot management.

Both directions of a connection map to one slot: the 4-tuple is put into a
canonical order (larger IP first, ports breaking ties) and CRC-32 of the
12-byte canonical key, masked to log2(N) bits, picks the slot.

Two storage modes:
 - software: hash-chaining with stored keys, so a packet never lands in the
   wrong flow's state; optional max-flows cap evicting the coldest flow.
 - hardware_emu: one slot per index and no stored keys, like a register
   array; collisions are caught (best effort) by the engine's sanity check,
   and a plain SYN reinitializes whatever lives at its index.

The accounting query prices each flow against the data-plane register
census: 12 bytes for detection-phase state, 65 for full diagnosis state.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Optional

from flowlens.metrics_engine import (
    PHASE2_PAYLOAD_BYTES,
    RTTVAR_REGISTER_BYTES,
    ConnectionEngine,
)
from flowlens.packet_model import PacketRecord
from flowlens.two_phase import PHASE1_PAYLOAD_BYTES, Phase1State, PromotionRecord

_KEY_STRUCT = struct.Struct(">IIHH")


@dataclass(frozen=True, slots=True)
class CanonicalKey:
    """Direction-independent identity of a connection (larger IP first)."""

    ip_a: int
    ip_b: int
    port_a: int
    port_b: int

    def packed(self) -> bytes:
        return _KEY_STRUCT.pack(self.ip_a, self.ip_b, self.port_a, self.port_b)

    def endpoints(self):
        return ((self.ip_a, self.port_a), (self.ip_b, self.port_b))


def canonicalize(src_ip: int, dst_ip: int, src_port: int, dst_port: int):
    """Canonical key plus which hash-order this packet used.

    forward: the packet already reads (larger, smaller); reverse: flipped.
    Equal IPs fall back to the same rule on ports.
    """
    if src_ip > dst_ip or (src_ip == dst_ip and src_port >= dst_port):
        return CanonicalKey(src_ip, dst_ip, src_port, dst_port), "forward"
    return CanonicalKey(dst_ip, src_ip, dst_port, src_port), "reverse"


def hash_index(key: CanonicalKey, table_size: int) -> int:
    """CRC-32 of the canonical 12-byte key masked to log2(table_size) bits."""
    if table_size < 2 or table_size & (table_size - 1):
        raise ValueError(f"table_size must be a power of two >= 2, got {table_size}")
    return zlib.crc32(key.packed()) & (table_size - 1)


class FlowEntry:
    """Per-flow payload managed through a slot: detection state, the full
    engine once promoted (or from the start in single-phase mode), cached
    handshake options, and the promotion record."""

    __slots__ = ("phase1", "engine", "promotion", "cached_options", "closed_at", "update_time")

    def __init__(self):
        self.phase1: Optional[Phase1State] = None
        self.engine: Optional[ConnectionEngine] = None
        self.promotion: Optional[PromotionRecord] = None
        self.cached_options = {}  # endpoint -> TcpOptions seen in SYN/SYN-ACK
        self.closed_at: Optional[int] = None
        self.update_time = 0

    def payload_bytes(self) -> int:
        """Data-plane register cost of this flow (census bytes, not Python)."""
        total = 0
        if self.phase1 is not None:
            total += PHASE1_PAYLOAD_BYTES
        if self.engine is not None:
            total += PHASE2_PAYLOAD_BYTES
            cfg = self.engine.cfg
            if cfg.hardware_mode and cfg.rttvar_enabled:
                total += RTTVAR_REGISTER_BYTES
        return total

    def releasable(self, now: int) -> bool:
        if self.closed_at is None:
            return False
        rto = 200_000_000.0
        if self.engine is not None and self.engine.state.rto:
            rto = self.engine.state.rto
        return now >= self.closed_at + 2 * rto


class FlowSlot:
    __slots__ = ("index", "stored_key", "entry", "fresh")

    def __init__(self, index: int, stored_key: Optional[CanonicalKey], entry: FlowEntry):
        self.index = index
        self.stored_key = stored_key  # software mode only
        self.entry = entry
        self.fresh = True  # cleared by the caller after initialization

    @property
    def sanity_ok(self) -> bool:
        if self.entry.engine is not None:
            return self.entry.engine.state.sanity_ok
        return True


class FlowTable:
    """Maps packets to flow slots; owns eviction, release, and accounting."""

    def __init__(self, size: int = 1 << 18, mode: str = "software", max_flows: Optional[int] = None):
        if mode not in ("software", "hardware_emu"):
            raise ValueError(f"unknown flow table mode {mode!r}")
        if size < 2 or size & (size - 1):
            raise ValueError(f"table size must be a power of two >= 2, got {size}")
        self.size = size
        self.mode = mode
        self.max_flows = max_flows
        self.buckets: dict = {}       # software: index -> list[FlowSlot]
        self.slots: dict = {}         # hardware: index -> FlowSlot
        self.flow_count = 0
        self.evictions = 0
        self.released = 0
        self.collisions_detected = 0
        self.reinits = 0              # hardware: SYN stomped an occupied slot

    def lookup_or_insert(self, key: CanonicalKey, pkt: PacketRecord) -> FlowSlot:
        idx = hash_index(key, self.size)
        if self.mode == "hardware_emu":
            return self._lookup_hw(idx, pkt)
        return self._lookup_sw(idx, key, pkt)

    def _lookup_hw(self, idx: int, pkt: PacketRecord) -> FlowSlot:
        slot = self.slots.get(idx)
        if slot is None:
            slot = FlowSlot(idx, None, FlowEntry())
            self.slots[idx] = slot
            self.flow_count += 1
            return slot
        if pkt.syn and not pkt.ack_set:
            # the init path runs on every first-packet SYN; without stored keys
            # it cannot tell a new colliding flow from a SYN retransmission
            slot.entry = FlowEntry()
            slot.fresh = True
            self.reinits += 1
        return slot

    def _lookup_sw(self, idx: int, key: CanonicalKey, pkt: PacketRecord) -> FlowSlot:
        chain = self.buckets.get(idx)
        if chain is None:
            chain = []
            self.buckets[idx] = chain
        else:
            now = pkt.timestamp
            for i, slot in enumerate(chain):
                if slot.stored_key == key:
                    return slot
                if slot.entry.releasable(now):
                    chain.pop(i)
                    self.flow_count -= 1
                    self.released += 1
                    break
        if self.max_flows is not None and self.flow_count >= self.max_flows:
            self._evict_coldest()
        if chain:
            self.collisions_detected += 1
        slot = FlowSlot(idx, key, FlowEntry())
        chain.append(slot)
        self.flow_count += 1
        return slot

    def _evict_coldest(self) -> None:
        coldest = None
        coldest_idx = None
        for idx, chain in self.buckets.items():
            for slot in chain:
                if coldest is None or slot.entry.update_time < coldest.entry.update_time:
                    coldest = slot
                    coldest_idx = idx
        if coldest is None:
            return
        self.buckets[coldest_idx].remove(coldest)
        if not self.buckets[coldest_idx]:
            del self.buckets[coldest_idx]
        self.flow_count -= 1
        self.evictions += 1

    def __iter__(self):
        if self.mode == "hardware_emu":
            yield from self.slots.values()
        else:
            for chain in self.buckets.values():
                yield from chain

    def accounting(self) -> dict:
        phase1_bytes = 0
        phase2_bytes = 0
        for slot in self:
            e = slot.entry
            if e.phase1 is not None:
                phase1_bytes += PHASE1_PAYLOAD_BYTES
            if e.engine is not None:
                phase2_bytes += PHASE2_PAYLOAD_BYTES
                cfg = e.engine.cfg
                if cfg.hardware_mode and cfg.rttvar_enabled:
                    phase2_bytes += RTTVAR_REGISTER_BYTES
        return {
            "flows_tracked": self.flow_count,
            "phase1_bytes": phase1_bytes,
            "phase2_bytes": phase2_bytes,
            "evictions": self.evictions,
            "released": self.released,
            "collisions_detected": self.collisions_detected,
        }


def expected_collision_probability(flows: int, table_size: int) -> float:
    """Closed-form chance that a given flow shares its index with any of the
    other flows-1 flows, assuming uniform hashing: 1 - (1 - 1/N)^(k-1)."""
    return 1.0 - (1.0 - 1.0 / table_size) ** (flows - 1)
