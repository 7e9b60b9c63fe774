"""Per-flow streaming TCP state machine.

One `ConnectionEngine` per connection consumes that connection's packets in
capture order and maintains a `FlowState`: counters, flight size, an inferred
lower-bound congestion window, receive-window tracking, duplicate-ACK state,
Karn-style RTT statistics, application reaction times, and loss bookkeeping
(flight before/after each recovery).

The congestion-window estimate is self-adjusting and variant-agnostic:
 - a new segment pushing flight size above the estimate raises it,
 - a fast retransmit applies one multiplicative decrease per recovery,
 - a timeout-recovered loss resets it to the initial window.
In a loss-free stream it therefore equals the running maximum of flight size.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from flowlens.packet_model import PacketRecord, effective_rwnd
from flowlens.seqspace import seq_add, seq_diff, seq_geq, seq_gt, seq_leq, seq_lt
from flowlens.two_phase import infer_wscale

# Karn / RFC 6298 smoothing constants.
ALPHA = 0.125
BETA = 0.25

DUP_ACK_RETX_THRESHOLD = 3

# Register census for the data-plane cost model: what a per-flow slot costs in
# full-diagnosis mode under the default constraint set (single outstanding RTT
# tuple, RTT-variance stage off, raw window and scale stored separately).
# Widths in bytes; the accounting query sums this census, not Python object
# sizes. With the RTT queue capped at one tuple an ACK can free at most one
# sample, so the delayed-ACK average needs no register here.
PHASE2_REGISTER_CENSUS = (
    ("sender_ip", 4),
    ("highest_sent_seq", 4),
    ("highest_acked", 4),
    ("inferred_cwnd", 4),
    ("recovery_end_seq", 4),
    ("srtt", 4),
    ("rtt_queue_seq_end", 4),
    ("rtt_queue_sent_at", 4),
    ("last_new_ack_time", 4),
    ("bytes_sent", 4),
    ("pkts_sent", 4),
    ("retx_total", 4),
    ("reaction_mean", 4),
    ("mss", 2),
    ("last_raw_rwnd", 2),
    ("retx_timeout", 2),
    ("reaction_count", 2),
    ("sender_port", 2),
    ("wscale", 1),
    ("dup_ack_count", 1),
    ("flags", 1),
)
PHASE2_PAYLOAD_BYTES = sum(w for _, w in PHASE2_REGISTER_CENSUS)  # 65
RTTVAR_REGISTER_BYTES = 4  # enabling the optional variance stage adds this

# Midstream sender election: majority-of-payload-bytes, re-evaluated until
# this many data packets have been seen, then frozen.
SENDER_ELECTION_PACKETS = 10


@dataclass
class EngineConfig:
    """Tunables of the state machine.

    c_decrease and iw_segments parameterize the window-estimate adjustment at
    losses; they are config inputs, not inferred from traffic. hardware_mode
    emulates the data-plane constraint set: RTT queue capacity 1, no RTT
    variance (rto = 2*srtt) unless rttvar_enabled is forced back on, and
    out-of-window data packets latch the sanity flag instead of updating.
    """

    c_decrease: float = 0.5
    iw_segments: int = 10
    rto_min_ns: int = 200_000_000
    default_mss: int = 1460
    hardware_mode: bool = False
    rttvar_enabled: bool = None  # default: on in software, off in hardware
    round_history: int = 8

    def __post_init__(self):
        if self.rttvar_enabled is None:
            self.rttvar_enabled = not self.hardware_mode


class FlowState:
    """Register block for one connection (the diagnosed direction's sender)."""

    __slots__ = (
        "sender", "sender_frozen", "election_data_pkts", "endpoint_bytes",
        "syn_options", "saw_synack", "mss", "mss_source", "wscale", "wscale_source",
        "pkts_sent", "bytes_sent", "pkts_acked", "acks_received", "receiver_bytes",
        "highest_sent_seq", "highest_acked", "inferred_cwnd",
        "last_raw_rwnd", "last_effective_rwnd", "max_effective_rwnd",
        "dup_ack_count", "in_fast_recovery", "recovery_end_seq",
        "retx_total", "retx_fast", "retx_timeout", "stale_acks",
        "srtt", "rttvar", "rto", "rtt_sample_count", "min_rtt", "rtt_queue",
        "last_new_ack_time", "awaiting_reaction", "reaction_mean", "reaction_count",
        "dequeued_mean", "dequeued_count", "recovery_dirty",
        "round_end_seq", "round_max_flight", "round_flights", "rounds_completed",
        "pending_loss", "loss_events", "sub_mss_total",
        "fin_from_sender", "fin_from_receiver", "rst_seen",
        "sanity_ok", "init_time", "update_time", "promoted_at",
    )

    def __init__(self, init_time: int, round_history: int = 8):
        self.sender = None              # (ip, port) of the diagnosed sender
        self.sender_frozen = False
        self.election_data_pkts = 0
        self.endpoint_bytes = {}        # payload bytes per endpoint, pre-freeze
        self.syn_options = {}           # endpoint -> TcpOptions from SYN/SYN-ACK
        self.saw_synack = False
        self.mss = 0                    # 0 = unknown
        self.mss_source = "none"        # none | cached | midstream
        self.wscale = 0
        self.wscale_source = "none"     # none | cached | inferred
        self.pkts_sent = 0              # sender data packets
        self.bytes_sent = 0
        self.pkts_acked = 0             # receiver packets that advanced the cumulative ACK
        self.acks_received = 0
        self.receiver_bytes = 0
        self.highest_sent_seq = None
        self.highest_acked = None
        self.inferred_cwnd = 0
        self.last_raw_rwnd = None
        self.last_effective_rwnd = None
        self.max_effective_rwnd = 0
        self.dup_ack_count = 0
        self.in_fast_recovery = False
        self.recovery_end_seq = None
        self.retx_total = 0
        self.retx_fast = 0
        self.retx_timeout = 0
        self.stale_acks = 0
        self.srtt = 0.0                 # ns; 0 = no samples yet
        self.rttvar = 0.0
        self.rto = 0.0
        self.rtt_sample_count = 0
        self.min_rtt = None
        self.rtt_queue = deque()        # (seq_end, sent_at_ns), seq_end strictly increasing
        self.last_new_ack_time = None
        self.awaiting_reaction = False
        self.reaction_mean = 0.0
        self.reaction_count = 0
        self.dequeued_mean = 0.0
        self.dequeued_count = 0
        self.recovery_dirty = False     # a retransmission happened since the last new ACK
        self.round_end_seq = None       # current RTT round completes when acked past here
        self.round_max_flight = 0
        self.round_flights = deque(maxlen=round_history)
        self.rounds_completed = 0
        self.pending_loss = None        # dict(time, kind, f1, f2, ...)
        self.loss_events = []           # completed: dict(time, kind, f1, f2, completed_at)
        self.sub_mss_total = 0
        self.fin_from_sender = False
        self.fin_from_receiver = False
        self.rst_seen = False
        self.sanity_ok = True
        self.init_time = init_time
        self.update_time = init_time
        self.promoted_at = None

    @property
    def flight_size(self):
        """Outstanding bytes, or None until both stream directions are seeded."""
        if self.highest_sent_seq is None or self.highest_acked is None:
            return None
        d = seq_diff(self.highest_sent_seq, self.highest_acked)
        return d if d > 0 else 0

    def closed(self) -> bool:
        return self.rst_seen or (self.fin_from_sender and self.fin_from_receiver)

    def snapshot(self) -> dict:
        fl = self.flight_size
        return {
            "sender_ip": self.sender[0] if self.sender else None,
            "sender_port": self.sender[1] if self.sender else None,
            "pkts_sent": self.pkts_sent,
            "bytes_sent": self.bytes_sent,
            "pkts_acked": self.pkts_acked,
            "acks_received": self.acks_received,
            "flight_size": fl,
            "inferred_cwnd": self.inferred_cwnd,
            "mss": self.mss or None,
            "mss_source": self.mss_source,
            "wscale": self.wscale,
            "wscale_source": self.wscale_source,
            "last_raw_rwnd": self.last_raw_rwnd,
            "last_effective_rwnd": self.last_effective_rwnd,
            "dup_ack_count": self.dup_ack_count,
            "retx_total": self.retx_total,
            "retx_fast": self.retx_fast,
            "retx_timeout": self.retx_timeout,
            "stale_acks": self.stale_acks,
            "srtt_ns": self.srtt or None,
            "rttvar_ns": self.rttvar if self.rtt_sample_count else None,
            "rto_ns": self.rto or None,
            "rtt_samples": self.rtt_sample_count,
            "min_rtt_ns": self.min_rtt,
            "reaction_mean_ns": self.reaction_mean if self.reaction_count else None,
            "reaction_count": self.reaction_count,
            "dequeued_per_ack": self.dequeued_mean if self.dequeued_count else None,
            "sub_mss_segments": self.sub_mss_total,
            "loss_events": len(self.loss_events),
            "sanity_ok": self.sanity_ok,
        }


class ConnectionEngine:
    """Applies one flow's packets to its FlowState (single writer per flow).

    `feed` returns the list of update events applied, as (kind, value) tuples,
    for logging and tests. Event kinds: options, new_segment, sub_mss,
    cwnd_raise, rtt_enqueue, reaction, loss_f1, retx_fast, retx_timeout,
    retx_recovery, loss_complete, new_ack, dup_ack, stale_ack, rtt_sample,
    dequeued, round_complete, recovery_exit, sanity_fail, sender_flip.
    """

    def __init__(self, config: EngineConfig, init_time: int):
        self.cfg = config
        self.state = FlowState(init_time, config.round_history)

    # -- sender election --------------------------------------------------------

    def _elect_sender(self, pkt: PacketRecord, events: list) -> None:
        st = self.state
        src = (pkt.src_ip, pkt.src_port)
        dst = (pkt.dst_ip, pkt.dst_port)
        if pkt.syn and not pkt.ack_set:
            # handshake start: the peer answering this SYN is the sender
            st.syn_options[src] = pkt.options
            if not st.sender_frozen:
                st.sender = dst
            return
        if pkt.syn and pkt.ack_set:
            st.syn_options[src] = pkt.options
            if not st.saw_synack:
                st.sender = src
                st.sender_frozen = True
                st.saw_synack = True
                # SYN consumes one sequence number; nothing outstanding yet
                st.highest_sent_seq = seq_add(pkt.seq, 1)
                st.highest_acked = st.highest_sent_seq
                self._adopt_handshake_options()
                events.append(("options", (st.mss, st.wscale)))
            return
        if st.sender_frozen:
            return
        # midstream: majority of payload bytes wins until 10 data packets seen
        if pkt.payload_len > 0:
            st.endpoint_bytes[src] = st.endpoint_bytes.get(src, 0) + pkt.payload_len
            st.election_data_pkts += 1
            if st.sender is None:
                st.sender = src
                self._enter_midstream_mode()
            else:
                leader = max(st.endpoint_bytes.items(), key=lambda kv: kv[1])[0]
                if leader != st.sender:
                    self._reset_for_sender_flip(leader, pkt.timestamp)
                    events.append(("sender_flip", leader))
            if st.election_data_pkts >= SENDER_ELECTION_PACKETS:
                st.sender_frozen = True
        elif st.sender is None and pkt.ack_set:
            # nothing but ACKs so far: assume they flow receiver -> sender
            st.sender = dst
            self._enter_midstream_mode()

    def _adopt_handshake_options(self) -> None:
        """Constants come from the receiver's announced options: the receiver's
        MSS caps the sender's segments, and its wscale applies to the windows
        it advertises (active only if both sides offered scaling)."""
        st = self.state
        recv_opts = sender_opts = None
        for ep, opts in st.syn_options.items():
            if ep == st.sender:
                sender_opts = opts
            else:
                recv_opts = opts
        if recv_opts is None:
            return
        if recv_opts.mss is not None:
            st.mss = recv_opts.mss
            st.mss_source = "cached"
        if recv_opts.wscale is not None and sender_opts is not None and sender_opts.wscale is not None:
            st.wscale = recv_opts.wscale
            st.wscale_source = "cached"

    def _reset_for_sender_flip(self, new_sender, now: int) -> None:
        old = self.state
        st = FlowState(now, self.cfg.round_history)
        st.sender = new_sender
        st.endpoint_bytes = old.endpoint_bytes
        st.syn_options = old.syn_options
        st.election_data_pkts = old.election_data_pkts
        self.state = st
        self._enter_midstream_mode()

    def _enter_midstream_mode(self) -> None:
        st = self.state
        if st.mss_source == "none":
            st.mss_source = "midstream"
        if st.wscale_source == "none":
            st.wscale_source = "inferred"

    def seed_midstream(self, promoted_at: int) -> None:
        """Start tracking mid-transfer: options were not cached, so MSS becomes
        a running maximum of observed payloads and wscale a monotone lower bound."""
        self.state.promoted_at = promoted_at
        self._enter_midstream_mode()

    # -- main dispatch ----------------------------------------------------------

    def feed(self, pkt: PacketRecord) -> list:
        events = []
        self.state.update_time = pkt.timestamp
        if pkt.syn or not self.state.sender_frozen:
            self._elect_sender(pkt, events)
        st = self.state  # election may have replaced the state object
        if pkt.rst:
            st.rst_seen = True
        if st.sender is None:
            return events
        src = (pkt.src_ip, pkt.src_port)
        dst = (pkt.dst_ip, pkt.dst_port)
        if src == st.sender:
            from_sender = True
        elif dst == st.sender:
            from_sender = False
        else:
            # neither endpoint matches: an undetected collision polluting this slot
            if self.cfg.hardware_mode:
                st.sanity_ok = False
                events.append(("sanity_fail", "unknown_endpoint"))
                return events
            from_sender = pkt.payload_len > 0  # software mode is best-effort here
        self.process_packet(pkt, from_sender, events)
        return events

    def process_packet(self, pkt: PacketRecord, from_sender: bool, events: list) -> None:
        st = self.state
        if from_sender:
            if pkt.fin:
                st.fin_from_sender = True
            if pkt.syn:
                return  # handshake handled during election
            if pkt.payload_len > 0:
                if st.highest_sent_seq is None:
                    st.highest_sent_seq = pkt.seq  # midstream seed
                if self.cfg.hardware_mode and not self._sanity_check(pkt, events):
                    return
                if seq_geq(pkt.seq, st.highest_sent_seq):
                    self.on_new_segment(pkt, events)
                else:
                    self.on_retransmission(pkt, events)
            # pure ACKs from the sender side update counters only
        else:
            if pkt.fin:
                st.fin_from_receiver = True
            if pkt.payload_len > 0:
                st.receiver_bytes += pkt.payload_len
            if pkt.ack_set:
                self.on_ack(pkt, events)
            elif pkt.syn:
                # a plain SYN's window field is the receiver's first advertisement
                self._update_rwnd(pkt, pkt.raw_window)

    # -- sanity check (hardware emulation) ---------------------------------------

    def _sanity_check(self, pkt: PacketRecord, events: list) -> bool:
        """Does a data packet's sequence number fall within the acceptable
        window? Out-of-window packets update nothing and latch the flag."""
        st = self.state
        if st.highest_acked is None:
            return True
        max_window = max(st.max_effective_rwnd, st.inferred_cwnd)
        if max_window <= 0:
            return True
        lo = (st.highest_acked - max_window) & 0xFFFFFFFF
        hi = seq_add(st.highest_sent_seq, max_window)
        ok = seq_geq(pkt.seq, lo) and seq_leq(pkt.seq, hi)
        if not ok:
            st.sanity_ok = False
            events.append(("sanity_fail", pkt.seq))
        return ok

    # -- outgoing data ------------------------------------------------------------

    def on_new_segment(self, pkt: PacketRecord, events: list) -> None:
        st = self.state
        payload = pkt.payload_len
        st.pkts_sent += 1
        st.bytes_sent += payload
        events.append(("new_segment", payload))
        if st.mss_source == "midstream" and payload > st.mss:
            st.mss = payload  # running maximum; converges at the first full segment
        if st.mss and payload < st.mss:
            st.sub_mss_total += 1
            events.append(("sub_mss", payload))
        end = seq_add(pkt.seq, payload)
        st.highest_sent_seq = end
        flight = st.flight_size
        if flight is not None:
            if st.round_end_seq is None:
                st.round_end_seq = end
                st.round_max_flight = flight
            elif flight > st.round_max_flight:
                st.round_max_flight = flight
            if flight > st.inferred_cwnd:
                st.inferred_cwnd = flight
                events.append(("cwnd_raise", flight))
        # RTT sampling: software keeps the whole queue, hardware one tuple
        if not self.cfg.hardware_mode or not st.rtt_queue:
            st.rtt_queue.append((end, pkt.timestamp))
        if st.awaiting_reaction:
            st.awaiting_reaction = False
            if st.last_new_ack_time is not None:
                dt = pkt.timestamp - st.last_new_ack_time
                if dt >= 0:
                    st.reaction_count += 1
                    st.reaction_mean += (dt - st.reaction_mean) / st.reaction_count
                    events.append(("reaction", dt))

    def on_retransmission(self, pkt: PacketRecord, events: list) -> None:
        st = self.state
        st.retx_total += 1
        st.recovery_dirty = True
        seg_end = seq_add(pkt.seq, pkt.payload_len)
        # Karn's rule: a retransmitted segment cannot produce an RTT measurement
        if st.rtt_queue:
            kept = [e for e in st.rtt_queue if not (seq_gt(e[0], pkt.seq) and seq_leq(e[0], seg_end))]
            if len(kept) != len(st.rtt_queue):
                st.rtt_queue = deque(kept)
        if st.in_fast_recovery:
            # another hole inside an ongoing recovery: the decrease was already
            # applied at the first loss of this recovery
            st.retx_fast += 1
            events.append(("retx_recovery", pkt.seq))
            return
        self._snapshot_f1(pkt.timestamp, events)
        if st.dup_ack_count >= DUP_ACK_RETX_THRESHOLD:
            st.retx_fast += 1
            st.inferred_cwnd = int(st.inferred_cwnd * self.cfg.c_decrease)
            st.in_fast_recovery = True
            st.recovery_end_seq = st.highest_sent_seq
            st.pending_loss["kind"] = "fast_retransmit"
            events.append(("retx_fast", st.inferred_cwnd))
        else:
            st.retx_timeout += 1
            mss = st.mss if st.mss else self.cfg.default_mss
            st.inferred_cwnd = self.cfg.iw_segments * mss
            st.pending_loss["kind"] = "timeout"
            # a timeout's recovery completes once the pre-loss frontier is acked
            st.pending_loss["await_exit"] = st.highest_sent_seq
            events.append(("retx_timeout", st.inferred_cwnd))

    def _snapshot_f1(self, now: int, events: list) -> None:
        """Flight size of the most recent pre-loss round. A loss arriving while
        a previous event still awaits its post-recovery flight discards it."""
        st = self.state
        f1 = st.round_flights[-1] if st.round_flights else (st.flight_size or 0)
        st.pending_loss = {
            "time": now, "kind": None, "f1": f1, "f2": None,
            "awaiting_round": False, "await_exit": None,
        }
        events.append(("loss_f1", f1))

    # -- incoming ACKs --------------------------------------------------------------

    def on_ack(self, pkt: PacketRecord, events: list) -> None:
        st = self.state
        st.acks_received += 1
        prev_raw = st.last_raw_rwnd
        if st.highest_acked is None:
            # midstream seed: no new/duplicate semantics on the first ACK
            st.highest_acked = pkt.ack
            if st.highest_sent_seq is None:
                st.highest_sent_seq = pkt.ack
        elif seq_gt(pkt.ack, st.highest_acked):
            self._on_new_ack(pkt, events)
        elif (
            pkt.ack == st.highest_acked
            and pkt.payload_len == 0
            and prev_raw is not None
            and pkt.raw_window == prev_raw
            and not (pkt.syn or pkt.fin or pkt.rst)
            and (st.flight_size or 0) > 0
        ):
            st.dup_ack_count += 1
            events.append(("dup_ack", st.dup_ack_count))
        elif seq_lt(pkt.ack, st.highest_acked):
            st.stale_acks += 1
            events.append(("stale_ack", pkt.ack))
        eff = pkt.raw_window if pkt.syn else effective_rwnd(pkt.raw_window, st.wscale)
        self._update_rwnd(pkt, eff)

    def _update_rwnd(self, pkt: PacketRecord, eff: int) -> None:
        st = self.state
        if st.wscale_source == "inferred" and not pkt.syn:
            flight = st.flight_size
            if flight and pkt.raw_window > 0:
                bound = infer_wscale(flight, pkt.raw_window)
                if bound is not None and bound > st.wscale:
                    st.wscale = bound
                eff = pkt.raw_window << st.wscale
        st.last_raw_rwnd = pkt.raw_window
        st.last_effective_rwnd = eff
        if eff > st.max_effective_rwnd:
            st.max_effective_rwnd = eff

    def _on_new_ack(self, pkt: PacketRecord, events: list) -> None:
        st = self.state
        ack = pkt.ack
        st.pkts_acked += 1
        st.highest_acked = ack
        if seq_gt(ack, st.highest_sent_seq):
            st.highest_sent_seq = ack  # the ACKed data predates our view
        st.dup_ack_count = 0
        st.last_new_ack_time = pkt.timestamp
        st.awaiting_reaction = True
        events.append(("new_ack", ack))

        if st.in_fast_recovery and seq_geq(ack, st.recovery_end_seq):
            st.in_fast_recovery = False
            events.append(("recovery_exit", ack))
            self._arm_f2_round()
        pl = st.pending_loss
        if pl is not None and pl.get("await_exit") is not None and seq_geq(ack, pl["await_exit"]):
            pl["await_exit"] = None
            self._arm_f2_round()

        # RTT tuples freed by this ACK
        q = st.rtt_queue
        dequeued = 0
        last = None
        while q and seq_leq(q[0][0], ack):
            last = q.popleft()
            dequeued += 1
        if dequeued:
            if not st.recovery_dirty:
                # >1 tuple freed by one ACK indicates delayed acknowledgments;
                # recovery ACKs are excluded because they free the whole block
                # behind a retransmitted hole at once
                st.dequeued_count += 1
                st.dequeued_mean += (dequeued - st.dequeued_mean) / st.dequeued_count
                events.append(("dequeued", dequeued))
            m = pkt.timestamp - last[1]
            if m > 0:
                self.karn_update(m, events)
        st.recovery_dirty = False

        # RTT-round accounting drives slow-start detection and f2
        if st.round_end_seq is not None and seq_geq(ack, st.round_end_seq):
            self._complete_round(events)

    def _arm_f2_round(self) -> None:
        """The first full round after recovery exit supplies f2."""
        st = self.state
        if st.pending_loss is not None and st.pending_loss["f2"] is None:
            st.pending_loss["awaiting_round"] = True
        flight = st.flight_size or 0
        if flight > 0:
            st.round_end_seq = st.highest_sent_seq
            st.round_max_flight = flight
        else:
            st.round_end_seq = None  # idle: the next new segment opens the round
            st.round_max_flight = 0

    def _complete_round(self, events: list) -> None:
        st = self.state
        st.rounds_completed += 1
        st.round_flights.append(st.round_max_flight)
        events.append(("round_complete", st.round_max_flight))
        pl = st.pending_loss
        if pl is not None and pl.get("awaiting_round"):
            pl["f2"] = st.round_max_flight
            pl["completed_at"] = st.update_time
            pl["awaiting_round"] = False
            st.loss_events.append(pl)
            st.pending_loss = None
            events.append(("loss_complete", (pl["f1"], pl["f2"])))
        flight = st.flight_size or 0
        if flight > 0:
            st.round_end_seq = st.highest_sent_seq
            st.round_max_flight = flight
        else:
            st.round_end_seq = None
            st.round_max_flight = 0

    # -- latency estimation -----------------------------------------------------------

    def karn_update(self, measurement: float, events: list) -> None:
        """Fold one RTT measurement (ns, from a never-retransmitted segment)
        into srtt/rttvar/rto."""
        st = self.state
        if st.rtt_sample_count == 0:
            st.srtt = float(measurement)
            st.rttvar = measurement / 2.0
        else:
            if self.cfg.rttvar_enabled:
                st.rttvar = (1.0 - BETA) * st.rttvar + BETA * abs(st.srtt - measurement)
            st.srtt = (1.0 - ALPHA) * st.srtt + ALPHA * measurement
        if self.cfg.rttvar_enabled:
            st.rto = max(st.srtt + 4.0 * st.rttvar, float(self.cfg.rto_min_ns))
        else:
            st.rto = 2.0 * st.srtt
        st.rtt_sample_count += 1
        if st.min_rtt is None or measurement < st.min_rtt:
            st.min_rtt = measurement
        events.append(("rtt_sample", (measurement, st.srtt, st.rto)))
