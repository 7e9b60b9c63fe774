"""Packet parsing: pcap ingestion, TCP option TLVs, canonical JSON events.

Everything downstream works on `PacketRecord`, a normalized view of one
TCP/IPv4 packet with timestamps in nanoseconds. Records come from either a
pcap file (`parse_pcap_stream`) or the simulator's newline-delimited JSON
event format (`read_events` / `event_to_json`), and the two representations
round-trip exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, Optional, Tuple

# TCP header flag bits (low byte of the offset/flags word).
FLAG_FIN = 0x01
FLAG_SYN = 0x02
FLAG_RST = 0x04
FLAG_PSH = 0x08
FLAG_ACK = 0x10

_FLAG_CHARS = (("S", FLAG_SYN), ("A", FLAG_ACK), ("F", FLAG_FIN), ("R", FLAG_RST), ("P", FLAG_PSH))

WSCALE_MAX = 14  # RFC 1323 limit


class IngestError(Exception):
    """Raised when an input stream cannot be parsed at all (bad magic, bad JSON)."""


@dataclass(slots=True)
class TcpOptions:
    """Parsed TCP options. `None` means the option was absent, not zero."""

    mss: Optional[int] = None
    wscale: Optional[int] = None
    sack_permitted: bool = False
    timestamps: Optional[Tuple[int, int]] = None
    sack_blocks: int = 0          # count of SACK blocks seen (not used by heuristics)
    wscale_clamped: bool = False  # wscale > 14 was clamped
    malformed: bool = False       # TLV walk aborted; fields parsed so far retained

    def any_set(self) -> bool:
        return (
            self.mss is not None
            or self.wscale is not None
            or self.sack_permitted
            or self.timestamps is not None
            or self.sack_blocks > 0
        )


_NO_OPTIONS = TcpOptions()


@dataclass(slots=True)
class PacketRecord:
    """One TCP/IPv4 packet as seen at the monitoring point.

    timestamp is nanoseconds since the capture epoch; addresses are 32-bit
    integers; payload_len is TCP payload bytes (headers excluded).
    """

    timestamp: int
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    seq: int
    ack: int
    flags: int
    raw_window: int
    payload_len: int
    options: TcpOptions = field(default_factory=TcpOptions)

    @property
    def syn(self) -> bool:
        return bool(self.flags & FLAG_SYN)

    @property
    def ack_set(self) -> bool:
        return bool(self.flags & FLAG_ACK)

    @property
    def fin(self) -> bool:
        return bool(self.flags & FLAG_FIN)

    @property
    def rst(self) -> bool:
        return bool(self.flags & FLAG_RST)

    @property
    def psh(self) -> bool:
        return bool(self.flags & FLAG_PSH)


def ip_to_str(ip: int) -> str:
    return f"{(ip >> 24) & 0xFF}.{(ip >> 16) & 0xFF}.{(ip >> 8) & 0xFF}.{ip & 0xFF}"


def str_to_ip(s: str) -> int:
    a, b, c, d = s.split(".")
    return (int(a) << 24) | (int(b) << 16) | (int(c) << 8) | int(d)


def flags_to_str(flags: int) -> str:
    out = "".join(ch for ch, bit in _FLAG_CHARS if flags & bit)
    return out if out else "."


def flags_from_str(s: str) -> int:
    flags = 0
    for ch, bit in _FLAG_CHARS:
        if ch in s:
            flags |= bit
    return flags


def effective_rwnd(raw_window: int, scale: int) -> int:
    """Receive window in bytes: the raw 16-bit field shifted by the scale.

    The shift happens here, outside the per-packet register path, mirroring a
    control-plane query over the two stored values.
    """
    if scale < 0:
        scale = 0
    elif scale > WSCALE_MAX:
        scale = WSCALE_MAX
    return raw_window << scale


# ---------------------------------------------------------------------------
# TCP option TLV parsing
# ---------------------------------------------------------------------------

def parse_tcp_options(buf: bytes) -> TcpOptions:
    """Walk the kind/length TLVs of a TCP options region (0-40 bytes).

    Never reads beyond `buf`. A declared length of 0/1 for a non-NOP/EOL kind,
    or a length overrunning the buffer, marks the result malformed and keeps
    whatever was parsed before the bad TLV.
    """
    opts = TcpOptions()
    i = 0
    n = len(buf)
    while i < n:
        kind = buf[i]
        if kind == 0:  # EOL
            break
        if kind == 1:  # NOP
            i += 1
            continue
        if i + 1 >= n:
            opts.malformed = True
            break
        length = buf[i + 1]
        if length < 2 or i + length > n:
            opts.malformed = True
            break
        body = buf[i + 2 : i + length]
        if kind == 2 and length == 4:
            opts.mss = (body[0] << 8) | body[1]
        elif kind == 3 and length == 3:
            ws = body[0]
            if ws > WSCALE_MAX:
                ws = WSCALE_MAX
                opts.wscale_clamped = True
            opts.wscale = ws
        elif kind == 4 and length == 2:
            opts.sack_permitted = True
        elif kind == 5:
            opts.sack_blocks += (length - 2) // 8
        elif kind == 8 and length == 10:
            tsval = int.from_bytes(body[0:4], "big")
            tsecr = int.from_bytes(body[4:8], "big")
            opts.timestamps = (tsval, tsecr)
        # unknown kinds (or known kinds with the wrong length) skipped via length
        i += length
    return opts


# ---------------------------------------------------------------------------
# pcap ingestion
# ---------------------------------------------------------------------------

PCAP_MAGIC_USEC = 0xA1B2C3D4
PCAP_MAGIC_NSEC = 0xA1B23C4D
_DLT_EN10MB = 1

_ETH_HLEN = 14
_ETHERTYPE_IPV4 = 0x0800
_ETHERTYPE_IPV6 = 0x86DD
_IPPROTO_TCP = 6


class PcapReader:
    """Iterates PacketRecords out of a classic pcap byte stream.

    Non-TCP and non-IPv4 packets are skipped and counted in `skipped`.
    A truncated record stops iteration, sets `truncated`, and preserves the
    packets already yielded (`yielded`).
    """

    def __init__(self, stream: BinaryIO):
        self._stream = stream
        header = stream.read(24)
        if len(header) < 24:
            raise IngestError("pcap global header truncated")
        magic_be = struct.unpack(">I", header[:4])[0]
        magic_le = struct.unpack("<I", header[:4])[0]
        if magic_be in (PCAP_MAGIC_USEC, PCAP_MAGIC_NSEC):
            self._endian = ">"
            magic = magic_be
        elif magic_le in (PCAP_MAGIC_USEC, PCAP_MAGIC_NSEC):
            self._endian = "<"
            magic = magic_le
        else:
            raise IngestError(f"not a pcap file (magic {header[:4].hex()})")
        # microsecond magic: frac field is usec; nanosecond magic: already ns
        self._frac_mult = 1_000 if magic == PCAP_MAGIC_USEC else 1
        linktype = struct.unpack(self._endian + "I", header[20:24])[0]
        if linktype != _DLT_EN10MB:
            raise IngestError(f"unsupported pcap link type {linktype} (Ethernet only)")
        self.skipped = 0
        self.truncated = False
        self.yielded = 0

    def __iter__(self) -> Iterator[PacketRecord]:
        rec_hdr = struct.Struct(self._endian + "IIII")
        while True:
            hdr = self._stream.read(16)
            if not hdr:
                return
            if len(hdr) < 16:
                self.truncated = True
                return
            ts_sec, ts_frac, caplen, _origlen = rec_hdr.unpack(hdr)
            data = self._stream.read(caplen)
            if len(data) < caplen:
                self.truncated = True
                return
            ts_ns = ts_sec * 1_000_000_000 + ts_frac * self._frac_mult
            rec = _decode_ethernet_frame(ts_ns, data)
            if rec is None:
                self.skipped += 1
                continue
            self.yielded += 1
            yield rec


def _decode_ethernet_frame(ts_ns: int, data: bytes) -> Optional[PacketRecord]:
    if len(data) < _ETH_HLEN + 20:
        return None
    ethertype = (data[12] << 8) | data[13]
    if ethertype != _ETHERTYPE_IPV4:
        return None  # IPv6, ARP, VLAN, ... all counted as skips
    ip = data[_ETH_HLEN:]
    ver_ihl = ip[0]
    if ver_ihl >> 4 != 4:
        return None
    ihl = (ver_ihl & 0x0F) * 4
    if ihl < 20 or len(ip) < ihl:
        return None
    total_len = (ip[2] << 8) | ip[3]
    proto = ip[9]
    if proto != _IPPROTO_TCP:
        return None
    if total_len > len(ip):
        total_len = len(ip)  # trust capture over a lying header
    src_ip = int.from_bytes(ip[12:16], "big")
    dst_ip = int.from_bytes(ip[16:20], "big")
    tcp = ip[ihl:total_len]
    if len(tcp) < 20:
        return None
    src_port = (tcp[0] << 8) | tcp[1]
    dst_port = (tcp[2] << 8) | tcp[3]
    seq = int.from_bytes(tcp[4:8], "big")
    ack = int.from_bytes(tcp[8:12], "big")
    doff = (tcp[12] >> 4) * 4
    if doff < 20 or doff > len(tcp):
        return None
    flags = tcp[13] & 0x1F
    raw_window = (tcp[14] << 8) | tcp[15]
    payload_len = (total_len - ihl) - doff
    if payload_len < 0:
        payload_len = 0
    options = parse_tcp_options(tcp[20:doff]) if doff > 20 else TcpOptions()
    return PacketRecord(
        timestamp=ts_ns,
        src_ip=src_ip,
        dst_ip=dst_ip,
        src_port=src_port,
        dst_port=dst_port,
        seq=seq,
        ack=ack,
        flags=flags,
        raw_window=raw_window,
        payload_len=payload_len,
        options=options,
    )


def parse_pcap_stream(stream: BinaryIO) -> PcapReader:
    """Open a pcap byte stream; iterate the result for PacketRecords."""
    return PcapReader(stream)


# ---------------------------------------------------------------------------
# pcap export (for interchange with external tools)
# ---------------------------------------------------------------------------

def _ip_header_checksum(hdr: bytes) -> int:
    total = 0
    for i in range(0, len(hdr), 2):
        total += (hdr[i] << 8) | hdr[i + 1]
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return (~total) & 0xFFFF


def _encode_options(opts: TcpOptions) -> bytes:
    out = bytearray()
    if opts.mss is not None:
        out += bytes([2, 4, opts.mss >> 8, opts.mss & 0xFF])
    if opts.wscale is not None:
        out += bytes([3, 3, opts.wscale])
    if opts.sack_permitted:
        out += bytes([4, 2])
    if opts.timestamps is not None:
        out += bytes([8, 10]) + opts.timestamps[0].to_bytes(4, "big") + opts.timestamps[1].to_bytes(4, "big")
    while len(out) % 4:
        out.append(1)  # NOP pad to a 4-byte boundary
    return bytes(out)


def write_pcap(records, stream: BinaryIO) -> int:
    """Write records as an Ethernet pcap (nanosecond magic). Returns count.

    Payload bytes are zero filler of the right length; headers and lengths are
    exact so external tools compute identical per-packet metrics.
    """
    stream.write(struct.pack(">IHHiIII", PCAP_MAGIC_NSEC, 2, 4, 0, 0, 65535, _DLT_EN10MB))
    count = 0
    for rec in records:
        optbytes = _encode_options(rec.options) if rec.options.any_set() else b""
        doff = 20 + len(optbytes)
        tcp = struct.pack(
            ">HHIIBBHHH",
            rec.src_port,
            rec.dst_port,
            rec.seq,
            rec.ack,
            (doff // 4) << 4,
            rec.flags,
            rec.raw_window,
            0,
            0,
        ) + optbytes + b"\x00" * rec.payload_len
        total_len = 20 + len(tcp)
        ip_hdr = bytearray(
            struct.pack(
                ">BBHHHBBH4s4s",
                0x45,
                0,
                total_len,
                count & 0xFFFF,
                0,
                64,
                _IPPROTO_TCP,
                0,
                rec.src_ip.to_bytes(4, "big"),
                rec.dst_ip.to_bytes(4, "big"),
            )
        )
        csum = _ip_header_checksum(bytes(ip_hdr))
        ip_hdr[10:12] = csum.to_bytes(2, "big")
        frame = b"\x02\x00\x00\x00\x00\x01" + b"\x02\x00\x00\x00\x00\x02" + struct.pack(">H", _ETHERTYPE_IPV4) + bytes(ip_hdr) + tcp
        sec, ns = divmod(rec.timestamp, 1_000_000_000)
        stream.write(struct.pack(">IIII", sec, ns, len(frame), len(frame)))
        stream.write(frame)
        count += 1
    return count


# ---------------------------------------------------------------------------
# Canonical event format (newline-delimited JSON)
# ---------------------------------------------------------------------------

def event_dict(rec: PacketRecord) -> dict:
    d = {
        "ts": rec.timestamp,
        "src": ip_to_str(rec.src_ip),
        "dst": ip_to_str(rec.dst_ip),
        "sport": rec.src_port,
        "dport": rec.dst_port,
        "seq": rec.seq,
        "ack": rec.ack,
        "flags": flags_to_str(rec.flags),
        "win": rec.raw_window,
        "len": rec.payload_len,
    }
    o = rec.options
    if o.any_set() or o.malformed:
        od = {}
        if o.mss is not None:
            od["mss"] = o.mss
        if o.wscale is not None:
            od["wscale"] = o.wscale
        if o.sack_permitted:
            od["sack_ok"] = True
        if o.timestamps is not None:
            od["ts"] = [o.timestamps[0], o.timestamps[1]]
        if o.sack_blocks:
            od["sack_blocks"] = o.sack_blocks
        if o.wscale_clamped:
            od["wscale_clamped"] = True
        if o.malformed:
            od["malformed"] = True
        d["opts"] = od
    return d


def event_to_json(rec: PacketRecord) -> str:
    return json.dumps(event_dict(rec), separators=(",", ":"))


def record_from_event(d: dict) -> PacketRecord:
    od = d.get("opts")
    if od:
        ts = od.get("ts")
        options = TcpOptions(
            mss=od.get("mss"),
            wscale=od.get("wscale"),
            sack_permitted=bool(od.get("sack_ok", False)),
            timestamps=(ts[0], ts[1]) if ts is not None else None,
            sack_blocks=od.get("sack_blocks", 0),
            wscale_clamped=bool(od.get("wscale_clamped", False)),
            malformed=bool(od.get("malformed", False)),
        )
    else:
        options = TcpOptions()
    return PacketRecord(
        timestamp=d["ts"],
        src_ip=str_to_ip(d["src"]),
        dst_ip=str_to_ip(d["dst"]),
        src_port=d["sport"],
        dst_port=d["dport"],
        seq=d["seq"],
        ack=d["ack"],
        flags=flags_from_str(d["flags"]),
        raw_window=d["win"],
        payload_len=d["len"],
        options=options,
    )


def read_events(lines) -> Iterator[PacketRecord]:
    """Parse newline-delimited JSON events (any iterable of lines)."""
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            yield record_from_event(json.loads(line))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise IngestError(f"bad event on line {lineno}: {exc}") from exc
