"""flowlens: passive TCP performance diagnosis at the network edge.

Reconstructs per-connection sender/network/receiver state from a one-point
packet stream, classifies each connection's bottleneck over time, and ships
a deterministic traffic simulator that generates labeled problem flows for
validating diagnosis accuracy.
"""

__version__ = "0.1.0"

from flowlens.packet_model import PacketRecord, TcpOptions, effective_rwnd
from flowlens.flow_table import CanonicalKey, FlowTable, canonicalize, hash_index
from flowlens.metrics_engine import ConnectionEngine, EngineConfig, FlowState
from flowlens.diagnosis import DiagnosisConfig, Verdict, aggregate_report, classify_window
from flowlens.two_phase import Phase1State, badness, infer_wscale
from flowlens.traffic_synth import ScenarioConfig, simulate

__all__ = [
    "PacketRecord",
    "TcpOptions",
    "effective_rwnd",
    "CanonicalKey",
    "FlowTable",
    "canonicalize",
    "hash_index",
    "ConnectionEngine",
    "EngineConfig",
    "FlowState",
    "DiagnosisConfig",
    "Verdict",
    "classify_window",
    "aggregate_report",
    "Phase1State",
    "badness",
    "infer_wscale",
    "ScenarioConfig",
    "simulate",
]
