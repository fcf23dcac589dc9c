"""Plaintext predictability of captured MQTT frames.

Frames are grouped by decoded packet type.  For each group we count the
distinct byte patterns and compute Shannon entropy (bits) of the byte
histogram at every offset.  Frames shorter than an offset do not
contribute to that offset.  Undecodable frames land in the ``opaque``
group.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import codec

OPAQUE = "opaque"


def shannon_entropy(counts: Iterable[int]) -> float:
    counts = [c for c in counts if c]
    total = sum(counts)
    if total == 0:
        return 0.0
    h = -sum(c / total * math.log2(c / total) for c in counts)
    return h if h > 0 else 0.0


@dataclass
class TypeVariability:
    packet_type: str
    frame_count: int
    distinct_patterns: int
    entropy: list[float] = field(default_factory=list)

    @property
    def max_entropy(self) -> float:
        return max(self.entropy, default=0.0)

    def zero_offsets(self) -> list[int]:
        return [i for i, h in enumerate(self.entropy) if h == 0.0]


@dataclass
class VariabilityReport:
    types: dict[str, TypeVariability] = field(default_factory=dict)

    def __getitem__(self, name: str) -> TypeVariability:
        return self.types[name]

    def __contains__(self, name: str) -> bool:
        return name in self.types

    def summary_rows(self) -> list[tuple[str, int, int, float]]:
        return [(t.packet_type, t.frame_count, t.distinct_patterns, round(t.max_entropy, 6))
                for t in sorted(self.types.values(), key=lambda t: t.packet_type)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["packet_type", "offset", "entropy_bits"])
        for t in sorted(self.types.values(), key=lambda t: t.packet_type):
            for i, h in enumerate(t.entropy):
                w.writerow([t.packet_type, i, "%.6f" % h])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = ["%-12s %7s %9s %12s" % ("type", "frames", "patterns", "max_bits")]
        for name, n, d, h in self.summary_rows():
            lines.append("%-12s %7d %9d %12.4f" % (name, n, d, h))
        return "\n".join(lines)


def packet_type_name(frame: bytes) -> str:
    try:
        pkt = codec.decode_packet(frame)
    except codec.DecodeError:
        return OPAQUE
    return pkt.packet_type.name


def analyze_trace(frames: Iterable, direction: Optional[int] = None) -> VariabilityReport:
    """``frames`` holds ``(direction, bytes)`` pairs or bare byte strings."""
    groups: dict[str, list[bytes]] = {}
    for item in frames:
        if isinstance(item, (bytes, bytearray)):
            d, data = None, bytes(item)
        else:
            d, data = item[0], bytes(item[1])
        if direction is not None and d is not None and d != direction:
            continue
        groups.setdefault(packet_type_name(data), []).append(data)

    report = VariabilityReport()
    for name, group in groups.items():
        width = max(len(f) for f in group)
        entropy = []
        for off in range(width):
            hist = Counter(f[off] for f in group if len(f) > off)
            entropy.append(shannon_entropy(hist.values()))
        report.types[name] = TypeVariability(name, len(group), len(set(group)), entropy)
    return report


def protocol_name_offsets(connect_frame: bytes) -> range:
    """Byte offsets of the length-prefixed "MQTT" protocol name in a CONNECT."""
    _, n = codec.decode_remaining_length(connect_frame, 1)
    start = 1 + n
    return range(start, start + 6)
