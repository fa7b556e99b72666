"""Time-tag streams and their on-disk formats.

Binary records are packed little-endian ``(u8 channel, u64 timestamp_ps)``,
9 bytes each, with a JSON sidecar (same stem, ``.json``) holding duration,
channel map and free-form metadata. CSV export uses the fixed header
``channel,timestamp_ps``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .model import SCHEMA_VERSION

RECORD_DTYPE = np.dtype([("channel", "<u1"), ("timestamp", "<u8")])
PS = 1e-12
FORMAT_NAME = "cwqkd-tags"


def default_channel_map(n):
    """Channel k measures basis ``k // 2`` and bit ``k % 2``."""
    return {k: {"basis": k // 2, "bit": k % 2} for k in range(n)}


@dataclass
class TagStream:
    """Time-ordered detection records of one party.

    ``timestamp`` is integer picoseconds, ``channel`` a small detector id.
    """

    channel: np.ndarray
    timestamp: np.ndarray
    duration: float
    channels: dict = field(default_factory=dict)
    party: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channel = np.asarray(self.channel, dtype=np.uint8)
        self.timestamp = np.asarray(self.timestamp, dtype=np.int64)
        if self.channel.shape != self.timestamp.shape or self.channel.ndim != 1:
            raise ValueError("channel and timestamp must be 1-D arrays of equal length")
        if self.duration < 0:
            raise ValueError("duration must be >= 0")
        if not self.channels:
            n = int(self.channel.max()) + 1 if self.channel.size else 0
            self.channels = default_channel_map(max(n, 2))
        self.channels = {int(k): dict(v) for k, v in self.channels.items()}

    def __len__(self):
        return self.timestamp.size

    @property
    def is_sorted(self):
        return bool(np.all(np.diff(self.timestamp) >= 0))

    def check_per_channel_order(self):
        for ch in np.unique(self.channel):
            if np.any(np.diff(self.timestamp[self.channel == ch]) < 0):
                return False
        return True

    def basis_bit(self, ch=None):
        """Arrays (basis, bit) for channel ids ``ch`` (default: every record)."""
        ch = self.channel if ch is None else np.asarray(ch)
        top = max(max(self.channels) + 1, int(ch.max()) + 1 if ch.size else 0)
        basis = np.full(top, -1, dtype=np.int64)
        bit = np.full(top, -1, dtype=np.int64)
        for k, v in self.channels.items():
            basis[k], bit[k] = v["basis"], v["bit"]
        return basis[ch], bit[ch]

    def times(self, ch=None):
        """Timestamps in ps, optionally restricted to one channel."""
        if ch is None:
            return self.timestamp
        return self.timestamp[self.channel == ch]

    def rate(self, ch=None):
        if self.duration <= 0:
            return 0.0
        return self.times(ch).size / self.duration

    def shifted(self, offset_ps):
        return TagStream(self.channel.copy(), self.timestamp + int(offset_ps), self.duration,
                         dict(self.channels), self.party, dict(self.metadata))

    def sorted(self):
        order = np.argsort(self.timestamp, kind="stable")
        return TagStream(self.channel[order], self.timestamp[order], self.duration,
                         dict(self.channels), self.party, dict(self.metadata))

    # -- files --------------------------------------------------------------

    def sidecar(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "format": FORMAT_NAME,
            "record": "little-endian u8 channel, u64 timestamp_ps",
            "party": self.party,
            "duration": float(self.duration),
            "n_records": int(len(self)),
            "channels": {str(k): v for k, v in sorted(self.channels.items())},
            "metadata": self.metadata,
        }

    def save(self, path):
        """Write ``path`` (binary records) and ``path`` with suffix ``.json``."""
        path = Path(path)
        if np.any(self.timestamp < 0):
            raise ValueError("negative timestamps cannot be stored as u64")
        rec = np.empty(len(self), dtype=RECORD_DTYPE)
        rec["channel"] = self.channel
        rec["timestamp"] = self.timestamp
        path.write_bytes(rec.tobytes())
        sidecar_path(path).write_text(json.dumps(self.sidecar(), indent=2))

    @classmethod
    def load(cls, path):
        path = Path(path)
        side = sidecar_path(path)
        meta = json.loads(side.read_text()) if side.exists() else {}
        if meta and meta.get("format", FORMAT_NAME) != FORMAT_NAME:
            raise SchemaError("format", f"unsupported tag format {meta.get('format')!r}")
        raw = path.read_bytes()
        if len(raw) % RECORD_DTYPE.itemsize:
            raise SchemaError("<records>", "file size is not a multiple of the 9-byte record")
        rec = np.frombuffer(raw, dtype=RECORD_DTYPE)
        ts = rec["timestamp"].astype(np.int64)
        duration = meta.get("duration")
        if duration is None:
            duration = float(ts.max() - ts.min()) * PS if ts.size else 0.0
        if "n_records" in meta and meta["n_records"] != rec.size:
            raise SchemaError("n_records", "sidecar count does not match the record file")
        return cls(rec["channel"].copy(), ts, float(duration),
                   {int(k): v for k, v in meta.get("channels", {}).items()},
                   meta.get("party", ""), meta.get("metadata", {}))

    def to_csv(self, path):
        data = np.column_stack([self.channel.astype(np.int64), self.timestamp])
        np.savetxt(path, data, fmt="%d", delimiter=",", header="channel,timestamp_ps", comments="")

    @classmethod
    def from_csv(cls, path, duration=None, **kw):
        data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        ch, ts = data[:, 0], data[:, 1]
        if duration is None:
            duration = float(ts.max() - ts.min()) * PS if ts.size else 0.0
        return cls(ch, ts, duration, **kw)


def sidecar_path(path):
    return Path(path).with_suffix(".json")
