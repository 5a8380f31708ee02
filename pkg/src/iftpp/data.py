"""Event sequences, JSONL dataset files and padded batches."""
import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class EventSequence:
    """Strictly increasing arrival times, with optional per-event marks and metadata.

    ``t_start`` is the time origin of the first inter-event time (0 for a
    full sequence, the preceding event time for a chunk). ``metadata`` holds
    one integer category per event, describing the conditions under which
    that event's waiting time started.
    """
    arrival_times: np.ndarray
    marks: Optional[np.ndarray] = None
    metadata: Optional[np.ndarray] = None
    sequence_id: str = ""
    t_start: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.arrival_times = np.asarray(self.arrival_times, dtype=np.float64)
        if self.marks is not None:
            self.marks = np.asarray(self.marks, dtype=np.int64)
        if self.metadata is not None:
            self.metadata = np.asarray(self.metadata, dtype=np.int64)
        self.validate()

    def validate(self):
        t = self.arrival_times
        if t.ndim != 1:
            raise ValueError("arrival_times must be one-dimensional")
        if len(t) and (t[0] <= self.t_start or np.any(np.diff(t) <= 0)):
            raise ValueError(f"arrival times of sequence {self.sequence_id!r} must be strictly increasing")
        for name in ("marks", "metadata"):
            v = getattr(self, name)
            if v is not None and len(v) != len(t):
                raise ValueError(f"{name} length must match arrival_times")

    def __len__(self):
        return len(self.arrival_times)

    @property
    def inter_times(self):
        return np.diff(self.arrival_times, prepend=self.t_start)

    @property
    def t_end(self):
        return float(self.arrival_times[-1]) if len(self) else self.t_start

    def slice(self, start, stop):
        """Events ``start:stop`` as a chunk that keeps the true first waiting time."""
        t0 = self.t_start if start == 0 else float(self.arrival_times[start - 1])
        return EventSequence(
            self.arrival_times[start:stop],
            None if self.marks is None else self.marks[start:stop],
            None if self.metadata is None else self.metadata[start:stop],
            self.sequence_id, t0, dict(self.extra),
        )

    def chunks(self, length):
        return [self.slice(i, min(i + length, len(self))) for i in range(0, len(self), length)]

    def scaled(self, factor):
        return EventSequence(self.arrival_times * factor, self.marks, self.metadata,
                             self.sequence_id, self.t_start * factor, dict(self.extra))

    def to_json(self):
        obj = {"id": self.sequence_id, "arrival_times": self.arrival_times.tolist()}
        if self.marks is not None:
            obj["marks"] = self.marks.tolist()
        if self.metadata is not None:
            obj["metadata"] = self.metadata.tolist()
        if self.t_start:
            obj["t_start"] = self.t_start
        obj.update(self.extra)
        return obj

    @classmethod
    def from_json(cls, obj, line=None):
        if not isinstance(obj, dict):
            raise DatasetFormatError("expected a JSON object", line)
        if "arrival_times" not in obj:
            raise DatasetFormatError("missing 'arrival_times'", line)
        known = {"id", "arrival_times", "marks", "metadata", "t_start"}
        try:
            meta = obj.get("metadata")
            if meta is not None:
                meta = np.asarray(meta, dtype=np.float64)
                if np.any(meta != np.round(meta)):
                    raise ValueError("metadata entries must be integer category indices")
            return cls(obj["arrival_times"], obj.get("marks"), meta,
                       str(obj.get("id", "")), float(obj.get("t_start", 0.0)),
                       {k: v for k, v in obj.items() if k not in known})
        except (ValueError, TypeError) as exc:
            raise DatasetFormatError(str(exc), line) from None


def read_jsonl(path) -> List[EventSequence]:
    seqs = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"invalid JSON ({exc.msg})", i) from None
            seq = EventSequence.from_json(obj, i)
            if not seq.sequence_id:
                seq.sequence_id = str(len(seqs))
            seqs.append(seq)
    return seqs


def write_jsonl(path, seqs):
    with open(path, "w") as fh:
        for s in seqs:
            fh.write(json.dumps(s.to_json()) + "\n")


@dataclass
class Batch:
    """Right-padded arrays for a group of sequences."""
    tau: np.ndarray            # (B, T), padding filled with 1.0
    mask: np.ndarray           # (B, T) bool
    marks: Optional[np.ndarray] = None
    meta: Optional[np.ndarray] = None
    seq_idx: Optional[np.ndarray] = None

    @property
    def n_events(self):
        return int(self.mask.sum())


def make_batch(seqs, seq_index=None):
    """Pad ``seqs``; ``seq_index`` maps sequence ids to embedding rows."""
    B = len(seqs)
    T = max(len(s) for s in seqs)
    tau = np.ones((B, T))
    mask = np.zeros((B, T), dtype=bool)
    has_marks = all(s.marks is not None for s in seqs)
    has_meta = all(s.metadata is not None for s in seqs)
    marks = np.zeros((B, T), dtype=np.int64) if has_marks else None
    meta = np.zeros((B, T), dtype=np.int64) if has_meta else None
    for i, s in enumerate(seqs):
        n = len(s)
        tau[i, :n] = s.inter_times
        mask[i, :n] = True
        if has_marks:
            marks[i, :n] = s.marks
        if has_meta:
            meta[i, :n] = s.metadata
    seq_idx = None
    if seq_index is not None:
        seq_idx = np.array([seq_index[s.sequence_id] for s in seqs], dtype=np.int64)
    return Batch(tau, mask, marks, meta, seq_idx)
