"""Policy files, JSON-lines traces and CSV/JSON reports."""

from __future__ import annotations

import csv
import gzip
import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .driver_policy import TabularPolicy

MAGIC = b"LKPOLICY"
FORMAT_VERSION = 1
# magic, version, level, seed, n_messages, n_actions, config hash
_HEADER = struct.Struct("<8sHHqII16s")
_CRC = struct.Struct("<I")


class PolicyFormatError(ValueError):
    """The file is not a valid policy container."""


def policy_to_bytes(policy: TabularPolicy) -> bytes:
    policy.validate()
    n, a = policy.probabilities.shape
    digest = policy.config_hash.encode("ascii")[:16].ljust(16, b"\0")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, policy.level, policy.seed, n, a, digest)
    body = (np.ascontiguousarray(policy.probabilities, dtype="<f8").tobytes()
            + np.ascontiguousarray(policy.visit_counts, dtype="<i8").tobytes())
    payload = header + body
    return payload + _CRC.pack(zlib.crc32(payload))


def policy_from_bytes(blob: bytes) -> TabularPolicy:
    if len(blob) < _HEADER.size + _CRC.size:
        raise PolicyFormatError("file too short for a policy header")
    magic, version, level, seed, n, a, digest = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise PolicyFormatError("bad magic bytes; not a policy file")
    if version != FORMAT_VERSION:
        raise PolicyFormatError(f"unsupported policy format version {version}")
    expected = _HEADER.size + 8 * n * a + 8 * n + _CRC.size
    if len(blob) != expected:
        raise PolicyFormatError(f"policy file has {len(blob)} bytes, expected {expected}")
    payload, (crc,) = blob[:-_CRC.size], _CRC.unpack(blob[-_CRC.size:])
    if zlib.crc32(payload) != crc:
        raise PolicyFormatError("checksum mismatch; policy file is corrupt")
    off = _HEADER.size
    probs = np.frombuffer(blob, dtype="<f8", count=n * a, offset=off).reshape(n, a).astype(np.float64)
    visits = np.frombuffer(blob, dtype="<i8", count=n, offset=off + 8 * n * a).astype(np.int64)
    policy = TabularPolicy(probs, level=level, visit_counts=visits, seed=seed,
                           config_hash=digest.rstrip(b"\0").decode("ascii"))
    try:
        policy.validate()
    except ValueError as exc:
        raise PolicyFormatError(str(exc)) from None
    return policy


def save_policy(policy: TabularPolicy, path) -> None:
    Path(path).write_bytes(policy_to_bytes(policy))


def load_policy(path) -> TabularPolicy:
    return policy_from_bytes(Path(path).read_bytes())


def export_policy_json(policy: TabularPolicy, path, min_visits: int = 1) -> None:
    """Human-readable dump of the rows visited at least ``min_visits`` times."""
    rows = np.flatnonzero(policy.visit_counts >= min_visits)
    doc = {
        "format_version": FORMAT_VERSION, "level": policy.level, "seed": policy.seed,
        "config_hash": policy.config_hash, "n_messages": policy.n_messages,
        "rows": {str(int(m)): {"visits": int(policy.visit_counts[m]),
                               "p": [round(float(p), 6) for p in policy.probabilities[m]]}
                 for m in rows},
    }
    Path(path).write_text(json.dumps(doc, indent=1))


# -- traces -----------------------------------------------------------------

def _open_text(path, mode: str):
    path = str(path)
    if path.endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, mode + "b"), encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def write_trace(path, records, meta: dict | None = None) -> None:
    """One JSON object per line; an optional leading ``{"meta": ...}`` line."""
    with _open_text(path, "w") as fh:
        if meta is not None:
            fh.write(json.dumps({"meta": meta}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


class TraceFormatError(ValueError):
    """The trace file does not parse."""


def read_trace(path) -> tuple[dict, list[dict]]:
    meta, records = {}, []
    with _open_text(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"line {lineno}: {exc}") from None
            if "meta" in obj and lineno == 1:
                meta = obj["meta"]
                continue
            if not isinstance(obj, dict) or "step" not in obj or "cars" not in obj:
                raise TraceFormatError(f"line {lineno}: missing 'step' or 'cars'")
            if records and obj["step"] <= records[-1]["step"]:
                raise TraceFormatError(f"line {lineno}: step index not increasing")
            records.append(obj)
    return meta, records


# -- reports ------------------------------------------------------------------

def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    return v


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")
