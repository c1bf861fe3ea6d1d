"""EDF ingestion: parsing, label mapping, resampling, 30 s epoch segmentation.

EDF files follow the 1992 format: a 256-byte ASCII fixed header, 256 bytes of
ASCII sub-header per signal, then data records of 2-byte little-endian
two's-complement samples. Hypnogram labels come from a sidecar text file with
one stage token per line (EDF+ TAL annotations are out of scope).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

EPOCH_SECONDS = 30
TARGET_HZ = 100.0
EPOCH_SAMPLES = int(EPOCH_SECONDS * TARGET_HZ)  # 3000

STAGES = ("W", "N1", "N2", "N3", "REM")
STAGE_TO_INDEX = {s: i for i, s in enumerate(STAGES)}
UNLABELED = "Unlabeled"

#: sentinel returned by map_labels for annotations that must be excluded
DROP = "Drop"

# Raw hypnogram token -> stage. N4 merges into N3; Movement/Unknown are
# excluded entirely.
_LABEL_TABLE = {
    "W": "W",
    "1": "N1",
    "2": "N2",
    "3": "N3",
    "4": "N3",
    "R": "REM",
    "MOVEMENT": DROP,
    "UNKNOWN": DROP,
}


class EdfError(Exception):
    """Base class for EDF ingestion failures."""


class EdfHeaderError(EdfError):
    pass


class EdfTruncatedError(EdfError):
    pass


class LabelError(EdfError):
    pass


@dataclass(frozen=True)
class SignalHeader:
    """One 256-byte per-signal sub-header. Text fields kept verbatim
    (space-padded) so serialization round-trips bit-exactly."""

    label: str
    transducer: str
    physical_dim: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    prefilter: str
    samples_per_record: int
    reserved: str
    # raw 8-char numeric fields, preserved for round-trip
    raw_physical_min: str = ""
    raw_physical_max: str = ""
    raw_digital_min: str = ""
    raw_digital_max: str = ""
    raw_samples_per_record: str = ""


@dataclass(frozen=True)
class EdfHeader:
    version: str
    patient_id: str
    recording_id: str
    start_date: str
    start_time: str
    header_bytes: int
    reserved: str
    n_records: int
    record_duration: float
    n_signals: int
    signals: tuple[SignalHeader, ...]
    raw_header_bytes: str = ""
    raw_n_records: str = ""
    raw_record_duration: str = ""
    raw_n_signals: str = ""


@dataclass
class RawSignal:
    """Decoded signal in physical units. The raw digital samples are retained
    so a parsed file can be re-serialized bit-exactly."""

    label: str
    sampling_rate: float
    samples: np.ndarray
    digital: np.ndarray | None = None


@dataclass(frozen=True)
class SignalEpoch:
    """One 30 s, 100 Hz single-channel EEG segment with an optional label."""

    samples: np.ndarray  # exactly 3000 values
    label: str  # one of STAGES or UNLABELED
    subject_id: str
    epoch_index: int
    domain: str  # "source" | "target"

    def __post_init__(self):
        if self.samples.shape != (EPOCH_SAMPLES,):
            raise ValueError(
                f"epoch must hold exactly {EPOCH_SAMPLES} samples, "
                f"got shape {self.samples.shape}"
            )
        if self.label not in STAGES and self.label != UNLABELED:
            raise ValueError(f"invalid stage label {self.label!r}")


@dataclass
class EpochDataset:
    epochs: list[SignalEpoch]
    domain: str
    provenance: dict = field(default_factory=dict)

    @property
    def class_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in STAGES}
        for ep in self.epochs:
            if ep.label != UNLABELED:
                counts[ep.label] += 1
        return counts

    def __len__(self) -> int:
        return len(self.epochs)

    def samples_matrix(self) -> np.ndarray:
        return np.stack([ep.samples for ep in self.epochs]) if self.epochs else np.zeros((0, EPOCH_SAMPLES))

    def labels_array(self) -> np.ndarray:
        """Integer labels; -1 for unlabeled epochs."""
        return np.array(
            [STAGE_TO_INDEX.get(ep.label, -1) for ep in self.epochs], dtype=np.int64
        )


def _ascii_int(raw: bytes, what: str) -> int:
    try:
        return int(raw.decode("ascii").strip())
    except (UnicodeDecodeError, ValueError):
        raise EdfHeaderError(f"non-numeric {what} field: {raw!r}") from None


def _ascii_float(raw: bytes, what: str) -> float:
    try:
        return float(raw.decode("ascii").strip())
    except (UnicodeDecodeError, ValueError):
        raise EdfHeaderError(f"non-numeric {what} field: {raw!r}") from None


def parse_edf(raw: bytes) -> tuple[EdfHeader, list[RawSignal]]:
    """Parse EDF bytes into a header and per-signal physical-unit traces.

    Digital 2-byte samples map to physical units by the linear scaling
    physical = digital * gain + offset with gain = (pmax - pmin) / (dmax - dmin).
    """
    if len(raw) < 256:
        raise EdfHeaderError(f"file shorter than the 256-byte fixed header ({len(raw)} bytes)")

    def text(off, n):
        return raw[off : off + n].decode("ascii", errors="replace")

    n_signals = _ascii_int(raw[252:256], "signal count")
    if n_signals < 1:
        raise EdfHeaderError(f"signal count must be >= 1, got {n_signals}")
    header_bytes = _ascii_int(raw[184:192], "header byte count")
    expected_header = 256 + 256 * n_signals
    if header_bytes != expected_header:
        raise EdfHeaderError(
            f"inconsistent header byte count: field says {header_bytes}, "
            f"expected {expected_header} for {n_signals} signals"
        )
    if len(raw) < header_bytes:
        raise EdfHeaderError("file truncated inside the signal headers")

    n_records = _ascii_int(raw[236:244], "number of data records")
    record_duration = _ascii_float(raw[244:252], "record duration")

    # per-signal headers are stored field-major: all labels, then all
    # transducers, and so on
    offs = {}
    base = 0
    for name, width in [
        ("label", 16), ("transducer", 80), ("dim", 8), ("pmin", 8),
        ("pmax", 8), ("dmin", 8), ("dmax", 8), ("prefilter", 80),
        ("samples", 8), ("reserved", 32),
    ]:
        offs[name] = (base, width)
        base += width * n_signals

    sig_headers = []
    for i in range(n_signals):
        def fld(name, i=i):
            b, w = offs[name]
            off = 256 + b + i * w
            return raw[off : off + w]

        label = fld("label").decode("ascii", errors="replace")
        raw_pmin, raw_pmax = fld("pmin"), fld("pmax")
        raw_dmin, raw_dmax = fld("dmin"), fld("dmax")
        raw_spr = fld("samples")
        pmin = _ascii_float(raw_pmin, f"physical min (signal {i})")
        pmax = _ascii_float(raw_pmax, f"physical max (signal {i})")
        dmin = _ascii_int(raw_dmin, f"digital min (signal {i})")
        dmax = _ascii_int(raw_dmax, f"digital max (signal {i})")
        spr = _ascii_int(raw_spr, f"samples per record (signal {i})")
        if dmax == dmin:
            raise EdfHeaderError(f"zero digital range on signal {i} ({label.strip()!r})")
        if spr < 1:
            raise EdfHeaderError(f"samples per record must be >= 1 on signal {i}, got {spr}")
        sig_headers.append(
            SignalHeader(
                label=label,
                transducer=fld("transducer").decode("ascii", errors="replace"),
                physical_dim=fld("dim").decode("ascii", errors="replace"),
                physical_min=pmin,
                physical_max=pmax,
                digital_min=dmin,
                digital_max=dmax,
                prefilter=fld("prefilter").decode("ascii", errors="replace"),
                samples_per_record=spr,
                reserved=fld("reserved").decode("ascii", errors="replace"),
                raw_physical_min=raw_pmin.decode("ascii", errors="replace"),
                raw_physical_max=raw_pmax.decode("ascii", errors="replace"),
                raw_digital_min=raw_dmin.decode("ascii", errors="replace"),
                raw_digital_max=raw_dmax.decode("ascii", errors="replace"),
                raw_samples_per_record=raw_spr.decode("ascii", errors="replace"),
            )
        )

    header = EdfHeader(
        version=text(0, 8),
        patient_id=text(8, 80),
        recording_id=text(88, 80),
        start_date=text(168, 8),
        start_time=text(176, 8),
        header_bytes=header_bytes,
        reserved=text(192, 44),
        n_records=n_records,
        record_duration=record_duration,
        n_signals=n_signals,
        signals=tuple(sig_headers),
        raw_header_bytes=text(184, 8),
        raw_n_records=text(236, 8),
        raw_record_duration=text(244, 8),
        raw_n_signals=text(252, 4),
    )

    record_samples = sum(s.samples_per_record for s in sig_headers)
    record_bytes = record_samples * 2
    body = raw[header_bytes:]
    for r in range(n_records):
        if len(body) < (r + 1) * record_bytes:
            raise EdfTruncatedError(
                f"file truncated inside data record {r} "
                f"(have {len(body)} body bytes, record needs bytes up to {(r + 1) * record_bytes})"
            )

    digital = np.frombuffer(body[: n_records * record_bytes], dtype="<i2")
    digital = digital.reshape(n_records, record_samples)

    signals = []
    col = 0
    for s in sig_headers:
        dig = digital[:, col : col + s.samples_per_record].reshape(-1).astype(np.int64)
        col += s.samples_per_record
        gain = (s.physical_max - s.physical_min) / (s.digital_max - s.digital_min)
        offset = s.physical_min - s.digital_min * gain
        phys = dig * gain + offset
        rate = s.samples_per_record / record_duration
        signals.append(
            RawSignal(label=s.label.strip(), sampling_rate=rate, samples=phys, digital=dig)
        )
    return header, signals


def serialize_edf(header: EdfHeader, signals: list[RawSignal]) -> bytes:
    """Re-emit a parsed EDF bit-exactly (uses the retained raw fields/samples)."""
    out = bytearray()

    def put(s: str, width: int):
        b = s.encode("ascii")
        if len(b) > width:
            raise ValueError(f"field too wide: {s!r} > {width}")
        out.extend(b.ljust(width))

    put(header.version, 8)
    put(header.patient_id, 80)
    put(header.recording_id, 80)
    put(header.start_date, 8)
    put(header.start_time, 8)
    put(header.raw_header_bytes or str(header.header_bytes), 8)
    put(header.reserved, 44)
    put(header.raw_n_records or str(header.n_records), 8)
    put(header.raw_record_duration or str(header.record_duration), 8)
    put(header.raw_n_signals or str(header.n_signals), 4)
    for fld in ["label", "transducer", "physical_dim", "raw_physical_min",
                "raw_physical_max", "raw_digital_min", "raw_digital_max",
                "prefilter", "raw_samples_per_record", "reserved"]:
        width = {"label": 16, "transducer": 80, "physical_dim": 8,
                 "prefilter": 80, "reserved": 32}.get(fld, 8)
        for s in header.signals:
            put(getattr(s, fld), width)

    digitals = []
    for sig, sh in zip(signals, header.signals):
        if sig.digital is None:
            raise ValueError("cannot serialize a signal without retained digital samples")
        digitals.append(np.asarray(sig.digital).reshape(header.n_records, sh.samples_per_record))
    for r in range(header.n_records):
        for d in digitals:
            out.extend(d[r].astype("<i2").tobytes())
    return bytes(out)


def map_labels(raw_annotation: str) -> str:
    """Map a raw hypnogram token to a stage, DROP for excluded annotations."""
    token = raw_annotation.strip().upper()
    if token not in _LABEL_TABLE:
        raise LabelError(
            f"unrecognized hypnogram token {raw_annotation!r}; "
            f"known tokens: {sorted(_LABEL_TABLE)}"
        )
    return _LABEL_TABLE[token]


def read_hypnogram(path: str | Path) -> list[str]:
    """Read a sidecar hypnogram: one raw token per line, blank lines skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


def resample(signal: RawSignal, target_hz: float = TARGET_HZ) -> RawSignal:
    """Resample to target_hz with a polyphase Kaiser-windowed (beta=8) filter.

    Output length is round(n * target / source). Identity when the rates match.
    """
    if signal.sampling_rate <= 0 or target_hz <= 0:
        raise ValueError(
            f"rates must be positive (source={signal.sampling_rate}, target={target_hz})"
        )
    if math.isclose(signal.sampling_rate, target_hz):
        return RawSignal(signal.label, target_hz, signal.samples.copy())

    ratio = Fraction(target_hz).limit_denominator(10**6) / Fraction(
        signal.sampling_rate
    ).limit_denominator(10**6)
    up, down = ratio.numerator, ratio.denominator
    x = np.asarray(signal.samples, dtype=np.float64)
    y = resample_poly(x, up, down, window=("kaiser", 8.0))
    n_out = round(len(x) * target_hz / signal.sampling_rate)
    if len(y) < n_out:
        y = np.pad(y, (0, n_out - len(y)))
    return RawSignal(signal.label, target_hz, y[:n_out])


def segment(
    signal: RawSignal,
    raw_labels: list[str] | None,
    domain: str,
    subject_id: str = "unknown",
) -> EpochDataset:
    """Cut a 100 Hz signal into consecutive 30 s epochs.

    Raw labels are passed through map_labels; DROP epochs are omitted. A
    trailing partial epoch is discarded and recorded in provenance, as are
    epochs containing non-finite samples. raw_labels=None yields unlabeled
    epochs (target-domain ingestion).
    """
    if not math.isclose(signal.sampling_rate, TARGET_HZ):
        raise ValueError(f"segment expects a {TARGET_HZ} Hz signal, got {signal.sampling_rate}")
    x = np.asarray(signal.samples, dtype=np.float64)
    n_full = len(x) // EPOCH_SAMPLES
    if raw_labels is not None:
        if len(raw_labels) > n_full:
            raise ValueError(
                f"{len(raw_labels)} labels but only {n_full} full epochs in the signal"
            )
        n_epochs = len(raw_labels)
    else:
        n_epochs = n_full
    tail = len(x) - n_epochs * EPOCH_SAMPLES

    provenance = {
        "channel": signal.label,
        "discarded_tail_samples": int(tail),
        "dropped_label_epochs": [],
        "dropped_nonfinite_epochs": [],
    }
    epochs = []
    for i in range(n_epochs):
        if raw_labels is not None:
            stage = map_labels(raw_labels[i])
            if stage == DROP:
                provenance["dropped_label_epochs"].append(i)
                continue
        else:
            stage = UNLABELED
        chunk = x[i * EPOCH_SAMPLES : (i + 1) * EPOCH_SAMPLES]
        if not np.all(np.isfinite(chunk)):
            provenance["dropped_nonfinite_epochs"].append(i)
            continue
        epochs.append(
            SignalEpoch(samples=chunk, label=stage, subject_id=subject_id,
                        epoch_index=i, domain=domain)
        )
    return EpochDataset(epochs=epochs, domain=domain, provenance=provenance)


def select_channel(signals: list[RawSignal], wanted: str) -> RawSignal:
    """Find a channel by label, case-insensitive and punctuation-stripped."""

    def norm(s: str) -> str:
        return "".join(c for c in s.lower() if c.isalnum())

    for sig in signals:
        if norm(sig.label) == norm(wanted):
            return sig
    available = [s.label for s in signals]
    raise EdfError(f"channel {wanted!r} not found; available channels: {available}")


def dataset_manifest(dataset: EpochDataset) -> dict:
    return {
        "domain": dataset.domain,
        "n_epochs": len(dataset),
        "class_counts": dataset.class_counts,
        "provenance": dataset.provenance,
    }


def save_dataset(dataset: EpochDataset, out_dir: str | Path) -> dict:
    """Write epochs.npy + dataset.json (+ manifest.json); deterministic bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "epochs.npy", dataset.samples_matrix())
    meta = {
        "domain": dataset.domain,
        "labels": [ep.label for ep in dataset.epochs],
        "subject_ids": [ep.subject_id for ep in dataset.epochs],
        "epoch_indices": [ep.epoch_index for ep in dataset.epochs],
        "provenance": dataset.provenance,
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    manifest = dataset_manifest(dataset)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(in_dir: str | Path) -> EpochDataset:
    p = Path(in_dir)
    mat = np.load(p / "epochs.npy")
    meta = json.loads((p / "dataset.json").read_text())
    epochs = [
        SignalEpoch(samples=mat[i], label=meta["labels"][i],
                    subject_id=meta["subject_ids"][i],
                    epoch_index=meta["epoch_indices"][i], domain=meta["domain"])
        for i in range(mat.shape[0])
    ]
    return EpochDataset(epochs=epochs, domain=meta["domain"], provenance=meta["provenance"])
