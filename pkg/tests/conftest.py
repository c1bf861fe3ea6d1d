import numpy as np
import pytest


def build_edf_bytes(
    signals,
    n_records=10,
    record_duration=1.0,
    version="0",
    patient="test patient",
    recording="test recording",
):
    """Construct an EDF file byte-by-byte.

    signals: list of dicts with keys label, physical_min, physical_max,
    digital_min, digital_max, samples_per_record, digital (ndarray of int,
    length n_records * samples_per_record).
    """
    ns = len(signals)

    def fld(value, width):
        b = str(value).encode("ascii")
        assert len(b) <= width, (value, width)
        return b.ljust(width)

    out = bytearray()
    out += fld(version, 8)
    out += fld(patient, 80)
    out += fld(recording, 80)
    out += fld("01.01.24", 8)
    out += fld("00.00.00", 8)
    out += fld(256 + 256 * ns, 8)
    out += fld("", 44)
    out += fld(n_records, 8)
    out += fld(record_duration, 8)
    out += fld(ns, 4)
    for key, width in [
        ("label", 16), ("transducer", 80), ("dim", 8), ("physical_min", 8),
        ("physical_max", 8), ("digital_min", 8), ("digital_max", 8),
        ("prefilter", 80), ("samples_per_record", 8), ("reserved", 32),
    ]:
        for s in signals:
            default = {"transducer": "", "dim": "uV", "prefilter": "", "reserved": ""}
            out += fld(s.get(key, default.get(key, "")), width)
    for r in range(n_records):
        for s in signals:
            spr = s["samples_per_record"]
            chunk = np.asarray(s["digital"][r * spr : (r + 1) * spr], dtype="<i2")
            out += chunk.tobytes()
    return bytes(out)


@pytest.fixture
def edf_fixture():
    """Two-signal fixture: signal 0 is a ramp, signal 1 is a known constant.

    Expected physical values were written down from the construction itself:
    gain = (pmax - pmin) / (dmax - dmin).
    """
    rng = np.random.default_rng(42)
    n_records, spr = 10, 100
    ramp = np.arange(n_records * spr) % 2000 - 1000
    noise = rng.integers(-500, 500, size=n_records * spr)
    signals = [
        dict(label="EEG FPZ-CZ", physical_min=-250.0, physical_max=250.0,
             digital_min=-2048, digital_max=2047, samples_per_record=spr,
             digital=ramp),
        dict(label="EEG PZ-OZ", physical_min=-100.0, physical_max=100.0,
             digital_min=-2048, digital_max=2047, samples_per_record=spr,
             digital=noise),
    ]
    raw = build_edf_bytes(signals, n_records=n_records, record_duration=1.0)
    return raw, signals, n_records, spr
