"""Byte-level EDF parser/writer tests plus hypnogram round trips.

The EDF fixtures are assembled by hand in `build_edf` (independently of the
writer under test) so the parser is checked against the format definition,
not against its own inverse.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from somnium import edfio
from somnium.edfio import (
    Calibration,
    ChannelSeries,
    Hypnogram,
    Recording,
    StageCode,
)
from somnium.errors import (
    BadCalibration,
    GapInEpochs,
    MalformedLine,
    NonNumericField,
    RangeOverflow,
    TruncatedHeader,
)


def _pad(text, width):
    raw = str(text).encode("ascii")
    assert len(raw) <= width
    return raw + b" " * (width - len(raw))


def build_edf(signals, n_records, record_duration=1.0, patient="P01",
              override=None):
    """Hand-rolled EDF assembler: signals are dicts with keys label, unit,
    pmin, pmax, dmin, dmax, spr, digital (flat int list)."""
    ns = len(signals)
    head = bytearray()
    head += _pad("0", 8)
    head += _pad(patient, 80)
    head += _pad("test recording", 80)
    head += _pad("02.01.24", 8)
    head += _pad("23.30.00", 8)
    head += _pad(256 * (1 + ns), 8)
    head += _pad("", 44)
    head += _pad(n_records, 8)
    head += _pad(record_duration, 8)
    head += _pad(ns, 4)
    for key, width in [("label", 16), ("transducer", 80), ("unit", 8),
                       ("pmin", 8), ("pmax", 8), ("dmin", 8), ("dmax", 8),
                       ("prefilter", 80), ("spr", 8), ("reserved", 32)]:
        for s in signals:
            head += _pad(s.get(key, ""), width)
    if override:
        for offset, raw in override.items():
            head[offset:offset + len(raw)] = raw
    body = bytearray()
    for rec in range(n_records):
        for s in signals:
            spr = s["spr"]
            chunk = np.asarray(s["digital"][rec * spr:(rec + 1) * spr],
                               dtype="<i2")
            body += chunk.tobytes()
    return bytes(head + body)


def _one_signal(digital, spr=4, pmin=-100, pmax=100, dmin=-32768, dmax=32767):
    return {"label": "EEGC3-A2", "unit": "uV", "pmin": pmin, "pmax": pmax,
            "dmin": dmin, "dmax": dmax, "spr": spr, "digital": digital}


# --- parsing ----------------------------------------------------------------

def test_parse_basic_layout():
    data = build_edf([_one_signal(list(range(8)))], n_records=2)
    rec = edfio.parse_edf(data)
    assert len(rec.channels) == 1
    ch = rec.channels[0]
    assert ch.label == "EEGC3-A2"
    assert len(ch.samples) == 8
    assert ch.sampling_rate == 4.0
    assert rec.patient_id == "P01"
    assert rec.start_time == "2024-01-02T23:30:00"


def test_parse_calibration_value():
    # digital 0 with physical [-100, 100] and digital [-32768, 32767]
    data = build_edf([_one_signal([0, 0, 0, 0])], n_records=1)
    rec = edfio.parse_edf(data)
    expect = 32768 * 200 / 65535 - 100       # 0.0015259...
    np.testing.assert_allclose(rec.channels[0].samples, expect, atol=1e-9)
    assert abs(expect - 0.00153) < 1e-5


def test_parse_calibration_endpoints_exact():
    data = build_edf([_one_signal([-32768, 32767, 0, 0])], n_records=1)
    ch = edfio.parse_edf(data).channels[0]
    assert ch.samples[0] == -100.0
    assert ch.samples[1] == 100.0


def test_parse_two_signals_interleaved_records():
    a = {"label": "A", "unit": "uV", "pmin": -1, "pmax": 1, "dmin": -32768,
         "dmax": 32767, "spr": 2, "digital": [100, 200, 300, 400]}
    b = {"label": "B", "unit": "uV", "pmin": -1, "pmax": 1, "dmin": -32768,
         "dmax": 32767, "spr": 3, "digital": [1, 2, 3, 4, 5, 6]}
    rec = edfio.parse_edf(build_edf([a, b], n_records=2))
    cal = Calibration(-1, 1, -32768, 32767)
    np.testing.assert_allclose(
        rec.channel("A").samples,
        cal.to_physical(np.array([100, 200, 300, 400])))
    np.testing.assert_allclose(
        rec.channel("B").samples,
        cal.to_physical(np.array([1, 2, 3, 4, 5, 6])))
    assert rec.channel("B").sampling_rate == 3.0


def test_parse_truncated_file():
    data = build_edf([_one_signal([0, 0, 0, 0])], n_records=1)
    with pytest.raises(TruncatedHeader):
        edfio.parse_edf(data[:100])


def test_parse_truncated_payload():
    data = build_edf([_one_signal([0, 0, 0, 0])], n_records=1)
    with pytest.raises(TruncatedHeader):
        edfio.parse_edf(data[:-2])


def test_parse_bad_calibration():
    sig = _one_signal([0, 0, 0, 0], dmin=5, dmax=5)
    with pytest.raises(BadCalibration):
        edfio.parse_edf(build_edf([sig], n_records=1))


def test_parse_non_numeric_field():
    data = build_edf([_one_signal([0, 0, 0, 0])], n_records=1)
    # corrupt the record-count field (bytes 236..244)
    data = data[:236] + b"oops    " + data[244:]
    with pytest.raises(NonNumericField):
        edfio.parse_edf(data)


def test_parse_unknown_record_count_inferred():
    data = build_edf([_one_signal(list(range(8)))], n_records=2)
    data = data[:236] + _pad("-1", 8) + data[244:]
    rec = edfio.parse_edf(data)
    assert len(rec.channels[0].samples) == 8


# --- writing ----------------------------------------------------------------

def _toy_recording(rng=None, n=256, rate=128.0):
    rng = rng or np.random.default_rng(0)
    return Recording(
        patient_id="SYN1",
        channels=[
            ChannelSeries("EEGC3-A2", rate, "uV",
                          rng.standard_normal(n) * 20.0),
            ChannelSeries("EEGC4-A1", rate, "uV",
                          rng.standard_normal(n) * 20.0),
        ],
        start_time="2024-03-04T22:15:00",
    )


def test_write_parse_round_trip_digital_equality():
    rec = _toy_recording(np.random.default_rng(42), n=512, rate=256.0)
    blob = edfio.write_edf(rec)
    rec2 = edfio.parse_edf(blob)
    assert [c.label for c in rec2.channels] == [c.label for c in rec.channels]
    assert [c.sampling_rate for c in rec2.channels] == [256.0, 256.0]
    # writing the parse result again must reproduce the sample payload
    blob2 = edfio.write_edf(rec2)
    assert blob2 == blob


def test_write_constant_zero_maps_to_zero_code():
    rec = Recording("Z", [ChannelSeries("C", 4.0, "uV", np.zeros(8))])
    blob = edfio.write_edf(rec)
    payload = np.frombuffer(blob[512:], dtype="<i2")
    assert (payload == 0).all()


def test_write_range_overflow():
    cal = Calibration(-1.0, 1.0, -32768, 32767)
    ch = ChannelSeries("C", 4.0, "uV", np.array([0.0, 2.0, 0.0, 0.0]),
                       calibration=cal)
    with pytest.raises(RangeOverflow):
        edfio.write_edf(Recording("P", [ch]))


def test_write_rejects_ragged_records():
    ch = ChannelSeries("C", 4.0, "uV", np.zeros(7))   # not divisible by 4
    with pytest.raises(ValueError):
        edfio.write_edf(Recording("P", [ch]))


def test_write_physical_values_survive_quantization():
    rng = np.random.default_rng(7)
    rec = _toy_recording(rng, n=1024)
    rec2 = edfio.parse_edf(edfio.write_edf(rec))
    for c, c2 in zip(rec.channels, rec2.channels):
        # quantization step = span / 65535; tolerate one step
        step = (c2.calibration.physical_max - c2.calibration.physical_min) \
            / 65535
        np.testing.assert_allclose(c2.samples, c.samples, atol=step)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([4, 100, 128, 200, 256]),
       st.integers(1, 3), st.integers(1, 4))
def test_round_trip_property(seed, rate, n_channels, n_records):
    rng = np.random.default_rng(seed)
    channels = [
        ChannelSeries(f"CH{i}", float(rate), "uV",
                      rng.uniform(-200, 200, size=rate * n_records))
        for i in range(n_channels)
    ]
    rec = Recording("H", channels)
    blob = edfio.write_edf(rec)
    assert edfio.write_edf(edfio.parse_edf(blob)) == blob


# --- hypnograms -------------------------------------------------------------

def test_hypnogram_parse_basic():
    h = edfio.parse_hypnogram("0\tW\n1\tN2\n2\tREM")
    assert h.stages == [StageCode.W, StageCode.N2, StageCode.REM]
    assert h.artifact_intervals == []


def test_hypnogram_parse_legacy_stages():
    h = edfio.parse_hypnogram("0\tS3\n1\tS4")
    assert h.stages == [StageCode.S3, StageCode.S4]


def test_hypnogram_parse_gap():
    with pytest.raises(GapInEpochs):
        edfio.parse_hypnogram("0\tW\n2\tN1")


def test_hypnogram_parse_malformed():
    with pytest.raises(MalformedLine):
        edfio.parse_hypnogram("0 W")
    with pytest.raises(MalformedLine):
        edfio.parse_hypnogram("zero\tW")
    with pytest.raises(MalformedLine):
        edfio.parse_hypnogram("\n\n")


def test_hypnogram_artifact_epochs():
    h = edfio.parse_hypnogram("0\tW\n1\tA\n2\tMT\n3\tN2")
    assert h.stages[1] is StageCode.MT
    assert h.stages[2] is StageCode.MT
    assert h.artifact_intervals == [(30.0, 60.0), (60.0, 90.0)]


def test_hypnogram_unknown_token():
    h = edfio.parse_hypnogram("0\tW\n1\tXYZ")
    assert h.stages[1] is StageCode.UNKNOWN


def test_hypnogram_write_single():
    assert edfio.write_hypnogram(
        Hypnogram(stages=[StageCode.W])) == "0\tW\n"


def test_hypnogram_write_two_lines():
    text = edfio.write_hypnogram(Hypnogram(stages=[StageCode.N1,
                                                   StageCode.N2]))
    assert text == "0\tN1\n1\tN2\n"


def test_hypnogram_round_trip_with_artifacts():
    src = "0\tW\n1\tA\n2\tN2\n3\tS4\n4\t?\n5\tREM"
    h = edfio.parse_hypnogram(src)
    h2 = edfio.parse_hypnogram(edfio.write_hypnogram(h))
    assert h2.stages == h.stages
    assert h2.artifact_intervals == h.artifact_intervals


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(list(StageCode)), min_size=1, max_size=40))
def test_hypnogram_round_trip_property(stages):
    h = Hypnogram(stages=stages)
    h2 = edfio.parse_hypnogram(edfio.write_hypnogram(h))
    assert h2.stages == h.stages


def test_recording_invariants():
    with pytest.raises(ValueError):
        Recording("P", [])
    with pytest.raises(ValueError):
        ChannelSeries("C", 0.5, "uV", np.zeros(4))
    with pytest.raises(ValueError):
        ChannelSeries("C", 128.0, "uV", np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        Recording("P", [ChannelSeries("C", 4.0, "uV", np.zeros(4)),
                        ChannelSeries("C", 4.0, "uV", np.zeros(4))])
