import io

import numpy as np
import pytest

from decquic.errors import TraceParseError, TraceValidationError
from decquic.trace import (
    ManifestRow,
    load_trace,
    parse_trace,
    read_manifest,
    save_trace,
    write_manifest,
    write_trace,
)

from conftest import random_trace


def parse(pkt_text, evt_text="", trace_id="t", server_id="s"):
    return parse_trace(io.StringIO(pkt_text), io.StringIO(evt_text), trace_id, server_id)


def test_minimal_single_packet():
    tr = parse('{"t":0.0,"len":1292,"dir":"c2s"}\n')
    assert len(tr.packets) == 1
    assert len(tr.events) == 0
    assert tr.duration_s == 0.0


def test_negative_time_rejected():
    with pytest.raises(TraceValidationError):
        parse('{"t":-1.0,"len":100,"dir":"c2s"}\n')


def test_zero_length_rejected():
    with pytest.raises(TraceValidationError):
        parse('{"t":0.0,"len":0,"dir":"c2s"}\n')


def test_bad_direction_rejected():
    with pytest.raises(TraceValidationError):
        parse('{"t":0.0,"len":10,"dir":"up"}\n')


def test_malformed_json_names_line():
    text = '{"t":0.0,"len":10,"dir":"c2s"}\n{"t":0.1,"len":\n'
    with pytest.raises(TraceParseError, match="line 2"):
        parse(text)


def test_empty_packet_stream_rejected():
    with pytest.raises(TraceValidationError, match="empty"):
        parse("")


def test_observed_values_preserved():
    # first packet of the window: 1292 bytes from the client at 5.16 s
    lines = ['{"t":5.16,"len":1292,"dir":"c2s"}']
    lines += [f'{{"t":{5.16 + 0.002 * (i + 1):.9f},"len":1350,"dir":"s2c"}}' for i in range(136)]
    tr = parse("\n".join(lines) + "\n")
    assert len(tr.packets) == 137
    assert tr.packets[0].t == 5.16
    assert tr.packets[0].len == 1292
    assert tr.packets[0].dir == "c2s"


def test_parse_sorts_by_time():
    tr = parse('{"t":0.5,"len":10,"dir":"c2s"}\n{"t":0.1,"len":20,"dir":"s2c"}\n')
    assert [p.t for p in tr.packets] == [0.1, 0.5]


def test_write_empty_events():
    tr = parse('{"t":0.0,"len":100,"dir":"c2s"}\n')
    _, evt_text = write_trace(tr)
    assert evt_text == ""


def test_write_preserves_order():
    tr = parse(
        '{"t":0.0,"len":1,"dir":"c2s"}\n{"t":0.1,"len":2,"dir":"s2c"}\n{"t":0.2,"len":3,"dir":"c2s"}\n'
    )
    pkt_text, _ = write_trace(tr)
    assert [int(line.split('"len":')[1].split(",")[0]) for line in pkt_text.splitlines()] == [1, 2, 3]


def test_round_trip_random_traces(rng):
    for i in range(10):
        tr = random_trace(rng, n_packets=1000, n_events=40, trace_id=f"rt{i}")
        pkt_text, evt_text = write_trace(tr)
        back = parse(pkt_text, evt_text, tr.trace_id, tr.server_id)
        assert back.packets == tr.packets
        assert back.events == tr.events


def test_sorted_after_parse(rng):
    tr = random_trace(rng, n_packets=500)
    ts = [p.t for p in tr.packets]
    assert all(a <= b for a, b in zip(ts, ts[1:]))


def test_manifest_round_trip(tmp_path, rng):
    traces = [random_trace(rng, n_packets=50, trace_id=f"m{i}", server_id=f"srv{i % 2}") for i in range(4)]
    rows = [save_trace(tr, tmp_path) for tr in traces]
    write_manifest(rows, tmp_path / "manifest.csv")
    back_rows = read_manifest(tmp_path / "manifest.csv")
    assert back_rows == rows
    for row, tr in zip(back_rows, traces):
        assert isinstance(row, ManifestRow)
        loaded = load_trace(row, tmp_path)
        assert loaded.packets == tr.packets
        assert loaded.events == tr.events
        assert loaded.server_id == tr.server_id
