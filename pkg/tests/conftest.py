import numpy as np
import pytest

from decquic.trace import PacketRecord, ResponseEvent, Trace


def make_trace(packets, events=(), trace_id="t0", server_id="srv"):
    """Build a Trace from (t, len, dir) tuples and event times."""
    return Trace(
        trace_id=trace_id,
        server_id=server_id,
        packets=sorted((PacketRecord(*p) for p in packets), key=lambda p: p.t),
        events=sorted((ResponseEvent(t) for t in events), key=lambda e: e.t),
    )


def random_trace(rng, n_packets=200, n_events=10, duration=1.0, trace_id="rt", server_id="srv"):
    packets = [
        (
            round(float(rng.uniform(0, duration)), 9),
            int(rng.integers(60, 1501)),
            "s2c" if rng.random() < 0.5 else "c2s",
        )
        for _ in range(n_packets)
    ]
    events = [round(float(rng.uniform(0, duration)), 9) for _ in range(n_events)]
    return make_trace(packets, events, trace_id=trace_id, server_id=server_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
