"""Smoke test for the mqbench extension module.

Build first: `maturin develop -m crates/py/Cargo.toml` (or `pip install
--no-build-isolation -e crates/py`), then `python python/smoke.py`.
"""

import json
import tempfile

import mqbench


def codec():
    h = mqbench.MessageHeader(1, 1_700_000_000_000_000_000)
    raw = h.encode()
    assert raw.hex() == "4d51424e01000000000000000000000117979cfe362a0000", raw.hex()
    assert mqbench.decode_header(raw) == h
    assert len(h.payload(1024)) == 1024
    try:
        mqbench.decode_header(b"short")
    except ValueError:
        pass
    else:
        raise AssertionError("short header accepted")


def stats():
    assert mqbench.percentiles(list(range(10, 101, 10)), [50, 95]) == [50, 100]
    s = json.loads(mqbench.latency_stats([2, 4, 4, 4, 5, 5, 7, 9]))
    assert s["mean_ns"] == 5.0 and s["stddev_ns"] == 2.0
    sched = mqbench.schedule_failures(30.0, 5.0, 180.0, 7)
    assert sched == mqbench.schedule_failures(30.0, 5.0, 180.0, 7)
    assert all(0 <= f < r for f, r in sched)
    assert mqbench.cpu_cores_used(0, 0, 1_000_000_000, 500_000_000) == 0.5


def end_to_end():
    broker = mqbench.MiniBroker()
    spec = mqbench.ExperimentSpec.throughput_pairs("mqtt", broker.endpoint, 2)
    spec.duration_s = 2.0
    spec.warmup_s = 0.0
    spec.drain_s = 0.5
    spec.plateau_window_s = 1.0
    assert spec.validate() == []
    with tempfile.TemporaryDirectory() as out:
        r = mqbench.run_scenario(spec, out)
        assert r.published_count == 40, r
        assert r.received_count == 40 and r.loss_fraction == 0.0, r
        table = r.render("table")
        assert "msg/s" in table and "ms" in table
        back = mqbench.SummaryReport.from_json(r.to_json())
        assert back.received_count == r.received_count
        print(table, end="")
    broker.stop()

    spec.pairs = 0
    assert any("pairs" in v for v in spec.validate())
    try:
        mqbench.run_scenario(spec, "/tmp")
    except ValueError as e:
        assert "pairs" in str(e)
    else:
        raise AssertionError("invalid spec ran")


if __name__ == "__main__":
    codec()
    stats()
    end_to_end()
    print("smoke ok")
