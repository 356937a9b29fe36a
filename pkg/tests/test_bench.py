import random

import pytest

from sflc import bench
from sflc.layout import SLICE_LOGICAL


def test_space_efficiency():
    assert bench.space_efficiency(0, 0) == 0.0
    assert bench.space_efficiency(SLICE_LOGICAL, 1) == 1.0
    assert bench.space_efficiency(SLICE_LOGICAL, 4) == 0.25


def test_simulator_is_seeded():
    def trace(seed):
        writes = []
        sim = bench.FsSimulator(20_000, random.Random(seed), writes.append)
        for _ in range(50):
            sim.add_file()
        return writes

    assert trace(1) == trace(1)
    assert trace(1) != trace(2)


def test_simulator_fills_without_overflow():
    writes = []
    sim = bench.FsSimulator(5000, random.Random(0), writes.append)
    while not sim.full:
        sim.add_file()
    assert max(writes) < 5000
    assert len(sim.written) == 5000


def test_frag_zero_and_sequential():
    res = bench.fragmentation_benchmark(64, seed=0, workload="sequential", checkpoints=(0.0, 0.5))
    assert res.points[0] == (0.0, 0.0)
    assert res.efficiency_at(0.5) >= 0.97


def test_frag_mixed_points():
    res = bench.fragmentation_benchmark(16, seed=3, checkpoints=(0.25, 0.5, 0.9))
    assert len(res.points) == 3
    assert all(0 < eff <= 1 for _, eff in res.points)
    assert "occupancy" in res.to_text()


def test_unknown_workload():
    with pytest.raises(ValueError):
        bench.fragmentation_benchmark(8, workload="zigzag")


@pytest.mark.parametrize("mode", bench.THROUGHPUT_MODES)
def test_throughput_modes(mode):
    s = bench.throughput_benchmark(mode, size_mib=1)
    b = bench.throughput_benchmark(mode, size_mib=1, baseline=True)
    assert s.bytes_moved == b.bytes_moved == 1 << 20
    assert s.mb_per_s > 0 and b.mb_per_s > 0
    assert (s.target, b.target) == ("sflc", "baseline")


def test_baseline_round_trip(tmp_path):
    path = tmp_path / "p.img"
    path.write_bytes(bytes(4096 * 4))
    dev = bench.PlainCtrImage(path, bytes(32))
    dev.write(2, b"q" * 4096)
    assert dev.read(2) == b"q" * 4096
    dev.close()
    with pytest.raises(ValueError):
        bench.throughput_benchmark("sideways")
