import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sflc.errors import DeviceTooSmall, RangeError
from sflc.layout import (
    BLOCK_SIZE,
    DMB_CELL_LEN,
    DMB_CELLS_OFFSET,
    DMB_PADDING_OFFSET,
    IV_LEN,
    MAX_VOLUMES,
    SLICE_LOGICAL,
    SLICE_PHYSICAL,
    UNMAPPED,
    compute_geometry,
    dmb_cell_offset,
    slice_block_address,
)


def test_constants():
    assert SLICE_PHYSICAL == SLICE_LOGICAL + 1
    assert (SLICE_PHYSICAL - SLICE_LOGICAL) * BLOCK_SIZE >= SLICE_LOGICAL * IV_LEN
    assert UNMAPPED == 0xFFFFFFFF
    assert DMB_PADDING_OFFSET == DMB_CELLS_OFFSET + MAX_VOLUMES * DMB_CELL_LEN <= BLOCK_SIZE


def test_one_tib_geometry():
    g = compute_geometry(268_435_456)
    # floor(2**28 / 257); 1_044_496 slices of 257 blocks would exceed the device
    assert g.max_slices_bound == 1_044_495
    assert 257 * 1_044_496 > 2**28
    assert g.pm_payload_blocks == 1021
    assert g.pm_iv_blocks == 4
    assert g.volume_header_blocks == 1026
    assert g.header_blocks == 15_391
    # floor((2**28 - 15_391) / 257)
    assert g.num_slices == 1_044_436
    assert 257 * 1_044_436 <= 2**28 - 15_391 < 257 * 1_044_437
    assert g.usable_bytes / 2**30 == pytest.approx(1019.96, abs=0.005)


def test_small_geometry():
    g = compute_geometry(1000)
    assert (g.max_slices_bound, g.pm_payload_blocks, g.pm_iv_blocks,
            g.volume_header_blocks, g.header_blocks, g.num_slices) == (3, 1, 1, 3, 46, 3)


@pytest.mark.parametrize("n", [0, 1, 46, 46 + 256])
def test_too_small(n):
    with pytest.raises(DeviceTooSmall):
        compute_geometry(n)


def test_slice_block_address_examples():
    g = compute_geometry(1000)
    assert slice_block_address(g, 2, 44) == 605
    assert slice_block_address(g, 0, 0) == 47
    with pytest.raises(RangeError):
        slice_block_address(g, 3, 0)
    with pytest.raises(RangeError):
        slice_block_address(g, 0, SLICE_LOGICAL)


def test_dmb_cells():
    assert dmb_cell_offset(0) == DMB_CELLS_OFFSET
    assert dmb_cell_offset(14) + DMB_CELL_LEN == DMB_PADDING_OFFSET
    with pytest.raises(RangeError):
        dmb_cell_offset(15)


def test_address_injective_small():
    g = compute_geometry(5000)
    addrs = {slice_block_address(g, p, o) for p in range(g.num_slices) for o in range(SLICE_LOGICAL)}
    assert len(addrs) == g.num_slices * SLICE_LOGICAL
    assert min(addrs) >= g.header_blocks and max(addrs) < g.data_end_block
    iv_blocks = {g.slice_start(p) for p in range(g.num_slices)}
    assert not iv_blocks & addrs


@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=100, max_value=10**9))
def test_geometry_invariants(n):
    msb = n // SLICE_PHYSICAL
    payload = -(-msb * 4 // BLOCK_SIZE)
    header = 1 + MAX_VOLUMES * (1 + -(-payload * IV_LEN // BLOCK_SIZE) + payload)
    if n - header < SLICE_PHYSICAL:
        with pytest.raises(DeviceTooSmall):
            compute_geometry(n)
        return
    g = compute_geometry(n)
    assert g == compute_geometry(n)
    assert 1 <= g.num_slices <= g.max_slices_bound == n // SLICE_PHYSICAL
    assert g.pm_payload_blocks == -(-g.max_slices_bound * 4 // BLOCK_SIZE)
    assert g.pm_iv_blocks == -(-g.pm_payload_blocks * IV_LEN // BLOCK_SIZE)
    assert g.header_blocks == 1 + MAX_VOLUMES * g.volume_header_blocks
    assert g.data_start_block + g.num_slices * SLICE_PHYSICAL <= n
    # the slice count is maximal
    assert g.data_start_block + (g.num_slices + 1) * SLICE_PHYSICAL > n
    assert g.max_slices_bound < UNMAPPED

    # regions tile [0, n) without overlap
    regions = g.regions()
    pos = 0
    for _, start, end in regions:
        assert start == pos <= end
        pos = end
    assert pos == n


@settings(max_examples=100, deadline=None)
@given(st.integers(min_value=2000, max_value=10**7), st.data())
def test_address_injective_property(n, data):
    g = compute_geometry(n)
    a = (data.draw(st.integers(0, g.num_slices - 1)), data.draw(st.integers(0, SLICE_LOGICAL - 1)))
    b = (data.draw(st.integers(0, g.num_slices - 1)), data.draw(st.integers(0, SLICE_LOGICAL - 1)))
    same = slice_block_address(g, *a) == slice_block_address(g, *b)
    assert same == (a == b)
