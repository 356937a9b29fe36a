import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sflc.alloc import SliceAllocator
from sflc.errors import NoSpace, NotMapped, RangeError


def test_first_allocation_is_head_of_permutation():
    a = SliceAllocator(10, rng=random.Random(4))
    head = a.prmslices[0]
    assert a.allocate() == head
    assert sum(a.bfld) == 1 and a.bfld[head]
    a.check()


def test_exhaustion():
    a = SliceAllocator(3, occupied=[1], rng=random.Random(0))
    got = {a.allocate(), a.allocate()}
    assert got == {0, 2}
    with pytest.raises(NoSpace):
        a.allocate()


def test_release_errors():
    a = SliceAllocator(4, rng=random.Random(0))
    with pytest.raises(NotMapped):
        a.release(2)
    with pytest.raises(RangeError):
        a.release(4)
    with pytest.raises(RangeError):
        SliceAllocator(4, occupied=[9])


def test_allocate_release_inverse():
    a = SliceAllocator(16, rng=random.Random(1))
    psis = [a.allocate() for _ in range(16)]
    for p in psis:
        a.release(p)
    assert not any(a.bfld)
    assert sorted(a.prmslices) == list(range(16))
    a.check()


def test_release_beyond_cursor_touches_only_bitfield():
    # a pre-occupied PSI that the cursor has not reached yet
    seed = next(s for s in range(100) if SliceAllocator(8, [5], random.Random(s)).position[5] > 0)
    a = SliceAllocator(8, occupied=[5], rng=random.Random(seed))
    perm, octr = list(a.prmslices), a.octr
    assert a.position[5] >= octr
    a.release(5)
    assert a.prmslices == perm and a.octr == octr
    assert not a.bfld[5]
    a.check()


def test_reinsertion_is_uniform_over_free_set():
    # order [x, a, o, o, o, b] with o pre-occupied: after allocating x and
    # releasing it, the next allocation must be uniform over {x, a, b}
    counts = Counter()
    trials = 30_000
    rng = random.Random(11)
    for _ in range(trials):
        a = SliceAllocator(6, occupied=[2, 3, 4], rng=rng)
        a.prmslices = [0, 1, 2, 3, 4, 5]
        a.position = [0, 1, 2, 3, 4, 5]
        assert a.allocate() == 0
        a.release(0)
        counts[a.allocate()] += 1
    assert set(counts) == {0, 1, 5}
    assert stats.chisquare([counts[0], counts[1], counts[5]]).pvalue > 0.01


def test_reclaimed_slice_frequency():
    # allocate 4 of 12, reclaim one, allocate once more: every free PSI equally likely
    counts = Counter()
    rng = random.Random(5)
    for _ in range(24_000):
        a = SliceAllocator(12, rng=rng)
        taken = [a.allocate() for _ in range(4)]
        a.release(taken[1])
        counts[a.allocate()] += 1
    # the next pick is uniform over the 9 free PSIs; averaged over the random
    # permutation every PSI is equally likely overall
    obs = [counts[p] for p in range(12)]
    assert stats.chisquare(obs).pvalue > 0.01


class SetOracle:
    def __init__(self, n, occupied):
        self.n = n
        self.used = set(occupied)

    def allocate(self, psi):
        assert psi not in self.used and 0 <= psi < self.n
        self.used.add(psi)

    def release(self, psi):
        self.used.remove(psi)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.data())
def test_interleavings_match_oracle(n, data):
    occupied = data.draw(st.sets(st.integers(0, n - 1), max_size=n))
    seed = data.draw(st.integers(0, 2**32))
    a = SliceAllocator(n, occupied, random.Random(seed))
    oracle = SetOracle(n, occupied)
    held = list(occupied)
    for _ in range(data.draw(st.integers(0, 120))):
        if held and data.draw(st.booleans()):
            psi = held.pop(data.draw(st.integers(0, len(held) - 1)))
            a.release(psi)
            oracle.release(psi)
        else:
            if len(oracle.used) == n:
                with pytest.raises(NoSpace):
                    a.allocate()
                continue
            psi = a.allocate()
            oracle.allocate(psi)
            held.append(psi)
        assert a.occupied() == oracle.used
        a.check()
