"""Randomized lazy slice allocation over a shuffled PSI array.

``prmslices`` is a random permutation of all PSIs, ``bfld`` the occupation
bitfield and ``octr`` a cursor such that every entry of ``prmslices[:octr]``
is occupied. Allocating scans forward from the cursor to the first free PSI;
releasing moves the freed PSI back behind the cursor at a random position.
"""

from __future__ import annotations

import random
from collections.abc import Iterable

from .errors import NoSpace, NotMapped, RangeError

# rejection draws before falling back to an explicit scan of the free positions
_MAX_DRAWS = 64


class SliceAllocator:
    def __init__(self, num_slices: int, occupied: Iterable[int] = (), rng: random.Random | None = None):
        if num_slices < 1:
            raise ValueError("need at least one slice")
        self.num_slices = num_slices
        self.rng = rng or random.SystemRandom()
        self.bfld = bytearray(num_slices)
        for psi in occupied:
            if not 0 <= psi < num_slices:
                raise RangeError(f"PSI {psi} out of range")
            self.bfld[psi] = 1
        self.free_count = num_slices - sum(self.bfld)
        self.prmslices = list(range(num_slices))
        self.rng.shuffle(self.prmslices)  # Fisher-Yates
        self.position = [0] * num_slices
        for i, psi in enumerate(self.prmslices):
            self.position[psi] = i
        self.octr = 0

    def is_free(self, psi: int) -> bool:
        return not self.bfld[psi]

    def occupied(self) -> set[int]:
        return {psi for psi, bit in enumerate(self.bfld) if bit}

    def _swap(self, i: int, j: int) -> None:
        prm = self.prmslices
        prm[i], prm[j] = prm[j], prm[i]
        self.position[prm[i]] = i
        self.position[prm[j]] = j

    def allocate(self, volume: int | None = None) -> int:
        """Claim the next free PSI in shuffled order.

        ``volume`` is unused here; subclasses may specialise per volume.
        """
        prm, bfld, n = self.prmslices, self.bfld, self.num_slices
        while self.octr < n and bfld[prm[self.octr]]:
            self.octr += 1
        if self.octr == n:
            raise NoSpace("no free physical slice left")
        psi = prm[self.octr]
        bfld[psi] = 1
        self.free_count -= 1
        self.octr += 1
        return psi

    def release(self, psi: int) -> None:
        """Free ``psi`` and re-insert it uniformly among the free entries past the cursor."""
        if not 0 <= psi < self.num_slices:
            raise RangeError(f"PSI {psi} out of range")
        if not self.bfld[psi]:
            raise NotMapped(f"PSI {psi} is not occupied")
        self.bfld[psi] = 0
        self.free_count += 1
        k = self.position[psi]
        if k >= self.octr:
            return  # not scanned yet, nothing to reshuffle
        top = self.octr - 1
        self._swap(k, top)
        self._swap(self._random_free_position(top), top)
        self.octr = top

    def _random_free_position(self, lo: int) -> int:
        # Uniform over positions p >= lo holding a free PSI; position lo is free.
        prm, bfld, n = self.prmslices, self.bfld, self.num_slices
        if self.free_count == 1:
            return lo
        for _ in range(_MAX_DRAWS):
            j = self.rng.randrange(lo, n)
            if not bfld[prm[j]]:
                return j
        return self.rng.choice([p for p in range(lo, n) if not bfld[prm[p]]])

    def check(self) -> None:
        """Assert the structural invariants (used by tests)."""
        assert sorted(self.prmslices) == list(range(self.num_slices))
        assert all(self.prmslices[self.position[p]] == p for p in range(self.num_slices))
        assert all(self.bfld[p] for p in self.prmslices[: self.octr])
        assert self.free_count == self.num_slices - sum(self.bfld)
