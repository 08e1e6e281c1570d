"""Spiral serialization of a patch grid: the eight schemes, forward and reverse
modes, and the permutation round trip used inside every block."""
import torch

from diffma.spiral import Mode, ScanScheme, apply_permutation, build_spiral, format_ranks, invert_permutation, scheme_for_block, visit_ranks

for sid in (0, 3):
    for mode in Mode:
        s = ScanScheme.from_id(sid, mode)
        print(f"scheme {sid} ({s.corner.name}, {s.chirality.name}), {mode.name}:")
        print(format_ranks(visit_ranks(4, 5, s)), "\n")

# Block i scans with scheme i mod 8 in both modes.
print("block schemes:", [(scheme_for_block(i)[0].scheme_id, scheme_for_block(i)[1].mode.name) for i in range(3)])

tokens = torch.arange(20.0).reshape(1, 20, 1)
p = build_spiral(4, 5, ScanScheme.from_id(5))
assert torch.equal(invert_permutation(apply_permutation(tokens, p), p), tokens)
print("gather / scatter round trip is exact")
