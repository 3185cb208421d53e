"""Binary neural network engine with learnable filter-mask pruning.

Dense tensors are plain numpy arrays (row-major, filter index leading).
BitTensor stores the same data bitpacked 64 values per word for
XNOR/popcount arithmetic.
"""

from binprune.bintensor import BitTensor, pack_bits, unpack_bits, xnor_popcount_dot

__all__ = ["BitTensor", "pack_bits", "unpack_bits", "xnor_popcount_dot"]
