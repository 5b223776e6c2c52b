"""Saddlepoint and normal approximations of the RCUs finite-blocklength bound
for pilot-assisted transmission over block-fading SISO and massive-MIMO links."""

from .density import FadeSample, LinkParams, RocError, bits_to_nats, nats_to_bits
from .numerics import StreamKey

__all__ = ["FadeSample", "LinkParams", "RocError", "StreamKey", "bits_to_nats", "nats_to_bits"]
__version__ = "0.1.0"
