"""Key-sharing protocol: wire format, channels, device and TTP agents."""

from .agents import DeviceAgent, Enrollment, KeyRecord, TrustedThirdParty
from .messages import Message, decode_message, encode_message
from .otp import bits_to_bytes, bytes_to_bits, xor_decrypt, xor_encrypt
from .transport import DeviceServer, LoopbackChannel, SocketChannel, Transcript

__all__ = [
    "DeviceAgent",
    "DeviceServer",
    "Enrollment",
    "KeyRecord",
    "LoopbackChannel",
    "Message",
    "SocketChannel",
    "Transcript",
    "TrustedThirdParty",
    "bits_to_bytes",
    "bytes_to_bits",
    "decode_message",
    "encode_message",
    "xor_decrypt",
    "xor_encrypt",
]
