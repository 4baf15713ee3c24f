"""Layered remote attestation: a simulated TPM and platform, a protocol
interpreter, an appraiser, a network front end, and an analyzer for adversary
schedules against measurement orders."""

__version__ = "0.1.0"
