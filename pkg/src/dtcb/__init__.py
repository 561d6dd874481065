"""Decentralized trusted computing base simulator.

Layered device identities, attestation evidence and group membership, and a
gateway protocol moving assets between simulated blockchain systems.
"""

__version__ = "0.1.0"
