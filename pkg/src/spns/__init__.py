"""Privacy-preserving 5G network slicing over onion-routed RAN circuits.

The stack, bottom up: crypto primitives, the 512-byte cell codec, slice-ID
partitioning, the directory service, UE-side circuit construction, the
RAN/core node state machines, two transports (deterministic simulation and
TCP), and a harness with a benchmark CLI and an anonymity audit.
"""

__version__ = "0.1.0"

from . import cells, circuit, crypto, directory, errors, harness, nodes, nsi, simnet  # noqa: F401
