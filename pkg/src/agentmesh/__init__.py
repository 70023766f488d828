"""agentmesh: a mobile-agent service mesh.

Stateful agents migrate atomically between station daemons discovered
through a lease-based registry, carrying signed code-bundle references
verified under a fingerprint trust model.
"""

__version__ = "0.1.0"
