"""A burst buffer for bursty checkpoint I/O.

Clients push checkpoint records to a ring of servers (placed by Ketama
consistent hashing or per-client isolation); servers buffer them in memory
with spillover to a local log, replicate along the ring, and drain each epoch
to a backing directory with a two-phase shuffle.
"""

from .client import Client, bb_close, bb_flush, bb_open, bb_read, bb_wait, bb_write
from .cluster import ClusterConfig, LocalCluster
from .manager import Manager
from .server import Server, ServerConfig

__version__ = "0.1.0"

__all__ = ["Client", "ClusterConfig", "LocalCluster", "Manager", "Server", "ServerConfig", "bb_close", "bb_flush",
           "bb_open", "bb_read", "bb_wait", "bb_write"]
