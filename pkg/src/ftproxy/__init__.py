"""Fault-tolerant request replication for offloaded robot services.

A robot-side proxy sends every request to several service replicas and keeps
the first response; pool, discovery and sizing helpers keep enough replicas
alive to meet an availability target.
"""
from .envelope import (
    MsgType,
    RequestEnvelope,
    RequestId,
    ResponseEnvelope,
    ServiceIdentity,
    Status,
    decode_frame,
    derive_service_identity,
    encode_frame,
)
from .registry import Registry
from .proxy import Gateway, PeerLink, ReplicaAdapter, RobotProxy, Unavailable
from .sizing import required_replicas, system_failure_probability, vm_failure_probability

__version__ = "0.1.0"

__all__ = [
    "MsgType", "RequestEnvelope", "RequestId", "ResponseEnvelope", "ServiceIdentity", "Status",
    "decode_frame", "derive_service_identity", "encode_frame",
    "Registry", "Gateway", "PeerLink", "ReplicaAdapter", "RobotProxy", "Unavailable",
    "required_replicas", "system_failure_probability", "vm_failure_probability",
]
