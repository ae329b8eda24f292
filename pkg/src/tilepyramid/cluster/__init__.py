from .wire import Empty, FrameDecoder, Hello, Shutdown, StealRequest, SubtreeUpload, TaskGrant, decode, encode
from .worker import ClusterResult, ClusterWorker, gather, parse_address, run_local_cluster

__all__ = [
    "ClusterResult",
    "ClusterWorker",
    "Empty",
    "FrameDecoder",
    "Hello",
    "Shutdown",
    "StealRequest",
    "SubtreeUpload",
    "TaskGrant",
    "decode",
    "encode",
    "gather",
    "parse_address",
    "run_local_cluster",
]
