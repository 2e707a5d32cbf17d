from .client import ChannelHandle, Notification, OrchestratorClient
from .server import OrchestratorServer
from .service import HEAP_MODE_PRIVATE, HEAP_MODE_SHARED, OrchestratorCore
from .wire import HeapInfo, HolderId, LeaseInfo

__all__ = [
    "ChannelHandle",
    "HeapInfo",
    "HolderId",
    "LeaseInfo",
    "Notification",
    "OrchestratorClient",
    "OrchestratorCore",
    "OrchestratorServer",
    "HEAP_MODE_PRIVATE",
    "HEAP_MODE_SHARED",
]
