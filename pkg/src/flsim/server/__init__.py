from .actors import ActorRef, ActorSystem, ChildDied, Terminated, UnknownActor
from .aggregator import Aggregator, MasterAggregator, aggregator_count
from .context import ServerConfig, ServerContext
from .coordinator import Coordinator, split_quota
from .ledger import DuplicateRound, LedgerError, LedgerRecord, RoundLedger, verify_chain
from .lock import Lease, LockService, LockUnavailable
from .selector import Selector, reservoir_sample

__all__ = [
    "ActorRef",
    "ActorSystem",
    "Aggregator",
    "ChildDied",
    "Coordinator",
    "DuplicateRound",
    "Lease",
    "LedgerError",
    "LedgerRecord",
    "LockService",
    "LockUnavailable",
    "MasterAggregator",
    "RoundLedger",
    "Selector",
    "ServerConfig",
    "ServerContext",
    "Terminated",
    "UnknownActor",
    "aggregator_count",
    "reservoir_sample",
    "split_quota",
    "verify_chain",
]
