"""servesim: deterministic discrete-event simulation of tiered-cache,
prefill/decode-disaggregated LLM serving clusters."""

__version__ = "0.1.0"

from .simkernel import EventKind, MetricsStore, PastEvent, Simulator  # noqa: F401
from .workload import Request, WorkloadSpec, generate_trace, load_trace, save_trace  # noqa: F401
