import threading
import uuid
from contextlib import contextmanager
from typing import Iterator


class TraceIdHandler:
    _thread_local = threading.local()

    @staticmethod
    @contextmanager
    def run_scope() -> Iterator[uuid.UUID]:
        TraceIdHandler._thread_local.trace_id = uuid.uuid4()
        try:
            yield TraceIdHandler._thread_local.trace_id
        finally:
            del TraceIdHandler._thread_local.trace_id

    @staticmethod
    def get_current_trace_id() -> uuid.UUID | None:
        return getattr(TraceIdHandler._thread_local, "trace_id", None)
