from shared.compat import StrEnum
from datetime import datetime
from typing import Dict, List, Optional
from uuid import UUID

from pydantic import BaseModel, Field


class LogSeverity(StrEnum):
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARN"
    ERROR = "ERROR"

    @staticmethod
    def as_list() -> List[str]:
        return [s.value for s in LogSeverity]


class LogsFilter(BaseModel):
    trace_id: Optional[UUID] = None
    runs_only: bool
    severity: List[LogSeverity]


class Paging(BaseModel):
    page: int = Field(..., gt=0)
    page_size: int = Field(..., gt=0)


class RunInfo(BaseModel):
    command: str
    arguments: Dict[str, str] = {}
    exit_code: int
    outputs: List[str] = []


class LogEntry(BaseModel):
    timestamp: datetime
    entry_id: Optional[int] = None
    severity: LogSeverity
    trace_id: UUID
    message: str
    run_info: Optional[RunInfo] = None
