import logging
import sys
from datetime import datetime
from logging.handlers import RotatingFileHandler
from typing import Callable, List, Optional
from uuid import UUID

from shared.models import LogEntry, LogSeverity, RunInfo, LogsFilter, Paging
from shared.run_journal_interface import IRunJournal


class TraceIdProvider:
    def __init__(self, get_trace_id: Callable[[], UUID | None]):
        self.get_trace_id: Callable[[], UUID | None] = get_trace_id

    def get_current(self) -> UUID | None:
        return self.get_trace_id()


class Logger:
    _UNSCOPED_TRACE_ID = UUID("00000000-0000-0000-0000-000000000000")

    LOGGER_NAME = "uhdiqa"
    MAX_FILE_SIZE = 10 * 1024 * 1024  # 10 MB
    BACKUP_COUNT = 5
    LOGLEVEL = logging.DEBUG
    FORMAT = "%(asctime)s - %(levelname)s - %(message)s"

    def __init__(
        self,
        trace_id_provider: TraceIdProvider,
        run_journal: IRunJournal,
        log_file: Optional[str] = None,
        level: int = LOGLEVEL,
    ) -> None:
        self.run_journal = run_journal
        self.trace_id_provider = trace_id_provider
        self.logger = logging.getLogger(self.LOGGER_NAME)
        self.logger.setLevel(level)
        self.logger.propagate = False
        self.logger.handlers.clear()

        # stdout carries command output, so the console handler uses stderr
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(level)
        console_handler.setFormatter(logging.Formatter(self.FORMAT))
        self.logger.addHandler(console_handler)

        if log_file:
            file_handler = RotatingFileHandler(
                log_file, maxBytes=self.MAX_FILE_SIZE, backupCount=self.BACKUP_COUNT
            )
            file_handler.setLevel(level)
            file_handler.setFormatter(logging.Formatter(self.FORMAT))
            self.logger.addHandler(file_handler)

    def log(
        self,
        severity: LogSeverity,
        message: str,
        run_info: Optional[RunInfo] = None,
    ) -> int:
        log_entry = LogEntry(
            timestamp=datetime.now(),
            severity=severity,
            message=message,
            trace_id=self.trace_id_provider.get_current() or self._UNSCOPED_TRACE_ID,
            run_info=run_info,
        )

        log_message = f"[TraceID: {log_entry.trace_id}] - {log_entry.message}"
        if log_entry.run_info:
            log_message += f" - Command: {log_entry.run_info.command}"
        self.logger.log(logging.getLevelName(severity.name), log_message)

        log_entry.entry_id = self.run_journal.insert_log(log_entry)
        return log_entry.entry_id

    def debug(self, message: str) -> int:
        return self.log(LogSeverity.DEBUG, message)

    def info(self, message: str) -> int:
        return self.log(LogSeverity.INFO, message)

    def warning(self, message: str) -> int:
        return self.log(LogSeverity.WARNING, message)

    def error(self, message: str) -> int:
        return self.log(LogSeverity.ERROR, message)

    def get_logs(self, filters: LogsFilter, paging: Paging) -> List[LogEntry]:
        return self.run_journal.get_logs(filters, paging)

    def get_log_entry(self, log_id: int) -> Optional[LogEntry]:
        return self.run_journal.get_log_entry(log_id)
