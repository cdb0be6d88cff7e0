from typing import List, Optional

from sqlalchemy import (
    create_engine,
    Column,
    Integer,
    String,
    DateTime,
    Enum,
    JSON,
)
from sqlalchemy.orm import declarative_base, sessionmaker

from shared.models import LogEntry, LogsFilter, Paging, LogSeverity, RunInfo
from shared.run_journal_interface import IRunJournal

_Base = declarative_base()


class LogEntryModel(_Base):
    __tablename__ = "log_entries"

    id = Column(Integer, primary_key=True, autoincrement=True)
    timestamp = Column(DateTime(timezone=True), nullable=False)
    severity = Column(Enum(LogSeverity))
    message = Column(String)
    trace_id = Column(String)
    run_info = Column(JSON(none_as_null=True))


class RunJournal(IRunJournal):
    """
    SQLAlchemy-backed journal of log entries and command runs.

    Any SQLAlchemy URL works; the CLI passes UHDIQA_JOURNAL_URL, typically
    ``sqlite:///uhdiqa_runs.db``. The table is created on first use.
    """

    def __init__(self, url: str):
        self.engine = create_engine(url)
        self.Session = sessionmaker(bind=self.engine)
        _Base.metadata.create_all(self.engine)

    def insert_log(self, log_entry: LogEntry) -> int:
        with self.Session() as session:
            db_log_entry = LogEntryModel(
                timestamp=log_entry.timestamp,
                severity=log_entry.severity,
                message=log_entry.message,
                trace_id=str(log_entry.trace_id),
                run_info=(
                    log_entry.run_info.model_dump() if log_entry.run_info else None
                ),
            )
            session.add(db_log_entry)
            session.commit()
            return db_log_entry.id

    def get_logs(self, filters: LogsFilter, paging: Paging) -> List[LogEntry]:
        with self.Session() as session:
            query = session.query(LogEntryModel)

            if filters.trace_id:
                query = query.filter(LogEntryModel.trace_id == str(filters.trace_id))

            if filters.runs_only:
                query = query.filter(LogEntryModel.run_info.isnot(None))

            if filters.severity:
                query = query.filter(
                    LogEntryModel.severity.in_(list(filters.severity))
                )

            query = query.order_by(
                LogEntryModel.timestamp.desc(), LogEntryModel.id.desc()
            )
            query = query.limit(paging.page_size).offset(
                (paging.page - 1) * paging.page_size
            )

            return [self._to_entry(result) for result in query.all()]

    def get_log_entry(self, log_id: int) -> Optional[LogEntry]:
        with self.Session() as session:
            result = (
                session.query(LogEntryModel).filter(LogEntryModel.id == log_id).first()
            )
            return self._to_entry(result) if result else None

    @staticmethod
    def _to_entry(result: LogEntryModel) -> LogEntry:
        return LogEntry(
            entry_id=result.id,
            timestamp=result.timestamp,
            severity=result.severity,
            message=result.message,
            trace_id=result.trace_id,
            run_info=(
                RunInfo.model_validate(result.run_info) if result.run_info else None
            ),
        )
