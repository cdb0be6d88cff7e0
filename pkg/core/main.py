from core.cli_app import CLIApp
from core.harness import Harness
from core.trace_id_handler import TraceIdHandler
from shared.logger import Logger, TraceIdProvider
from shared.run_journal import RunJournal
from shared.run_journal_mock import RunJournalMock
from shared.settings import HarnessSettings

settings = HarnessSettings.from_env()
run_journal = RunJournal(settings.journal_url) if settings.journal_url else RunJournalMock()
logger = Logger(
    TraceIdProvider(lambda: TraceIdHandler.get_current_trace_id()),
    run_journal,
    settings.log_file,
)
harness = Harness(logger)
cli_app = CLIApp(harness, logger, settings, "0.1.0")
app = cli_app.App

if __name__ == "__main__":
    app()
