import os
from typing import Optional

from pydantic import BaseModel, Field

MAX_SEED = 2**64 - 1


class HarnessSettings(BaseModel):
    """
    Process-wide defaults, read from the environment.

    Environment variables:
    - UHDIQA_SEED: global seed used when a command gets no --seed (default 0)
    - UHDIQA_WORKERS: worker threads for per-image batch work (default 4)
    - UHDIQA_JOURNAL_URL: SQLAlchemy URL of the run journal (in-memory when unset)
    - UHDIQA_LOG_FILE: path of a rotating log file (console only when unset)
    """

    seed: int = Field(0, ge=0, le=MAX_SEED)
    workers: int = Field(4, ge=1)
    journal_url: Optional[str] = Field(None, min_length=1)
    log_file: Optional[str] = Field(None, min_length=1)

    @classmethod
    def from_env(cls) -> "HarnessSettings":
        values = {
            "seed": os.getenv("UHDIQA_SEED"),
            "workers": os.getenv("UHDIQA_WORKERS"),
            "journal_url": os.getenv("UHDIQA_JOURNAL_URL"),
            "log_file": os.getenv("UHDIQA_LOG_FILE"),
        }
        return cls(**{k: v for k, v in values.items() if v not in (None, "")})
