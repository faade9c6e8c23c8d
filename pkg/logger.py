"""JSONL run log: one ``LogEntry`` per line, appended by a background task."""

import asyncio
import logging
from pathlib import Path
from typing import Any, Optional

import aiofiles

from models import LogEntry

logger = logging.getLogger(__name__)

_CLOSE = object()


class RunLogger:
    """Event log for one CLI run.

    Used as ``async with RunLogger(...) as run_log``. Events are validated into
    ``LogEntry`` models when posted and serialised by the drain task, so a
    payload that cannot be encoded fails at the call site. Training threads
    post through ``log_threadsafe``.
    """

    def __init__(self, log_path: str = "logs/runs.jsonl", run_id: str = "run", command: str = ""):
        self.log_path = Path(log_path)
        self.run_id = run_id
        self.command = command
        self.written = 0
        self._queue: "asyncio.Queue[Any]" = asyncio.Queue()
        self._drain: Optional[asyncio.Task] = None
        self._loop: Optional[asyncio.AbstractEventLoop] = None

    @property
    def running(self) -> bool:
        return self._drain is not None and not self._drain.done()

    async def __aenter__(self) -> "RunLogger":
        await self.start()
        return self

    async def __aexit__(self, exc_type, exc, tb) -> None:
        await self.stop()

    async def start(self) -> None:
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        self._loop = asyncio.get_running_loop()
        self._drain = asyncio.create_task(self._append_entries())

    async def stop(self) -> None:
        """Flush queued entries and close the file; a second call is a no-op."""
        if self.running:
            await self._queue.put(_CLOSE)
            await self._drain
            logger.debug(f"run log {self.run_id}: {self.written} entries in {self.log_path}")

    async def _append_entries(self) -> None:
        async with aiofiles.open(self.log_path, mode="a") as f:
            while (entry := await self._queue.get()) is not _CLOSE:
                await f.write(entry.model_dump_json() + "\n")
                await f.flush()
                self.written += 1

    def entry(self, event: str, **payload: Any) -> LogEntry:
        return LogEntry(run_id=self.run_id, command=self.command, event=event, payload=payload)

    async def log(self, event: str, **payload: Any) -> None:
        await self._queue.put(self.entry(event, **payload))

    def log_threadsafe(self, event: str, **payload: Any) -> None:
        """Post from a thread other than the one running the event loop."""
        if self._loop is None:
            raise RuntimeError("run log not started")
        self._loop.call_soon_threadsafe(self._queue.put_nowait, self.entry(event, **payload))
