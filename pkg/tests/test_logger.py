import asyncio
import json
from pathlib import Path

import pytest
from pydantic import ValidationError

from logger import RunLogger


def read_lines(path):
    with open(path, "r") as f:
        return [json.loads(line) for line in f if line.strip()]


@pytest.mark.asyncio
async def test_context_manager_drains_on_exit(temp_log_file):
    """Entries queued inside the block are on disk once it exits."""
    async with RunLogger(temp_log_file, run_id="r1", command="train") as run_log:
        assert run_log.running
        await run_log.log("start")
        await run_log.log("done")
    assert not run_log.running
    assert run_log.written == 2
    assert [e["event"] for e in read_lines(temp_log_file)] == ["start", "done"]


@pytest.mark.asyncio
async def test_stop_twice(temp_log_file):
    run_log = RunLogger(temp_log_file)
    await run_log.start()
    await run_log.stop()
    await run_log.stop()
    assert run_log.written == 0


@pytest.mark.asyncio
async def test_creates_directory(temp_log_file):
    log_path = Path(temp_log_file).parent / "hushdiff_new_dir" / "runs.jsonl"
    async with RunLogger(str(log_path), run_id="r1", command="train") as run_log:
        await run_log.log("start")

    assert log_path.exists()
    log_path.unlink()
    log_path.parent.rmdir()


@pytest.mark.asyncio
async def test_entry_fields(temp_log_file):
    async with RunLogger(temp_log_file, run_id="abc", command="enhance") as run_log:
        await run_log.log("done", records=3, out="runs/abc")

    (entry,) = read_lines(temp_log_file)
    assert entry["run_id"] == "abc"
    assert entry["command"] == "enhance"
    assert entry["event"] == "done"
    assert entry["payload"] == {"records": 3, "out": "runs/abc"}
    assert entry["timestamp"].endswith("Z") or "+00:00" in entry["timestamp"]


@pytest.mark.asyncio
async def test_appends_across_runs(temp_log_file):
    for run_id in ("first", "second"):
        async with RunLogger(temp_log_file, run_id=run_id, command="train") as run_log:
            await run_log.log("start")
    assert [e["run_id"] for e in read_lines(temp_log_file)] == ["first", "second"]


@pytest.mark.asyncio
async def test_keeps_order(temp_log_file):
    async with RunLogger(temp_log_file, run_id="r", command="train") as run_log:
        for epoch in range(1, 6):
            await run_log.log("epoch", epoch=epoch)

    assert [e["payload"]["epoch"] for e in read_lines(temp_log_file)] == [1, 2, 3, 4, 5]


@pytest.mark.asyncio
async def test_threadsafe_post_from_worker(temp_log_file):
    async with RunLogger(temp_log_file, run_id="r", command="train") as run_log:
        await asyncio.to_thread(run_log.log_threadsafe, "epoch", epoch=1, loss=0.5)
        await asyncio.sleep(0)

    (entry,) = read_lines(temp_log_file)
    assert entry["payload"] == {"epoch": 1, "loss": 0.5}


def test_entry_is_validated_at_call_site(temp_log_file):
    run_log = RunLogger(temp_log_file, run_id="r", command="train")
    entry = run_log.entry("epoch", epoch=2)
    assert entry.payload == {"epoch": 2}
    with pytest.raises(ValidationError):
        RunLogger(temp_log_file, run_id=None).entry("epoch")


def test_threadsafe_post_requires_start(temp_log_file):
    with pytest.raises(RuntimeError):
        RunLogger(temp_log_file).log_threadsafe("epoch")
