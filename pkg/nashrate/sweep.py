from __future__ import annotations

import asyncio
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

from nashrate.config import settings
from nashrate.pipeline import RunReport, run, write_report, write_summary
from nashrate.scenario import Scenario, apply_overrides
from nashrate.types import SweepJob


logger = logging.getLogger("nashrate.sweep")


def _now_ms() -> int:
    return int(time.time() * 1000)


def expand_grid(grid: Mapping[str, Sequence[Any]]) -> list[dict[str, Any]]:
    if not grid:
        return [{}]
    keys = sorted(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def config_id(name: str, overrides: Mapping[str, Any]) -> str:
    if not overrides:
        return name
    return name + "__" + "__".join(f"{k}={overrides[k]}" for k in sorted(overrides))


class SweepQueue:
    def __init__(self, *, workers: int, tol: Optional[float] = None) -> None:
        self._q: asyncio.Queue[str] = asyncio.Queue()
        self._jobs: dict[str, SweepJob] = {}
        self._scenarios: dict[str, Scenario] = {}
        self._reports: dict[str, RunReport] = {}
        self._workers: list[asyncio.Task] = []
        self._n_workers = max(1, workers)
        self._tol = tol

    async def start_workers(self) -> None:
        logger.info("starting sweep workers: %d", self._n_workers)
        self._workers = [asyncio.create_task(self._worker_loop(idx)) for idx in range(self._n_workers)]

    async def stop_workers(self) -> None:
        for _ in self._workers:
            self._q.put_nowait("__stop__")
        await asyncio.gather(*self._workers, return_exceptions=True)
        self._workers = []

    async def enqueue(self, *, job_id: str, scenario: Scenario) -> None:
        self._jobs[job_id] = SweepJob(
            job_id=job_id,
            scenario_id=job_id,
            status="queued",
            created_at_ms=_now_ms(),
            started_at_ms=None,
            finished_at_ms=None,
            result=None,
            error=None,
        )
        self._scenarios[job_id] = scenario
        await self._q.put(job_id)
        logger.debug("job queued: %s", job_id)

    def fail_now(self, job_id: str, error: str) -> None:
        now = _now_ms()
        self._jobs[job_id] = SweepJob(
            job_id=job_id,
            scenario_id=job_id,
            status="failed",
            created_at_ms=now,
            started_at_ms=None,
            finished_at_ms=now,
            result=None,
            error=error,
        )

    async def join(self) -> None:
        await self._q.join()

    def jobs(self) -> list[SweepJob]:
        return list(self._jobs.values())

    def report(self, job_id: str) -> Optional[RunReport]:
        return self._reports.get(job_id)

    async def _worker_loop(self, idx: int) -> None:
        while True:
            job_id = await self._q.get()
            try:
                if job_id == "__stop__":
                    return
                job = self._jobs[job_id]
                job.status = "running"
                job.started_at_ms = _now_ms()
                logger.info("job started: %s worker=%d", job_id, idx)
                try:
                    report = await asyncio.to_thread(run, self._scenarios[job_id], tol=self._tol)
                    self._reports[job_id] = report
                    job.result = report.summary_row(job_id)
                    job.result["status"] = report.status
                    job.status = "completed"
                    job.error = report.error
                    logger.info("job completed: %s status=%s", job_id, report.status)
                except Exception as e:
                    job.status = "failed"
                    job.error = str(e)
                    logger.exception("job failed: %s", job_id)
                finally:
                    job.finished_at_ms = _now_ms()
            finally:
                self._q.task_done()


@dataclass
class SweepResult:
    jobs: list[SweepJob]
    reports: dict[str, RunReport] = field(default_factory=dict)

    @property
    def rows(self) -> list[dict[str, Any]]:
        return [job.result for job in self.jobs if job.result is not None]

    @property
    def any_failed(self) -> bool:
        return any(job.status == "failed" or (job.result or {}).get("status") == "failed" for job in self.jobs)

    @property
    def out_of_scope_rate(self) -> float:
        """Share of finished runs rejected by the two-positive-rates-per-link filter."""
        finished = [job for job in self.jobs if job.result is not None]
        if not finished:
            return 0.0
        return sum(1 for job in finished if job.result.get("status") == "out_of_scope") / len(finished)


async def _sweep_async(
    template: Scenario,
    grid: Mapping[str, Sequence[Any]],
    workers: int,
    tol: Optional[float],
) -> SweepResult:
    queue = SweepQueue(workers=workers, tol=tol)
    await queue.start_workers()
    order: list[str] = []
    for overrides in expand_grid(grid):
        job_id = config_id(template.name, overrides)
        order.append(job_id)
        try:
            scenario = apply_overrides(template, overrides)
        except Exception as e:
            queue.fail_now(job_id, str(e))
            logger.warning("configuration rejected: %s: %s", job_id, e)
            continue
        await queue.enqueue(job_id=job_id, scenario=scenario)
    await queue.join()
    await queue.stop_workers()
    by_id = {job.job_id: job for job in queue.jobs()}
    jobs = [by_id[job_id] for job_id in order]
    reports = {job_id: rep for job_id in order if (rep := queue.report(job_id)) is not None}
    return SweepResult(jobs=jobs, reports=reports)


def sweep(
    template: Scenario,
    grid: Mapping[str, Sequence[Any]],
    out_dir: Union[str, Path, None] = None,
    *,
    workers: Optional[int] = None,
    tol: Optional[float] = None,
) -> SweepResult:
    workers = settings.SWEEP_WORKERS if workers is None else workers
    result = asyncio.run(_sweep_async(template, grid, workers, tol))
    logger.info("sweep finished: %d configurations, out-of-scope rate %.2f", len(result.jobs), result.out_of_scope_rate)
    if out_dir is not None:
        out = Path(out_dir)
        for job_id, report in result.reports.items():
            write_report(report, out / job_id)
        write_summary(result.rows, out / "summary.csv")
        payload = [
            {
                "job_id": job.job_id,
                "status": job.status,
                "run_status": (job.result or {}).get("status"),
                "error": job.error,
            }
            for job in result.jobs
        ]
        (out / "sweep.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        logger.info("sweep written: %s (%d configurations)", out, len(result.jobs))
    return result
