"""Replicate scheduling: serial or process-parallel, with an optional wall-clock budget.

Results always come back ordered by replicate index, so aggregates do not
depend on the number of workers.  When the budget runs out no new replicates
start; the longest completed prefix is returned and ``exhausted`` is set.
"""

from __future__ import annotations

import sys
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait


class Runner:
    def __init__(self, workers: int = 1, budget: float | None = None, progress: bool = False):
        self.workers = max(1, int(workers))
        self.deadline = None if budget is None else time.monotonic() + float(budget)
        self.progress = progress
        self.exhausted = False

    def _out_of_time(self) -> bool:
        return self.deadline is not None and time.monotonic() >= self.deadline

    def _report(self, done: int, total: int):
        if self.progress:
            print(f"\r  {done}/{total}", end="", file=sys.stderr, flush=True)

    def map(self, fn, items) -> list:
        items = list(items)
        if self.workers == 1:
            out = []
            for k, it in enumerate(items):
                if self._out_of_time():
                    self.exhausted = True
                    break
                out.append(fn(it))
                self._report(k + 1, len(items))
            if self.progress:
                print(file=sys.stderr)
            return out
        results: dict[int, object] = {}
        with ProcessPoolExecutor(max_workers=self.workers) as pool:
            pending = {}
            nxt = 0
            while nxt < len(items) or pending:
                while nxt < len(items) and len(pending) < 2 * self.workers and not self._out_of_time():
                    pending[pool.submit(fn, items[nxt])] = nxt
                    nxt += 1
                if nxt < len(items) and self._out_of_time():
                    self.exhausted = True
                    nxt = len(items)
                if not pending:
                    break
                done, _ = wait(pending, return_when=FIRST_COMPLETED)
                for f in done:
                    results[pending.pop(f)] = f.result()
                self._report(len(results), len(items))
        if self.progress:
            print(file=sys.stderr)
        out = []
        for k in range(len(items)):
            if k not in results:
                self.exhausted = True
                break
            out.append(results[k])
        return out


def default_runner(runner: Runner | None) -> Runner:
    return runner if runner is not None else Runner()
