"""Peak memory and step time of training steps as the frame count T grows.

On CPU every configuration runs in a fresh spawned process so the resident
set high-water mark belongs to that configuration alone.  On CUDA the
allocator's peak statistics are used in-process.
"""
from __future__ import annotations

import csv
import logging
import multiprocessing as mp
import statistics
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import asdict, dataclass
from pathlib import Path

import psutil
import torch

from ..training import supervised_loss

log = logging.getLogger(__name__)


@dataclass
class ProfileRecord:
    T: int
    batch_size: int
    peak_memory_bytes: int | None
    workload_bytes: int | None
    seconds_per_step: float | None
    model_tag: str
    device: str
    status: str = "ok"


class PeakMemory:
    """Context manager tracking peak memory of the enclosed block.

    CPU: polls resident set size on a background thread.  The kernel's
    ``ru_maxrss`` is not used: Linux carries it across exec, so a spawned
    worker would inherit its parent's peak.  CUDA: reads allocator peak
    statistics.
    """

    def __init__(self, device="cpu", interval: float = 0.002):
        self.device = torch.device(device)
        self.interval = interval
        self.peak = 0
        self.start = 0

    def __enter__(self):
        if self.device.type == "cuda":
            torch.cuda.synchronize(self.device)
            torch.cuda.reset_peak_memory_stats(self.device)
            self.start = torch.cuda.memory_allocated(self.device)
            return self
        self._proc = psutil.Process()
        self.start = self._proc.memory_info().rss
        self.peak = self.start
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._poll, daemon=True)
        self._thread.start()
        return self

    def _poll(self):
        while not self._stop.is_set():
            self.peak = max(self.peak, self._proc.memory_info().rss)
            self._stop.wait(self.interval)

    def __exit__(self, *exc):
        if self.device.type == "cuda":
            torch.cuda.synchronize(self.device)
            self.peak = torch.cuda.max_memory_allocated(self.device)
            return False
        self._stop.set()
        self._thread.join()
        self.peak = max(self.peak, self._proc.memory_info().rss)
        return False

    @property
    def delta(self) -> int:
        return max(0, self.peak - self.start)


def training_step(model, tokens, targets, optimizer, task_kind="binary"):
    out = model(tokens)
    loss = supervised_loss(out, targets, task_kind)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return out.detach()


def _run_config(model_builder, T: int, batch_size: int, steps: int, device: str, tag: str) -> ProfileRecord:
    torch.manual_seed(0)
    model = model_builder(T).to(device)
    cfg = model.cfg
    opt = torch.optim.AdamW(model.parameters(), lr=1e-5)
    targets = torch.randint(0, 2, (batch_size,), device=device).float()
    try:
        with PeakMemory(device) as mem:
            tokens = torch.randn(batch_size, T, cfg.tokens_per_frame, cfg.d_token, device=device)
            times = []
            for _ in range(steps + 1):  # first step is warm-up
                t0 = time.perf_counter()
                training_step(model, tokens, targets, opt)
                if device.startswith("cuda"):
                    torch.cuda.synchronize()
                times.append(time.perf_counter() - t0)
    except (torch.cuda.OutOfMemoryError, MemoryError, RuntimeError) as exc:
        if isinstance(exc, RuntimeError) and "memory" not in str(exc).lower():
            raise
        log.warning("T=%d ran out of memory: %s", T, exc)
        return ProfileRecord(T, batch_size, None, None, None, tag, device, "oom")
    seconds = statistics.median(times[1:]) if steps else times[0]
    return ProfileRecord(T, batch_size, int(mem.peak), int(mem.delta), seconds, tag, device)


def profile(model_builder, Ts, batch_size: int = 4, steps: int = 2, device: str = "cpu",
            model_tag: str = "tablet", isolate: bool | None = None) -> list[ProfileRecord]:
    """Measure one training step per ``T``; ``model_builder(T)`` must be picklable when isolating."""
    isolate = device == "cpu" if isolate is None else isolate
    records = []
    for T in Ts:
        if not isolate:
            records.append(_run_config(model_builder, T, batch_size, steps, device, model_tag))
            continue
        with ProcessPoolExecutor(max_workers=1, mp_context=mp.get_context("spawn")) as pool:
            try:
                rec = pool.submit(_run_config, model_builder, T, batch_size, steps, device, model_tag).result()
            except BrokenProcessPool:
                log.warning("worker for T=%d died (likely killed for memory)", T)
                rec = ProfileRecord(T, batch_size, None, None, None, model_tag, device, "oom")
        records.append(rec)
        log.info("profiled %s", rec)
    return records


def is_monotone(records, attr: str) -> bool:
    vals = [getattr(r, attr) for r in sorted(records, key=lambda r: r.T) if r.status == "ok"]
    return all(a <= b for a, b in zip(vals, vals[1:]))


def write_profile_csv(records, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(asdict(records[0])))
        writer.writeheader()
        for r in records:
            writer.writerow(asdict(r))
    return path


def read_profile_csv(path) -> list[ProfileRecord]:
    def num(v, kind):
        return None if v in ("", "None") else kind(v)

    with Path(path).open() as fh:
        return [
            ProfileRecord(int(row["T"]), int(row["batch_size"]), num(row["peak_memory_bytes"], int),
                          num(row["workload_bytes"], int), num(row["seconds_per_step"], float),
                          row["model_tag"], row["device"], row["status"])
            for row in csv.DictReader(fh)
        ]


PANELS = (
    ("Peak memory allocation", "T (frames)", "Peak memory (GB)"),
    ("Training time per step", "T (frames)", "Seconds per step"),
)


def plot_profile(records, path=None) -> dict:
    """Two-panel figure: peak memory and step time against T.  Returns plot metadata."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = sorted((r for r in records if r.status == "ok"), key=lambda r: r.T)
    xs = [r.T for r in ok]
    series = ([r.peak_memory_bytes / 2 ** 30 for r in ok], [r.seconds_per_step for r in ok])
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    meta = {"panels": []}
    for ax, (title, xlabel, ylabel), ys in zip(axes, PANELS, series):
        ax.plot(xs, ys, marker="o", label=ok[0].model_tag if ok else "")
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        meta["panels"].append({"title": title, "xlabel": xlabel, "ylabel": ylabel, "x": xs, "n_points": len(xs)})
    fig.tight_layout()
    if path is not None:
        fig.savefig(path, dpi=120)
        meta["path"] = str(path)
    plt.close(fig)
    return meta
