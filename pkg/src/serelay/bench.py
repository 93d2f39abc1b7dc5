"""Round-trip delay benchmark harness with histogram binning and CSV export.

Repeats one command/response cycle through a chosen access path and bins
the reader-side round-trip delays. The default layout is 160 bins of 50 ms
where the last bin collects everything at or above 7950 ms; zoomed layouts
are a matter of passing a different width/count.

By default the binned value per repetition is the sampled path delay alone,
which keeps seeded runs bit-identical across repeats. Opting into
``include_compute_time`` adds the host's actual processing time for the
command; at desk scale that is microseconds and vanishes next to the
models, but it makes the bin counts subject to scheduler jitter.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

from .apdu import CommandApdu
from .hexutil import parse_hex
from .latency import AccessPath, LatencyModel, LatencyParams
from .secure_element import ChannelOrigin, SecureElement

# SELECT card manager by its 7-byte name: 13-byte command, 105-byte response
BENCH_SELECT_APDU = parse_hex("00A4040007A000000003535000")
BENCH_RESPONSE_LEN = 105


class BenchmarkError(Exception):
    """The benchmark path did not deliver usable responses."""


@dataclass
class Histogram:
    """Fixed-width histogram whose final bin absorbs the overflow."""

    bin_width_ms: float = 50.0
    bin_count: int = 160
    counts: list[int] = field(default_factory=list)
    total: int = 0

    def __post_init__(self) -> None:
        if self.bin_width_ms <= 0:
            raise ValueError("bin_width_ms must be positive")
        if self.bin_count < 2:
            raise ValueError("bin_count must be at least 2")
        if not self.counts:
            self.counts = [0] * self.bin_count
        if len(self.counts) != self.bin_count:
            raise ValueError("counts length must equal bin_count")

    @property
    def overflow_threshold_ms(self) -> float:
        return self.bin_width_ms * (self.bin_count - 1)

    def add(self, delay_ms: float) -> None:
        if delay_ms < 0:
            raise ValueError("negative delay")
        index = int(delay_ms // self.bin_width_ms)
        if index >= self.bin_count - 1:
            index = self.bin_count - 1
        self.counts[index] += 1
        self.total += 1


def _fmt(value: float) -> str:
    return f"{value:g}"


def histogram_to_csv(hist: Histogram) -> str:
    """CSV rendering: one row per bin, the last row labelled as overflow."""
    lines = ["bin_start_ms,bin_end_ms,count"]
    for i, count in enumerate(hist.counts):
        start = i * hist.bin_width_ms
        if i == hist.bin_count - 1:
            lines.append(f"{_fmt(start)},overflow,{count}")
        else:
            lines.append(f"{_fmt(start)},{_fmt(start + hist.bin_width_ms)},{count}")
    return "\n".join(lines) + "\n"


def histogram_from_csv(text: str) -> Histogram:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or lines[0] != "bin_start_ms,bin_end_ms,count":
        raise ValueError("missing histogram CSV header")
    rows = lines[1:]
    if len(rows) < 2:
        raise ValueError("histogram CSV needs at least two bins")
    counts: list[int] = []
    width: Optional[float] = None
    for i, row in enumerate(rows):
        start_s, end_s, count_s = row.split(",")
        start = float(start_s)
        counts.append(int(count_s))
        if i < len(rows) - 1:
            row_width = float(end_s) - start
            if width is None:
                width = row_width
            elif abs(row_width - width) > 1e-9:
                raise ValueError(f"inconsistent bin width in row {i}")
        elif end_s != "overflow":
            raise ValueError("final row must be the overflow bin")
        if width is not None and abs(start - i * width) > 1e-9:
            raise ValueError(f"row {i} does not start on a bin boundary")
    assert width is not None
    return Histogram(
        bin_width_ms=width,
        bin_count=len(rows),
        counts=counts,
        total=sum(counts),
    )


def render_ascii(hist: Histogram, max_width: int = 60) -> str:
    """Bar chart of the occupied bins, for eyeballing a run."""
    peak = max(hist.counts) if hist.total else 0
    lines = [f"total={hist.total} bins={hist.bin_count} width={_fmt(hist.bin_width_ms)}ms"]
    for i, count in enumerate(hist.counts):
        if count == 0:
            continue
        start = i * hist.bin_width_ms
        label = (
            f">={_fmt(hist.overflow_threshold_ms)}"
            if i == hist.bin_count - 1
            else f"{_fmt(start)}-{_fmt(start + hist.bin_width_ms)}"
        )
        bar = "#" * max(1, round(count / peak * max_width))
        lines.append(f"{label:>14} ms |{bar} {count}")
    return "\n".join(lines)


@dataclass(frozen=True)
class BenchmarkSpec:
    """One benchmark run: path, workload command, repetitions and layout."""

    path: AccessPath = AccessPath.DIRECT_EXTERNAL
    repetitions: int = 5000
    seed: int = 0
    command: bytes = BENCH_SELECT_APDU
    bin_width_ms: float = 50.0
    bin_count: int = 160
    params: Optional[LatencyParams] = None
    include_compute_time: bool = False

    def __post_init__(self) -> None:
        if self.repetitions <= 0:
            raise ValueError("repetitions must be positive")


def run_benchmark(spec: BenchmarkSpec, se: Optional[SecureElement] = None) -> Histogram:
    """Measure ``spec.repetitions`` command/response round trips."""
    se = se if se is not None else SecureElement()
    origin = (
        ChannelOrigin.CONTACTLESS
        if spec.path is AccessPath.DIRECT_EXTERNAL
        else ChannelOrigin.INTERNAL
    )
    try:
        cmd = CommandApdu.parse(spec.command)
    except Exception as exc:
        raise BenchmarkError(f"workload command does not parse: {exc}") from exc
    model = LatencyModel(spec.path, spec.seed, spec.params)
    hist = Histogram(bin_width_ms=spec.bin_width_ms, bin_count=spec.bin_count)
    se.open_session(origin)
    for _ in range(spec.repetitions):
        started = time.perf_counter()
        resp = se.process(origin, cmd)
        compute_ms = (time.perf_counter() - started) * 1000.0
        if not resp.is_success:
            raise BenchmarkError(
                f"path {spec.path.value} unavailable: workload answered {resp.sw:04X}"
            )
        delay = model.sample_ms()
        if spec.include_compute_time:
            delay += compute_ms
        hist.add(delay)
    se.close_session(origin)
    return hist
