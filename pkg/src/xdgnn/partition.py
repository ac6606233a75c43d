"""Timeline partitioning into construction / training / validation windows and
leakage-safe supervision records.

Intervals are half-open with an inclusive lower bound: an event exactly at
`construction_end` belongs to the training window. A fourth (test) window is
supported but optional.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .graph_store import NodeRef

logger = logging.getLogger(__name__)

TASK_PCLICK = "pclick"
TASK_PPI = "ppi"


@dataclass(frozen=True)
class WindowSpec:
    construction_end: int
    train_end: int
    validation_end: int
    test_end: Optional[int] = None  # fourth period; unused unless set

    def __post_init__(self):
        if not (self.construction_end < self.train_end < self.validation_end):
            raise ValueError(
                f"windows must be ordered: construction_end={self.construction_end} "
                f"< train_end={self.train_end} < validation_end={self.validation_end}")
        if self.test_end is not None and self.test_end <= self.validation_end:
            raise ValueError("test_end must exceed validation_end")


@dataclass
class TrainingExample:
    member: NodeRef
    item: NodeRef
    label_ts: int
    labels: dict[str, int]
    label_mask: dict[str, int]


@dataclass
class ImpressionEvent:
    """One delivered item with its observed click outcome."""
    member: NodeRef
    item: NodeRef
    timestamp: int
    clicked: int


@dataclass
class DownstreamEvent:
    """A post-click action (like, comment, long dwell) on the clicked item."""
    member: NodeRef
    item: NodeRef
    timestamp: int
    action: str = "like"


@dataclass
class PartitionResult:
    construction: list
    train: list
    validation: list
    test: list = field(default_factory=list)
    dropped: int = 0


def _default_ts(event) -> int:
    for attr in ("label_ts", "timestamp"):
        v = getattr(event, attr, None)
        if v is not None:
            return int(v)
    if isinstance(event, (int, float)):
        return int(event)
    raise ValueError(f"event {event!r} carries no timestamp")


def partition(events: Iterable, window: WindowSpec,
              ts_of: Callable = _default_ts) -> PartitionResult:
    """Bucket timestamped events into the window periods.

    t < construction_end               -> construction
    construction_end <= t < train_end  -> train
    train_end <= t < validation_end    -> validation
    [validation_end, test_end)         -> test, when a fourth window is set
    anything later is dropped.
    """
    res = PartitionResult([], [], [])
    for ev in events:
        t = ts_of(ev)
        if t < window.construction_end:
            res.construction.append(ev)
        elif t < window.train_end:
            res.train.append(ev)
        elif t < window.validation_end:
            res.validation.append(ev)
        elif window.test_end is not None and t < window.test_end:
            res.test.append(ev)
        else:
            res.dropped += 1
    return res


def derive_ppi_labels(impressions: Sequence[ImpressionEvent],
                      downstream: Sequence[DownstreamEvent],
                      window_ms: int) -> tuple[list[int], list[int], int]:
    """Per-impression downstream-interaction labels.

    A clicked impression gets label 1 iff some downstream event on the same
    (member, item) lands in [click_ts, click_ts + window_ms); its mask is 1.
    Non-clicked impressions get mask 0: the task is undefined without a click.
    Downstream events matching no clicked impression are dropped with a warning.

    Returns (labels, masks, n_orphans), aligned with `impressions`.
    """
    clicked_at: dict[tuple[NodeRef, NodeRef], list[int]] = {}
    for imp in impressions:
        if imp.clicked:
            clicked_at.setdefault((imp.member, imp.item), []).append(imp.timestamp)
    matched: set[tuple[NodeRef, NodeRef]] = set()
    orphans = 0
    hit: dict[tuple[NodeRef, NodeRef, int], bool] = {}
    for ev in downstream:
        key = (ev.member, ev.item)
        times = clicked_at.get(key, ())
        found = False
        for ct in times:
            if ct <= ev.timestamp < ct + window_ms:
                hit[(ev.member, ev.item, ct)] = True
                found = True
        if found:
            matched.add(key)
        else:
            orphans += 1
    if orphans:
        logger.warning("dropped %d downstream events with no matching click", orphans)
    labels, masks = [], []
    for imp in impressions:
        if imp.clicked:
            labels.append(1 if hit.get((imp.member, imp.item, imp.timestamp)) else 0)
            masks.append(1)
        else:
            labels.append(0)
            masks.append(0)
    return labels, masks, orphans


def build_examples(impressions: Sequence[ImpressionEvent],
                   downstream: Sequence[DownstreamEvent],
                   ppi_window_ms: int) -> list[TrainingExample]:
    ppi, mask, _ = derive_ppi_labels(impressions, downstream, ppi_window_ms)
    return [
        TrainingExample(imp.member, imp.item, imp.timestamp,
                        labels={TASK_PCLICK: imp.clicked, TASK_PPI: p},
                        label_mask={TASK_PCLICK: 1, TASK_PPI: m})
        for imp, p, m in zip(impressions, ppi, mask)
    ]


def split_by_time(examples: Sequence[TrainingExample],
                  fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> tuple[list, list, list]:
    """Chronological split; boundaries are timestamps, never shuffled indices.

    Examples sharing a boundary timestamp stay in the earlier split, so the
    realized sizes can deviate from the requested fractions under heavy ties.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    if not examples:
        return [], [], []
    ts = np.array([e.label_ts for e in examples], dtype=np.int64)
    q1 = float(np.quantile(ts, fractions[0], method="higher"))
    q2 = float(np.quantile(ts, fractions[0] + fractions[1], method="higher"))
    a = [e for e in examples if e.label_ts <= q1]
    b = [e for e in examples if q1 < e.label_ts <= q2]
    c = [e for e in examples if e.label_ts > q2]
    return a, b, c


# ---------------------------------------------------------------------------
# examples TSV: member_id<TAB>item_id<TAB>label_ts<TAB>click<TAB>ppi_or_dash
# ---------------------------------------------------------------------------

class ExamplesFormatError(ValueError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


def write_examples_tsv(examples: Iterable[TrainingExample]) -> str:
    lines = []
    for e in examples:
        ppi = str(e.labels.get(TASK_PPI, 0)) if e.label_mask.get(TASK_PPI, 0) else "-"
        lines.append(f"{e.member.local_id}\t{e.item.local_id}\t{e.label_ts}"
                     f"\t{e.labels[TASK_PCLICK]}\t{ppi}")
    return "\n".join(lines) + ("\n" if lines else "")


def read_examples_tsv(lines: Iterable[str], member_type: str = "member",
                      item_type: str = "notification") -> list[TrainingExample]:
    out = []
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ExamplesFormatError(line_no, f"expected 5 fields, got {len(parts)}")
        try:
            member_id, item_id, label_ts = int(parts[0]), int(parts[1]), int(parts[2])
            click = int(parts[3])
        except ValueError:
            raise ExamplesFormatError(line_no, f"bad integer field in {line!r}")
        if click not in (0, 1):
            raise ExamplesFormatError(line_no, f"click must be 0/1, got {parts[3]!r}")
        if parts[4] == "-":
            ppi, ppi_mask = 0, 0
        else:
            try:
                ppi = int(parts[4])
            except ValueError:
                raise ExamplesFormatError(line_no, f"bad ppi field {parts[4]!r}")
            if ppi not in (0, 1):
                raise ExamplesFormatError(line_no, f"ppi must be 0/1 or '-', got {parts[4]!r}")
            ppi_mask = 1
        out.append(TrainingExample(
            NodeRef(member_type, member_id), NodeRef(item_type, item_id), label_ts,
            labels={TASK_PCLICK: click, TASK_PPI: ppi},
            label_mask={TASK_PCLICK: 1, TASK_PPI: ppi_mask}))
    return out
