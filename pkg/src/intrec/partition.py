"""Delimiter-driven split of an interleaved web-host log into request units."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum

from .trace import DelimiterPayload, Event, EventLog, Marker

BACKGROUND = "_background"


class ServerModel(str, Enum):
    THREAD_PER_REQUEST = "thread_per_request"
    COROUTINE = "coroutine"


class PartitionError(Exception):
    def __init__(self, request_id: str, detail: str = ""):
        super().__init__(f"{type(self).__name__}({request_id!r}) {detail}".strip())
        self.request_id = request_id


class DanglingSwitch(PartitionError):
    """switch_in/switch_out for a request that is not live on that thread."""


class NestedBegin(PartitionError):
    """A thread acquired a request while still owning another one."""


class MismatchedEnd(PartitionError):
    pass


class DuplicateRequest(PartitionError):
    pass


class UnknownRequest(KeyError):
    pass


@dataclass(frozen=True, slots=True)
class Segment:
    host: str
    pid: int
    tid: int
    start_ts: int
    end_ts: int

    def contains(self, ev: Event) -> bool:
        return (
            ev.host == self.host
            and ev.pid == self.pid
            and ev.tid == self.tid
            and self.start_ts <= ev.ts <= self.end_ts
        )


@dataclass(slots=True)
class RequestUnit:
    request_id: str
    events: list[Event] = field(default_factory=list)
    begin_ts: int = 0
    end_ts: int = 0
    segments: list[Segment] = field(default_factory=list)
    unclosed: bool = False

    @property
    def owner_threads(self) -> list[tuple[str, int, int]]:
        seen: dict[tuple[str, int, int], None] = {}
        for seg in self.segments:
            seen.setdefault((seg.host, seg.pid, seg.tid), None)
        return list(seen)

    def keys(self) -> set[tuple[str, int]]:
        return {ev.key for ev in self.events}


class PartitionResult(Mapping):
    """request_id -> RequestUnit, including the reserved background unit."""

    def __init__(self, units: dict[str, RequestUnit], diagnostics: list[str]):
        self._units = units
        self.diagnostics = diagnostics

    def __getitem__(self, key: str) -> RequestUnit:
        return self._units[key]

    def __iter__(self):
        return iter(self._units)

    def __len__(self) -> int:
        return len(self._units)

    @property
    def background(self) -> RequestUnit:
        return self._units[BACKGROUND]

    def request_ids(self) -> list[str]:
        return [rid for rid in self._units if rid != BACKGROUND]

    @property
    def unclosed(self) -> list[str]:
        return [rid for rid, u in self._units.items() if u.unclosed]

    def labels(self) -> dict[tuple[str, int], str]:
        """Event key -> owning request id (background included)."""
        out = {}
        for rid, unit in self._units.items():
            for ev in unit.events:
                out[ev.key] = rid
        return out


def partition(log: EventLog, model: ServerModel | str = ServerModel.THREAD_PER_REQUEST) -> PartitionResult:
    model = ServerModel(model)
    units: dict[str, RequestUnit] = {}
    background = RequestUnit(BACKGROUND)
    # thread key -> (request id, segment start ts)
    owner: dict[tuple[str, int, int], tuple[str, int]] = {}
    ended: set[str] = set()
    diagnostics: list[str] = []

    def release(thread, ts):
        rid, start = owner.pop(thread)
        unit = units[rid]
        unit.segments.append(Segment(*thread, start, ts))
        unit.end_ts = max(unit.end_ts, ts)
        return rid

    for ev in log.events:
        thread = (ev.host, ev.pid, ev.tid)
        if isinstance(ev.payload, DelimiterPayload):
            rid = ev.payload.request_id
            marker = ev.payload.marker
            current = owner.get(thread, (None, 0))[0]
            if marker is Marker.BEGIN:
                if rid in units:
                    raise DuplicateRequest(rid, "begin seen twice")
                if current is not None:
                    if model is ServerModel.COROUTINE:
                        raise NestedBegin(rid, f"thread still owns {current!r}")
                    # sequential handler: the next begin closes the previous request
                    release(thread, ev.ts)
                    ended.add(current)
                units[rid] = RequestUnit(rid, begin_ts=ev.ts, end_ts=ev.ts)
                owner[thread] = (rid, ev.ts)
            elif marker is Marker.SWITCH_IN:
                if rid not in units or rid in ended:
                    raise DanglingSwitch(rid, "switch_in without a live begin")
                if current is not None:
                    raise NestedBegin(rid, f"thread still owns {current!r}")
                if any(r == rid for r, _ in owner.values()):
                    raise DanglingSwitch(rid, "request already running on another thread")
                owner[thread] = (rid, ev.ts)
            elif marker is Marker.SWITCH_OUT:
                if current != rid:
                    raise DanglingSwitch(rid, f"switch_out while thread owns {current!r}")
                release(thread, ev.ts)
            else:  # END
                if current != rid:
                    raise MismatchedEnd(rid, f"end while thread owns {current!r}")
                release(thread, ev.ts)
                ended.add(rid)
            continue
        cur = owner.get(thread)
        if cur is None:
            background.events.append(ev)
        else:
            units[cur[0]].events.append(ev)

    log_end = log.end_ts
    for thread in list(owner):
        rid = release(thread, log_end)
        units[rid].end_ts = log_end
    for rid, unit in units.items():
        if rid not in ended:
            unit.unclosed = True
            unit.end_ts = log_end
            diagnostics.append(f"UnclosedRequest({rid!r}) closed at log end")

    if background.events:
        background.begin_ts = background.events[0].ts
        background.end_ts = background.events[-1].ts
    units[BACKGROUND] = background
    return PartitionResult(units, diagnostics)


def unit_for(result: PartitionResult, request_id: str) -> RequestUnit:
    try:
        return result[request_id]
    except KeyError:
        raise UnknownRequest(request_id) from None
