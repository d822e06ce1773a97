"""Values stored in the persistent environment."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..voxelcore import BinaryMask, VoxelGrid


def format_number(value: float) -> str:
    """One decimal place; shared by answers and feedback so exact matching is well defined."""
    v = round(float(value), 1)
    if v == 0:
        v = 0.0
    return f"{v:.1f}"


@dataclass(frozen=True)
class Volume:
    grid: VoxelGrid
    name: str = ""

    def render(self) -> str:
        x, y, z = self.grid.shape
        return f"volume {x}x{y}x{z}"


@dataclass(frozen=True)
class VolumeList:
    volumes: tuple

    def render(self) -> str:
        return f"{len(self.volumes)} volumes"


@dataclass(frozen=True)
class Encodings:
    enc: object  # visionnet.EncodingSet

    def render(self) -> str:
        return f"<{self.enc.streams} encoding vectors>"


@dataclass(frozen=True)
class Mask:
    mask: BinaryMask
    prob: object = None  # visionnet.GenOutput, kept for losses and reports

    def render(self) -> str:
        return f"mask {self.mask.count} voxels"


@dataclass(frozen=True)
class Number:
    value: float | tuple
    unit: str = ""

    @property
    def is_triple(self) -> bool:
        return isinstance(self.value, tuple)

    def render_value(self) -> str:
        if self.is_triple:
            return " x ".join(format_number(v) for v in self.value)
        return format_number(self.value)

    def render(self) -> str:
        s = self.render_value()
        return f"{s} {self.unit}" if self.unit else s


@dataclass(frozen=True)
class Text:
    value: str

    def render(self) -> str:
        return self.value


class Env:
    """Insertion-ordered variable store that persists across steps."""

    def __init__(self, bindings=None):
        self._vars: dict[str, object] = dict(bindings or {})

    def __getitem__(self, name):
        return self._vars[name]

    def __contains__(self, name):
        return name in self._vars

    def __setitem__(self, name, value):
        # rebinding moves the name to the end, keeping order = last write
        self._vars.pop(name, None)
        self._vars[name] = value

    def __len__(self):
        return len(self._vars)

    def names(self) -> list[str]:
        return list(self._vars)

    def items(self):
        return self._vars.items()

    def copy(self) -> Env:
        return Env(self._vars)


@dataclass
class FeedbackItem:
    """One ``read`` result: either encoding vectors or rendered text."""

    value: object
    rendering: str
    error: bool = False

    @property
    def is_encoding(self) -> bool:
        return isinstance(self.value, Encodings)


@dataclass
class StepOutcome:
    ok: bool
    error: str | None = None
    feedback: list = field(default_factory=list)
    answer: str | None = None
    stopped: bool = False
    generated: list = field(default_factory=list)  # (GenOutput, segment call index)

    @property
    def complete(self) -> bool:
        return self.stopped or self.answer is not None

    def describe(self) -> str:
        return "ok" if self.ok else f"error: {self.error}"
