"""Function library and program execution against an environment."""

from __future__ import annotations

import re

import numpy as np

from ..tensor import DTensor
from ..voxelcore import BinaryMask, VoxelGrid, crop_margin, resample_to, roi_report
from ..voxelcore.grid import DomainError
from .dsl import ModSlot, Num, Program, Str, Var
from .values import Encodings, Env, FeedbackItem, Mask, Number, StepOutcome, Text, Volume, VolumeList


class ExecutionError(RuntimeError):
    """Base for failures raised while running a program."""


class UndefinedVariable(ExecutionError):
    pass


class TypeMismatch(ExecutionError):
    pass


class UnknownFunction(ExecutionError):
    pass


class Executor:
    """Runs programs for one agent loop.

    ``vision`` is a :class:`~voxagent.visionnet.VisionNet` or None. When
    ``oracle_masks`` is given, the k-th ``segment`` call binds the k-th oracle
    mask instead of the thresholded prediction (the prediction is still
    computed and recorded when a vision network is present).
    """

    def __init__(self, vision=None, oracle_masks=None, summary_dim: int = 64):
        self.vision = vision
        self.oracle_masks = list(oracle_masks) if oracle_masks is not None else None
        self.summary_dim = vision.config.summary_dim if vision is not None else summary_dim
        self.segment_calls = 0
        self.masks: list[tuple[str, Mask]] = []

    # argument helpers ------------------------------------------------------

    def _resolve(self, env: Env, arg):
        if isinstance(arg, Var):
            if arg.name not in env:
                raise UndefinedVariable(f"undefined variable '{arg.name}'")
            return env[arg.name]
        if isinstance(arg, Num):
            return Number(arg.value)
        if isinstance(arg, Str):
            return Text(arg.value)
        raise TypeMismatch("<MOD> is only valid after a volume argument")

    def _expect(self, fname, value, kinds, pos):
        if not isinstance(value, kinds):
            names = " or ".join(k.__name__ for k in (kinds if isinstance(kinds, tuple) else (kinds,)))
            raise TypeMismatch(f"{fname}: argument {pos + 1} must be {names}, got {type(value).__name__}")
        return value

    def _arity(self, fname, args, n):
        if len(args) != n:
            raise TypeMismatch(f"{fname} takes {n} argument{'s' if n != 1 else ''}, got {len(args)}")

    # library ---------------------------------------------------------------

    def _encode(self, env, args, phis):
        vols, vphis, names = [], [], []
        i = 0
        while i < len(args):
            v = self._resolve(env, args[i])
            group = list(v.volumes) if isinstance(v, VolumeList) else [v]
            for g in group:
                self._expect("encode", g, Volume, i)
            slots = args[i + 1 : i + 1 + len(group)]
            if len(slots) != len(group) or not all(isinstance(a, ModSlot) for a in slots):
                raise TypeMismatch("encode: every volume argument must be followed by <MOD>")
            for g, s in zip(group, slots):
                vols.append(g.grid)
                names.append(g.name)
                vphis.append(phis[s.ordinal])
            i += 1 + len(group)
        if not vols:
            raise TypeMismatch("encode needs at least one volume")
        if self.vision is not None:
            return Encodings(self.vision.encode(vols, vphis, names))
        return Encodings(_NullEncoding(vols, names, self.summary_dim))

    def _segment(self, env, args, phis, outcome):
        if len(args) != 2 or not isinstance(args[1], ModSlot):
            raise TypeMismatch("segment takes an encoding followed by <MOD>")
        enc = self._expect("segment", self._resolve(env, args[0]), Encodings, 0)
        k = self.segment_calls
        self.segment_calls += 1
        gen = None
        if self.vision is not None and not isinstance(enc.enc, _NullEncoding):
            gen = self.vision.generate(enc.enc, phis[args[1].ordinal])
            outcome.generated.append((gen, k))
        if self.oracle_masks is not None:
            if k >= len(self.oracle_masks):
                raise DomainError(f"no oracle mask for segment call {k + 1}")
            return Mask(self.oracle_masks[k], gen)
        if gen is None:
            raise DomainError("segment needs a vision network or oracle masks")
        return Mask(gen.mask(), gen)

    @staticmethod
    def _on_mask_grid(vol: Volume, m: Mask) -> VoxelGrid:
        g = vol.grid
        if g.same_geometry(m.mask):
            return g
        return resample_to(g, m.mask)

    def _metric(self, fname, env, args):
        if fname in ("volume_of", "extents_of"):
            self._arity(fname, args, 1)
            m = self._expect(fname, self._resolve(env, args[0]), Mask, 0)
            if m.mask.count == 0:
                raise DomainError(f"{fname}: mask is empty")
            ref = VoxelGrid(m.mask.as_float(), m.mask.affine)
            rep = roi_report(ref, m.mask)
            if fname == "volume_of":
                return Number(rep.volume_mm3, "mm3")
            return Number(rep.extents_mm, "mm")
        self._arity(fname, args, 2)
        v = self._expect(fname, self._resolve(env, args[0]), Volume, 0)
        m = self._expect(fname, self._resolve(env, args[1]), Mask, 1)
        if m.mask.count == 0:
            raise DomainError(f"{fname}: mask is empty")
        rep = roi_report(self._on_mask_grid(v, m), m.mask)
        if fname == "mean_in":
            return Number(rep.mean)
        if rep.snr is None:
            raise DomainError("snr_in: intensity std is degenerate inside the mask")
        return Number(rep.snr)

    def _arith(self, fname, env, args):
        self._arity(fname, args, 2)
        a = self._expect(fname, self._resolve(env, args[0]), Number, 0)
        b = self._expect(fname, self._resolve(env, args[1]), Number, 1)
        if a.is_triple or b.is_triple:
            raise TypeMismatch(f"{fname}: arithmetic on extent triples is not supported")
        x, y = float(a.value), float(b.value)
        if fname in ("add", "sub"):
            if a.unit and b.unit and a.unit != b.unit:
                raise TypeMismatch(f"{fname}: unit mismatch {a.unit} vs {b.unit}")
            return Number(x + y if fname == "add" else x - y, a.unit or b.unit)
        if fname == "mul":
            unit = "*".join(u for u in (a.unit, b.unit) if u)
            return Number(x * y, unit)
        if y == 0:
            raise DomainError("div: division by zero")
        if a.unit == b.unit:
            unit = ""
        elif not b.unit:
            unit = a.unit
        else:
            unit = f"{a.unit}/{b.unit}" if a.unit else f"1/{b.unit}"
        return Number(x / y, unit)

    def _mask_op(self, fname, env, args):
        if fname == "crop_to":
            self._arity(fname, args, 3)
            margin = self._expect(fname, self._resolve(env, args[2]), Number, 2)
        else:
            self._arity(fname, args, 2)
        v = self._expect(fname, self._resolve(env, args[0]), Volume, 0)
        m = self._expect(fname, self._resolve(env, args[1]), Mask, 1)
        g = self._on_mask_grid(v, m)
        if fname == "mask_apply":
            return Volume(g.with_values(g.values * m.mask.values))
        if fname == "mask_remove":
            return Volume(g.with_values(g.values * ~m.mask.values))
        return Volume(crop_margin(g, m.mask, float(margin.value)))

    @staticmethod
    def _respond(env, args, resolve):
        if not args:
            raise TypeMismatch("respond needs a template")
        tmpl = resolve(env, args[0])
        if not isinstance(tmpl, Text):
            raise TypeMismatch("respond: template must be a string")
        vals = [resolve(env, a) for a in args[1:]]

        def sub(m):
            k = int(m.group(1))
            if k >= len(vals):
                raise TypeMismatch(f"respond: placeholder {{{k}}} has no argument")
            v = vals[k]
            if isinstance(v, Number):
                return v.render_value()
            if isinstance(v, Text):
                return v.value
            raise TypeMismatch(f"respond: cannot format {type(v).__name__}")

        return re.sub(r"\{(\d+)\}", sub, tmpl.value)

    # driver ----------------------------------------------------------------

    def run_statement(self, stmt, env: Env, phis, outcome: StepOutcome):
        """Execute one statement, binding its result when it has a target."""
        f, args = stmt.call.func, stmt.call.args
        value = None
        if f == "encode":
            value = self._encode(env, args, phis)
        elif f == "segment":
            value = self._segment(env, args, phis, outcome)
        elif f == "read":
            self._arity(f, args, 1)
            v = self._resolve(env, args[0])
            outcome.feedback.append(FeedbackItem(v, v.render()))
        elif f in ("volume_of", "extents_of", "mean_in", "snr_in"):
            value = self._metric(f, env, args)
        elif f in ("add", "sub", "mul", "div"):
            value = self._arith(f, env, args)
        elif f in ("mask_apply", "mask_remove", "crop_to"):
            value = self._mask_op(f, env, args)
        elif f == "respond":
            outcome.answer = self._respond(env, args, self._resolve)
        elif f == "stop":
            self._arity(f, args, 0)
            outcome.stopped = True
        else:
            raise UnknownFunction(f"unknown function '{f}'")
        if isinstance(value, Mask):
            self.masks.append((stmt.target or f"mask{len(self.masks) + 1}", value))
        if stmt.target is not None:
            if value is None:
                raise TypeMismatch(f"{f} returns no value to assign")
            env[stmt.target] = value

    def execute(self, program: Program, env: Env, phis) -> StepOutcome:
        """Run ``program`` in order; the first failure ends the step as an error outcome."""
        phis = list(phis)
        outcome = StepOutcome(ok=True)
        if program.mod_count != len(phis):
            outcome.ok = False
            outcome.error = f"phi count mismatch: program has {program.mod_count} <MOD> slots, got {len(phis)} vectors"
            outcome.feedback.append(FeedbackItem(None, "error: " + outcome.error, error=True))
            return outcome
        for stmt in program.statements:
            try:
                self.run_statement(stmt, env, phis, outcome)
            except (ExecutionError, DomainError, ValueError) as exc:
                outcome.ok = False
                outcome.error = f"line {stmt.line}: {exc}"
                outcome.feedback.append(FeedbackItem(None, "error: " + outcome.error, error=True))
                break
            if outcome.complete:
                break
        return outcome


class _NullEncoding:
    """Stand-in encoding with zero summaries, for harness runs without a vision network."""

    def __init__(self, volumes, names, dim):
        self.reference = volumes[0]
        self.names = names
        self.summary = DTensor(np.zeros((len(volumes), dim), dtype=np.float32))

    @property
    def streams(self):
        return self.summary.shape[0]


def execute(program: Program, env: Env, models=None, phis=(), oracle_masks=None) -> StepOutcome:
    """One-shot execution with a fresh :class:`Executor`."""
    return Executor(models, oracle_masks).execute(program, env, phis)


def to_mask(value) -> BinaryMask:
    return value.mask if isinstance(value, Mask) else value
