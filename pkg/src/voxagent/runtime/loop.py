"""Feedback construction, agent policies, transcripts and the instruction loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..agent import AgentNet, StateMu, StateOverflowError, Vocabulary, append_feedback, decode_step, initial_state
from ..voxelcore import VoxelGrid, write_volume
from .dsl import DslSyntaxError, parse
from .library import Executor
from .values import Env, FeedbackItem, Volume


@dataclass
class FeedbackBlock:
    """Feedback ``z`` for one step: token runs and raw vector blocks, in read order."""

    segments: list = field(default_factory=list)
    rendering: list[str] = field(default_factory=list)

    def __len__(self):
        return sum(len(s) if isinstance(s, tuple) else int(s.shape[0]) for s in self.segments)

    def vectors(self, net: AgentNet) -> np.ndarray:
        """Materialized [len, d] embeddings."""
        parts = []
        for s in self.segments:
            if isinstance(s, tuple):
                parts.append(net.store["tok_emb"].data[list(s)])
            else:
                parts.append(np.asarray(getattr(s, "data", s)))
        if not parts:
            return np.zeros((0, net.config.d_model), dtype=np.float32)
        return np.concatenate(parts, axis=0)


def embed_feedback(items: list[FeedbackItem], vocab: Vocabulary) -> FeedbackBlock:
    """Encoding reads pass their summary vectors through; everything else is rendered text."""
    block = FeedbackBlock()
    for item in items:
        if item.is_encoding:
            block.segments.append(item.value.enc.summary)
        else:
            block.segments.append(tuple(vocab.tokenize(item.rendering)))
        block.rendering.append(item.rendering)
    return block


def step_token_ids(code: str, vocab: Vocabulary) -> list[int]:
    """Token ids an agent emits for ``code``: a PAD filler after every MOD, then EOS_STEP."""
    out = []
    for i in vocab.tokenize(code):
        out.append(i)
        if i == vocab.mod_id:
            out.append(vocab.pad_id)
    out.append(vocab.eos_id)
    return out


@dataclass
class Proposal:
    ids: list[int]
    code: str
    phis: list
    truncated: bool = False


class ModelPolicy:
    """Greedy decoding with a trained agent network."""

    def __init__(self, net: AgentNet, vocab: Vocabulary):
        self.net = net
        self.vocab = vocab

    def propose(self, mu: StateMu, step: int) -> Proposal:
        res = decode_step(mu, self.net, self.vocab)
        return Proposal(res.ids, res.code_text, res.phi, res.truncated)


class OraclePolicy:
    """Replays a fixed list of step programs; phi vectors are zeros unless given."""

    def __init__(self, steps: list[str], vocab: Vocabulary, phi_dim: int = 8, phis=None):
        self.steps = list(steps)
        self.vocab = vocab
        self.phi_dim = phi_dim
        self.phis = phis

    def propose(self, mu: StateMu, step: int) -> Proposal:
        if step >= len(self.steps):
            code = ""
        else:
            code = self.steps[step]
        ids = step_token_ids(code, self.vocab)
        n = sum(1 for i in ids if i == self.vocab.mod_id)
        if self.phis is not None:
            phis = list(self.phis[step])
        else:
            phis = [np.zeros(self.phi_dim, dtype=np.float32) for _ in range(n)]
        return Proposal(ids, code, phis)


@dataclass
class VolumeInput:
    name: str
    grid: VoxelGrid
    modality: str = "T1w"
    date: str = "2024-01-01"


@dataclass
class StepRecord:
    code: str
    phi_count: int
    outcome: str
    feedback: list[str]
    state_len: int
    eta_len: int
    z_len: int
    truncated: bool = False


@dataclass
class Transcript:
    prompt: str
    steps: list[StepRecord] = field(default_factory=list)
    answer: str | None = None
    masks: list = field(default_factory=list)  # (name, Mask value)
    complete: bool = False
    final_state_len: int = 0
    overflow: bool = False

    @property
    def valid(self) -> bool:
        return self.complete and all(s.outcome == "ok" for s in self.steps)

    def dumps(self, mask_files=None) -> str:
        lines = ["# transcript", f"prompt: {_one_line(self.prompt)}"]
        for i, s in enumerate(self.steps, 1):
            lines.append(f"[step {i}]")
            lines.append("code:")
            lines.extend("  " + ln for ln in (s.code.splitlines() or [""]))
            lines.append(f"phi_count: {s.phi_count}")
            lines.append(f"outcome: {_one_line(s.outcome)}")
            lines.append("feedback:")
            lines.extend("  " + _one_line(f) for f in s.feedback)
        lines.append("[final]")
        lines.append(f"answer: {_one_line(self.answer) if self.answer is not None else ''}")
        lines.append(f"complete: {'true' if self.complete else 'false'}")
        for name, path in mask_files or []:
            lines.append(f"mask: {name} {path}")
        return "\n".join(lines) + "\n"


def _one_line(s: str) -> str:
    return s.replace("\\", "\\\\").replace("\n", "\\n")


def parse_transcript(text: str) -> dict:
    """Inverse of :meth:`Transcript.dumps` into plain dicts, for the trace viewer."""
    out = {"prompt": "", "steps": [], "answer": None, "complete": False, "masks": []}
    cur, section = None, None
    for raw in text.splitlines():
        if raw.startswith("# "):
            continue
        if raw.startswith("prompt: "):
            out["prompt"] = _unescape(raw[8:])
        elif raw.startswith("[step "):
            cur = {"code": [], "phi_count": 0, "outcome": "", "feedback": []}
            out["steps"].append(cur)
        elif raw == "[final]":
            cur = None
        elif raw == "code:":
            section = "code"
        elif raw == "feedback:":
            section = "feedback"
        elif raw.startswith("  ") and cur is not None:
            cur[section].append(raw[2:] if section == "code" else _unescape(raw[2:]))
        elif raw.startswith("phi_count: "):
            cur["phi_count"] = int(raw[11:])
        elif raw.startswith("outcome: "):
            cur["outcome"] = _unescape(raw[9:])
        elif raw.startswith("answer: "):
            out["answer"] = _unescape(raw[8:])
        elif raw.startswith("answer:"):
            out["answer"] = ""
        elif raw.startswith("complete: "):
            out["complete"] = raw[10:] == "true"
        elif raw.startswith("mask: "):
            name, path = raw[6:].split(" ", 1)
            out["masks"].append((name, path))
    for s in out["steps"]:
        s["code"] = "\n".join(s["code"])
    return out


def _unescape(s: str) -> str:
    out, i = [], 0
    while i < len(s):
        if s[i] == "\\" and i + 1 < len(s):
            out.append("\n" if s[i + 1] == "n" else s[i + 1])
            i += 2
        else:
            out.append(s[i])
            i += 1
    return "".join(out)


def agent_loop(
    prompt: str,
    volumes: list[VolumeInput],
    policy,
    vocab: Vocabulary,
    executor: Executor | None = None,
    max_steps: int = 8,
    max_len: int = 1024,
) -> Transcript:
    """Decode, parse, execute and feed back until ``respond``/``stop`` or ``max_steps``."""
    executor = executor or Executor()
    env = Env({v.name: Volume(v.grid, v.name) for v in volumes})
    mu = initial_state(prompt, [(v.name, v.modality, v.date) for v in volumes], vocab)
    tr = Transcript(prompt)
    for step in range(max_steps):
        prop = policy.propose(mu, step)
        try:
            program = parse(prop.code)
        except DslSyntaxError as exc:
            outcome_text = f"error: syntax: {exc}"
            items = [FeedbackItem(None, outcome_text, error=True)]
            outcome = None
        else:
            outcome = executor.execute(program, env, prop.phis)
            outcome_text = outcome.describe()
            items = outcome.feedback
        block = embed_feedback(items, vocab)
        tr.steps.append(
            StepRecord(prop.code, len(prop.phis), outcome_text, block.rendering, len(mu), len(prop.ids), len(block), prop.truncated)
        )
        try:
            mu = append_feedback(mu, prop.ids, block.segments, max_len=max_len)
        except StateOverflowError:
            tr.overflow = True
            break
        if outcome is not None and outcome.complete:
            tr.answer = outcome.answer
            tr.complete = True
            break
    tr.masks = list(executor.masks)
    tr.final_state_len = len(mu)
    return tr


def save_transcript(tr: Transcript, out_dir, stem: str = "run") -> Path:
    """Write the transcript text plus one VXV1 file per produced mask."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (name, m) in enumerate(tr.masks, 1):
        fname = f"{stem}_mask{i}_{name}.vxv"
        write_volume(out_dir / fname, m.mask)
        files.append((name, fname))
    path = out_dir / f"{stem}.transcript.txt"
    path.write_text(tr.dumps(files))
    return path
