"""Decoder-only language agent: vocabulary, state sequence and greedy decoding."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DTensor, no_grad, ops
from .tensor.module import ParamStore

PAD, BOS, EOS_STEP, MOD = "<PAD>", "<BOS>", "<EOS_STEP>", "<MOD>"
SPECIALS = (PAD, BOS, EOS_STEP, MOD)

_TOKEN_RE = re.compile(r"<MOD>|[A-Za-z_][A-Za-z0-9_]*|[0-9]|\s|[^\sA-Za-z0-9_]")
_FALLBACK_CHARS = [chr(c) for c in range(32, 127)] + ["\n", "\t"]
_BYTE_TOKENS = [f"<0x{b:02X}>" for b in range(128, 256)]


class StateOverflowError(RuntimeError):
    pass


class Vocabulary:
    """Bijective token/id map: specials first, then fallback characters and bytes, then words."""

    def __init__(self, tokens: list[str]):
        if list(tokens[: len(SPECIALS)]) != list(SPECIALS):
            raise ValueError("vocabulary must start with the reserved specials")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    pad_id = 0
    bos_id = 1
    eos_id = 2
    mod_id = 3

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def size(self) -> int:
        return len(self.tokens)

    def _encode_piece(self, piece: str) -> list[int]:
        if piece in self.ids and (piece not in SPECIALS or piece == MOD):
            return [self.ids[piece]]
        out = []
        for ch in piece:
            if ch in self.ids:
                out.append(self.ids[ch])
            else:
                out.extend(self.ids[f"<0x{b:02X}>"] if b >= 128 else self.ids[chr(b)] for b in ch.encode("utf-8"))
        return out

    def tokenize(self, text: str) -> list[int]:
        ids = []
        pos = 0
        for m in _TOKEN_RE.finditer(text):
            if m.start() != pos:
                ids.extend(self._encode_piece(text[pos : m.start()]))
            ids.extend(self._encode_piece(m.group()))
            pos = m.end()
        if pos < len(text):
            ids.extend(self._encode_piece(text[pos:]))
        return ids

    def detokenize(self, ids) -> str:
        buf = bytearray()
        for i in ids:
            tok = self.tokens[int(i)]
            if tok in (PAD, BOS, EOS_STEP):
                continue
            if tok.startswith("<0x") and len(tok) == 6:
                buf.append(int(tok[3:5], 16))
            else:
                buf.extend(tok.encode("utf-8"))
        return buf.decode("utf-8", errors="replace")

    def save(self, path):
        lines = [t.encode("unicode_escape").decode("ascii") for t in self.tokens]
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")

    @classmethod
    def load(cls, path) -> Vocabulary:
        text = Path(path).read_text(encoding="ascii")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls([ln.encode("ascii").decode("unicode_escape") for ln in lines])

    def dumps(self) -> str:
        return "\n".join(t.encode("unicode_escape").decode("ascii") for t in self.tokens)

    @classmethod
    def loads(cls, text: str) -> Vocabulary:
        return cls([ln.encode("ascii").decode("unicode_escape") for ln in text.split("\n")])


def build_vocab(corpus, max_size: int = 512) -> Vocabulary:
    """Deterministic word vocabulary over ``corpus`` lines with character fallback."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus is empty")
    base = list(SPECIALS) + _FALLBACK_CHARS + _BYTE_TOKENS
    taken = set(base)
    counts = Counter()
    for line in corpus:
        for m in _TOKEN_RE.finditer(line):
            w = m.group()
            if len(w) > 1 and w not in taken:
                counts[w] += 1
    words = sorted(counts, key=lambda w: (-counts[w], w))
    room = max(0, max_size - len(base))
    return Vocabulary(base + words[:room])


@dataclass(frozen=True)
class AgentConfig:
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    ffn: int = 128
    max_len: int = 1024
    step_cap: int = 128
    phi_dim: int = 8

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    @classmethod
    def full_scale(cls) -> AgentConfig:
        return cls(layers=16, d_model=512, heads=32, ffn=2048, max_len=4096, step_cap=512, phi_dim=32)


TAGS = ("prompt", "metadata", "instruction", "feedback")


@dataclass(frozen=True)
class StateMu:
    """Agent input sequence as provenance-tagged segments.

    Each segment is ``(tag, payload)`` where the payload is either a tuple of
    token ids (embedded through the token matrix) or a [k, d] array/DTensor
    of feedback vectors entering the sequence directly.
    """

    segments: tuple = ()

    def __len__(self):
        return sum(_seg_len(p) for _, p in self.segments)

    @property
    def tags(self) -> list[str]:
        out = []
        for tag, p in self.segments:
            out.extend([tag] * _seg_len(p))
        return out

    def token_ids(self) -> list[int | None]:
        out = []
        for _, p in self.segments:
            if isinstance(p, tuple):
                out.extend(p)
            else:
                out.extend([None] * _seg_len(p))
        return out


def _seg_len(payload) -> int:
    return len(payload) if isinstance(payload, tuple) else int(payload.shape[0])


def metadata_line(name: str, modality: str, date: str) -> str:
    return f"\nvol {name}: modality={modality}, date={date}"


def initial_state(prompt: str, metadata, vocab: Vocabulary) -> StateMu:
    if not prompt:
        raise ValueError("prompt is empty")
    segs = [("prompt", (vocab.bos_id,) + tuple(vocab.tokenize(prompt)))]
    for name, modality, date in metadata:
        segs.append(("metadata", tuple(vocab.tokenize(metadata_line(name, modality, date)))))
    return StateMu(tuple(segs))


def append_feedback(mu: StateMu, eta_ids, z_segments=(), max_len: int = 1024) -> StateMu:
    """``mu || eta || z``; ``z_segments`` are token tuples or [k, d] vector blocks."""
    segs = list(mu.segments)
    eta = tuple(int(i) for i in eta_ids)
    if eta:
        segs.append(("instruction", eta))
    for z in z_segments:
        if _seg_len(z):
            segs.append(("feedback", z))
    out = StateMu(tuple(segs))
    if len(out) > max_len:
        raise StateOverflowError(f"state length {len(out)} exceeds cap {max_len}")
    return out


@dataclass
class DecodeResult:
    ids: list[int]
    code_text: str
    phi: list[np.ndarray]
    mod_hidden: list[np.ndarray] = field(default_factory=list)
    truncated: bool = False


class AgentNet:
    """Pre-norm causal transformer with a token head and a modulation (phi) head."""

    def __init__(self, vocab_size: int, config: AgentConfig | None = None, seed: int = 0):
        self.config = cfg = config or AgentConfig()
        self.vocab_size = vocab_size
        st = self.store = ParamStore(np.random.default_rng(seed))
        d, f = cfg.d_model, cfg.ffn
        st.add("tok_emb", st.rng.standard_normal((vocab_size, d)) * 0.1)
        st.add("pos_emb", st.rng.standard_normal((cfg.max_len, d)) * 0.02)
        for i in range(cfg.layers):
            st.ones(f"l{i}.norm1", (d,))
            for n in ("q", "k", "v"):
                st.add(f"l{i}.attn.{n}", st.rng.standard_normal((d, d)) / np.sqrt(d))
            st.add(f"l{i}.attn.o", st.rng.standard_normal((d, d)) / np.sqrt(d) / np.sqrt(2 * cfg.layers))
            st.ones(f"l{i}.norm2", (d,))
            st.add(f"l{i}.ffn.w1", st.rng.standard_normal((d, f)) / np.sqrt(d))
            st.zeros(f"l{i}.ffn.b1", (f,))
            st.add(f"l{i}.ffn.w2", st.rng.standard_normal((f, d)) / np.sqrt(f) / np.sqrt(2 * cfg.layers))
            st.zeros(f"l{i}.ffn.b2", (d,))
        st.ones("norm_f", (d,))
        st.add("lm_head", st.rng.standard_normal((d, vocab_size)) / np.sqrt(d))
        st.add("phi.w", st.rng.standard_normal((d, cfg.phi_dim)) / np.sqrt(d))
        st.zeros("phi.b", (cfg.phi_dim,))
        self._mask_cache = {}

    @property
    def params(self):
        return self.store.params

    def embed_tokens(self, ids) -> DTensor:
        return ops.embedding_lookup(self.store["tok_emb"], np.asarray(ids, dtype=np.int64))

    def embed_state(self, mu: StateMu) -> DTensor:
        parts = []
        for _, p in mu.segments:
            if isinstance(p, tuple):
                parts.append(self.embed_tokens(p))
            else:
                parts.append(p if isinstance(p, DTensor) else DTensor(np.asarray(p, dtype=self.store["tok_emb"].dtype)))
        return ops.concat(parts, axis=0) if len(parts) > 1 else parts[0]

    def _causal(self, t, start=0):
        key = (t, start)
        m = self._mask_cache.get(key)
        if m is None:
            m = np.triu(np.full((t, start + t), -1e9, dtype=np.float32), k=start + 1)
            self._mask_cache = {key: m}
        return m

    def forward(self, x: DTensor, cache: dict | None = None) -> DTensor:
        """Hidden states [T, d] for an embedded sequence [T, d].

        With ``cache`` (inference only), ``x`` holds the positions after the
        cached prefix; keys and values of the new positions are appended.
        """
        cfg, p = self.config, self.store
        t, d = x.shape
        start = cache["len"] if cache is not None else 0
        if start + t > cfg.max_len:
            raise StateOverflowError(f"sequence length {start + t} exceeds cap {cfg.max_len}")
        h = ops.add(x, ops.getitem(p["pos_emb"], slice(start, start + t)))
        nh, hd = cfg.heads, d // cfg.heads
        mask = self._causal(t, start)
        for i in range(cfg.layers):
            a = ops.rms_norm(h, p[f"l{i}.norm1"])
            q = ops.transpose(ops.reshape(ops.matmul(a, p[f"l{i}.attn.q"]), (t, nh, hd)), (1, 0, 2))
            k = ops.transpose(ops.reshape(ops.matmul(a, p[f"l{i}.attn.k"]), (t, nh, hd)), (1, 2, 0))
            v = ops.transpose(ops.reshape(ops.matmul(a, p[f"l{i}.attn.v"]), (t, nh, hd)), (1, 0, 2))
            if cache is not None:
                if i < len(cache["k"]):
                    k = DTensor(np.concatenate([cache["k"][i], k.data], axis=2))
                    v = DTensor(np.concatenate([cache["v"][i], v.data], axis=1))
                    cache["k"][i], cache["v"][i] = k.data, v.data
                else:
                    cache["k"].append(k.data)
                    cache["v"].append(v.data)
            scores = ops.add(ops.mul(ops.matmul(q, k), hd**-0.5), mask)
            att = ops.matmul(ops.softmax(scores, axis=-1), v)
            att = ops.reshape(ops.transpose(att, (1, 0, 2)), (t, d))
            h = ops.add(h, ops.matmul(att, p[f"l{i}.attn.o"]))
            f = ops.rms_norm(h, p[f"l{i}.norm2"])
            f = ops.linear(ops.silu(ops.linear(f, p[f"l{i}.ffn.w1"], p[f"l{i}.ffn.b1"])), p[f"l{i}.ffn.w2"], p[f"l{i}.ffn.b2"])
            h = ops.add(h, f)
        if cache is not None:
            cache["len"] = start + t
        return ops.rms_norm(h, p["norm_f"])

    @staticmethod
    def new_cache() -> dict:
        return {"len": 0, "k": [], "v": []}

    def logits(self, hidden: DTensor) -> DTensor:
        return ops.matmul(hidden, self.store["lm_head"])

    def phi_head(self, hidden: DTensor) -> DTensor:
        return ops.linear(hidden, self.store["phi.w"], self.store["phi.b"])


def code_from_ids(ids, vocab: Vocabulary) -> str:
    """Code text of an emitted step: fillers after MOD and EOS_STEP dropped."""
    keep = []
    prev_mod = False
    for i in ids:
        if prev_mod:
            prev_mod = False
            continue
        if i == vocab.eos_id:
            break
        keep.append(i)
        prev_mod = i == vocab.mod_id
    return vocab.detokenize(keep)


def decode_step(mu: StateMu, net: AgentNet, vocab: Vocabulary, cap: int | None = None) -> DecodeResult:
    """Greedy decoding of one instruction step.

    The hidden state computed with a MOD token as input is projected to a
    phi vector; the token it predicts is a filler and is not part of the code.
    """
    cap = cap or net.config.step_cap
    ids: list[int] = []
    phis, hiddens = [], []
    with no_grad():
        cache = net.new_cache()
        x = net.embed_state(mu)
        truncated = True
        for _ in range(cap):
            if cache["len"] + x.shape[0] > net.config.max_len:
                break
            h = net.forward(x, cache).data[-1:]
            last_is_mod = bool(ids) and ids[-1] == vocab.mod_id
            tok = int(np.argmax(net.logits(DTensor(h)).data[0]))
            if last_is_mod:
                hiddens.append(h[0].copy())
                phis.append(net.phi_head(DTensor(h)).data[0].copy())
            ids.append(tok)
            x = DTensor(net.store["tok_emb"].data[tok][None])
            if tok == vocab.eos_id and not last_is_mod:
                truncated = False
                break
    return DecodeResult(ids, code_from_ids(ids, vocab), phis, hiddens, truncated)
