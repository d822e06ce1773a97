"""Instructable volume encoder and generator.

Both arms share one layer recipe per resolution level: a native-resolution
3x3x3 convolution, mixing of the instruction vector into every voxel, an
attention step across input streams, and group normalization. Each input
volume is one stream; all streams of a call share the weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTensor, ops
from .tensor.module import ParamStore
from .voxelcore import DomainError, Spacing, VoxelGrid, prepare, resample_to
from .voxelcore.geometry import resampled_length


@dataclass(frozen=True)
class NetConfig:
    levels: int = 4
    top_channels: int = 8
    deep_channels: int = 16
    attn_dim: int = 8
    summary_dim: int = 64
    phi_dim: int = 8

    def __post_init__(self):
        for name in ("levels", "top_channels", "deep_channels", "attn_dim", "summary_dim", "phi_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.levels < 2:
            raise ValueError("levels must be at least 2")

    @classmethod
    def full_scale(cls) -> NetConfig:
        return cls(levels=6, top_channels=32, deep_channels=96, attn_dim=32, summary_dim=512, phi_dim=32)

    def channels(self, level: int) -> int:
        return self.top_channels if level == 0 else self.deep_channels


def spacing_schedule(s0: Spacing, levels: int) -> list[Spacing]:
    """Per-level spacings: in-plane doubles, slices stay put until in-plane catches up."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    out = [s0]
    for _ in range(levels - 1):
        cur = out[-1]
        inp = 2.0 * cur.s_inp
        sep = s0.s_sep if cur.omega > 2 else inp
        out.append(Spacing(inp, sep))
    return out


def level_shapes(shape, schedule: list[Spacing]) -> list[tuple[int, int, int]]:
    shapes = [tuple(shape)]
    for prev, nxt in zip(schedule[:-1], schedule[1:]):
        x, y, z = shapes[-1]
        if nxt.s_sep == prev.s_sep:
            nz = z
        else:
            nz = resampled_length(z, prev.s_sep, nxt.s_sep)
        shapes.append((-(-x // 2), -(-y // 2), nz))
    return shapes


def native_conv(x, w, b, spacing: Spacing):
    """3x3x3 convolution, or slice-wise 2D with the central kernel slice when slices are thick."""
    if spacing.omega > 2:
        return ops.conv2d_slicewise(x, w, b)
    return ops.conv3d(x, w, b)


def _channels_last(x):
    return ops.transpose(x, (0, 2, 3, 4, 1))


def _channels_first(x):
    return ops.transpose(x, (0, 4, 1, 2, 3))


def phi_mix(a, phi, w, b=None):
    """Concatenate per-stream ``phi`` [S, p] to every voxel of ``a`` [S, c, X, Y, Z] and project back to c."""
    s, c = a.shape[:2]
    grid = a.shape[2:]
    phi = ops.reshape(phi, (s, phi.shape[-1], 1, 1, 1))
    phi_b = ops.broadcast_to(phi, (s, phi.shape[1]) + tuple(grid))
    cat = _channels_last(ops.concat([a, phi_b], axis=1))
    return _channels_first(ops.linear(cat, w, b))


def stream_attention(a, wq, wk, wv, wf, bf=None):
    """Attention across streams at every voxel, with a residual connection.

    ``a`` is [S, c, X, Y, Z]; ``wq``/``wk``/``wv`` are [c, b] and ``wf`` is [b, c].
    """
    s, c = a.shape[:2]
    grid = a.shape[2:]
    b = wq.shape[1]
    vox = ops.reshape(ops.transpose(a, (2, 3, 4, 0, 1)), (-1, s, c))
    q = ops.matmul(vox, wq)
    k = ops.matmul(vox, wk)
    v = ops.matmul(vox, wv)
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))), b**-0.5)
    attn = ops.softmax(scores, axis=-1)
    mixed = ops.linear(ops.matmul(attn, v), wf, bf)
    out = ops.add(mixed, vox)
    return ops.transpose(ops.reshape(out, tuple(grid) + (s, c)), (3, 4, 0, 1, 2))


@dataclass
class EncodingSet:
    """Multi-level stream features plus one pooled summary vector per stream."""

    features: list  # per level, DTensor [S, c, X, Y, Z]
    summary: DTensor  # [S, d]
    schedule: list[Spacing]
    shapes: list[tuple[int, int, int]]
    reference: VoxelGrid
    names: list[str] = field(default_factory=list)

    @property
    def streams(self) -> int:
        return self.summary.shape[0]

    def summary_vectors(self) -> list:
        return [ops.getitem(self.summary, i) for i in range(self.streams)]


@dataclass
class GenOutput:
    prob: DTensor  # [X, Y, Z] on the reference geometry
    reference: VoxelGrid
    logit: DTensor | None = None  # pre-sigmoid values, for logit-space losses

    @property
    def prob_map(self) -> VoxelGrid:
        return VoxelGrid(self.prob.data.astype(np.float32), self.reference.affine)

    def mask(self, threshold: float = 0.5):
        from .voxelcore import BinaryMask

        return BinaryMask(self.prob.data > threshold, self.reference.affine)


class VisionNet:
    """Encoder (down arm) and generator (up arm) sharing one parameter store."""

    def __init__(self, config: NetConfig | None = None, seed: int = 0):
        self.config = config or NetConfig()
        self.store = ParamStore(np.random.default_rng(seed))
        self._build()

    # parameters ------------------------------------------------------------

    def _block(self, prefix, cin, cout):
        cfg, st = self.config, self.store
        st.normal(f"{prefix}.conv.w", (cout, cin, 3, 3, 3), fan_in=27 * cin)
        st.zeros(f"{prefix}.conv.b", (cout,))
        st.normal(f"{prefix}.mix.w", (cout + cfg.phi_dim, cout), fan_in=cout + cfg.phi_dim)
        st.zeros(f"{prefix}.mix.b", (cout,))
        for n in ("q", "k", "v"):
            st.add(f"{prefix}.attn.{n}", st.rng.standard_normal((cout, cfg.attn_dim)) / np.sqrt(cout))
        st.add(f"{prefix}.attn.f", st.rng.standard_normal((cfg.attn_dim, cout)) * 0.5 / np.sqrt(cfg.attn_dim))
        st.zeros(f"{prefix}.attn.fb", (cout,))

    def _build(self):
        cfg = self.config
        L = cfg.levels
        cin = 1
        for n in range(L):
            self._block(f"enc{n}", cin, cfg.channels(n))
            cin = cfg.channels(n)
        self.store.normal("summary.w", (cfg.deep_channels, cfg.summary_dim), fan_in=cfg.deep_channels)
        self.store.zeros("summary.b", (cfg.summary_dim,))
        self._block(f"gen{L - 1}", cfg.channels(L - 1), cfg.channels(L - 1))
        for n in range(L - 2, -1, -1):
            self._block(f"gen{n}", cfg.channels(n + 1) + cfg.channels(n), cfg.channels(n))
        self.store.normal("out.w", (1, cfg.top_channels, 3, 3, 3), fan_in=27 * cfg.top_channels)
        self.store.zeros("out.b", (1,))

    @property
    def params(self) -> dict[str, DTensor]:
        return self.store.params

    # forward ---------------------------------------------------------------

    def _apply_block(self, prefix, x, phi, spacing):
        p = self.store
        h = ops.silu(native_conv(x, p[f"{prefix}.conv.w"], p[f"{prefix}.conv.b"], spacing))
        h = ops.silu(phi_mix(h, phi, p[f"{prefix}.mix.w"], p[f"{prefix}.mix.b"]))
        h = stream_attention(
            h, p[f"{prefix}.attn.q"], p[f"{prefix}.attn.k"], p[f"{prefix}.attn.v"], p[f"{prefix}.attn.f"], p[f"{prefix}.attn.fb"]
        )
        return ops.group_norm(h)

    def _phi(self, phi, streams: int):
        phi = phi if isinstance(phi, DTensor) else DTensor(np.asarray(phi, dtype=np.float32))
        if phi.ndim == 1:
            phi = ops.broadcast_to(ops.reshape(phi, (1, -1)), (streams, phi.shape[0]))
        if phi.shape != (streams, self.config.phi_dim):
            raise DomainError(f"expected phi of shape ({streams}, {self.config.phi_dim}), got {phi.shape}")
        return phi

    @staticmethod
    def conform_streams(volumes: list[VoxelGrid]) -> tuple[VoxelGrid, np.ndarray]:
        """Prepare the first volume and resample the rest onto its grid."""
        ref = prepare(volumes[0])
        arrs = [ref.values]
        for v in volumes[1:]:
            arrs.append(resample_to(prepare(v), ref).values)
        return ref, np.stack(arrs).astype(np.float32)

    def encode(self, volumes: list[VoxelGrid], phis, names=None) -> EncodingSet:
        if not volumes:
            raise DomainError("encode needs at least one volume")
        phis = list(phis) if not isinstance(phis, DTensor) else phis
        if len(phis) != len(volumes):
            raise DomainError(f"{len(volumes)} volumes but {len(phis)} phi vectors")
        s = len(volumes)
        phi = phis if isinstance(phis, DTensor) else ops.concat([ops.reshape(_as_dt(p), (1, -1)) for p in phis], axis=0)
        phi = self._phi(phi, s)
        ref, stack = self.conform_streams(volumes)
        schedule = spacing_schedule(ref.spacing, self.config.levels)
        shapes = level_shapes(ref.shape, schedule)
        x = DTensor(stack[:, None])
        feats = []
        for n in range(self.config.levels):
            h = self._apply_block(f"enc{n}", x, phi, schedule[n])
            feats.append(h)
            if n + 1 < self.config.levels:
                x = self._downsample(h, schedule[n], schedule[n + 1], shapes[n + 1])
        pooled = ops.global_max(feats[-1])
        summary = ops.linear(pooled, self.store["summary.w"], self.store["summary.b"])
        return EncodingSet(feats, summary, schedule, shapes, ref, list(names or []))

    @staticmethod
    def _downsample(h, cur: Spacing, nxt: Spacing, shape):
        if nxt.s_sep == cur.s_sep:
            return ops.max_pool(h, (2, 2, 1))
        if nxt.s_sep == 2 * cur.s_sep:
            return ops.max_pool(h, (2, 2, 2))
        pooled = ops.max_pool(h, (2, 2, 1))
        return ops.trilinear_resize(pooled, shape, (1.0, 1.0, nxt.s_sep / cur.s_sep))

    @staticmethod
    def _upsample(g, fine: Spacing, coarse: Spacing, shape):
        ratios = (fine.s_inp / coarse.s_inp, fine.s_inp / coarse.s_inp, fine.s_sep / coarse.s_sep)
        return ops.trilinear_resize(g, shape, ratios)

    def generate(self, enc: EncodingSet, phi) -> GenOutput:
        L = self.config.levels
        if len(enc.features) != L:
            raise DomainError(f"encoding has {len(enc.features)} levels, generator expects {L}")
        phi = self._phi(_as_dt(phi), enc.streams)
        g = self._apply_block(f"gen{L - 1}", enc.features[-1], phi, enc.schedule[-1])
        for n in range(L - 2, -1, -1):
            up = self._upsample(g, enc.schedule[n], enc.schedule[n + 1], enc.shapes[n])
            g = self._apply_block(f"gen{n}", ops.concat([up, enc.features[n]], axis=1), phi, enc.schedule[n])
        logits = native_conv(g, self.store["out.w"], self.store["out.b"], enc.schedule[0])
        # one ROI per call: stream logits are averaged onto the reference grid
        logit = ops.mean(ops.reshape(logits, (enc.streams,) + tuple(enc.shapes[0])), axis=0)
        return GenOutput(ops.sigmoid(logit), enc.reference, logit)


def _as_dt(x) -> DTensor:
    return x if isinstance(x, DTensor) else DTensor(np.asarray(x, dtype=np.float32))
