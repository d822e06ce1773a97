"""Task instances: prompt, volumes, ground-truth program and oracle targets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..runtime import Executor, OraclePolicy, VolumeInput, agent_loop
from ..voxelcore import BinaryMask
from .grammar import Grammar, default_grammar, expand_prompt
from .lesion import HEMISPHERES, INTENSITY_CLASSES, LesionSpec, regrow, synth_lesion
from .phantom import STRUCTURE_LAYOUT, make_phantom

TASK_KINDS = ("segment", "roi_metric", "compare_multi", "longitudinal", "classify_intensity", "classify_location")
STRUCTURES = tuple(STRUCTURE_LAYOUT)


@dataclass
class TaskConfig:
    shape: tuple[int, int, int] = (24, 24, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.5)
    contrasts: tuple[str, ...] = ("T1w", "FLAIR")
    noise: float = 0.02
    rois: tuple[str, ...] = STRUCTURES + ("lesion",)
    lesion_radius: tuple[float, float] = (2.0, 3.2)
    growth: tuple[float, float] = (1.15, 1.6)
    dates: tuple[str, str] = ("2023-03-14", "2024-03-12")


@dataclass
class TaskInstance:
    kind: str
    prompt: str
    volumes: list[VolumeInput]
    steps: list[str]  # phi*, one program text per agent step
    mod_targets: list[list[str]]  # per step, what each <MOD> conditions
    masks: list[BinaryMask]  # W*, in segment-call order
    answer: str | None
    label: str | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def mod_count(self) -> int:
        return sum(len(m) for m in self.mod_targets)


def _mods(step: str) -> int:
    return step.count("<MOD>")


def _encode_step(names: list[str]) -> str:
    lines = []
    if len(names) == 1:
        lines.append(f"e = encode({names[0]}, <MOD>)")
        lines.append("read(e)")
    else:
        for i, n in enumerate(names, 1):
            lines.append(f"e{i} = encode({n}, <MOD>)")
        lines.extend(f"read(e{i})" for i in range(1, len(names) + 1))
    return "\n".join(lines)


def _lesion_spec(rng, cfg: TaskConfig, target="brain", classes=None) -> LesionSpec:
    if classes is None:
        classes = {c: INTENSITY_CLASSES[int(rng.integers(3))] for c in cfg.contrasts}
    return LesionSpec(
        target=target,
        radius=float(rng.uniform(*cfg.lesion_radius)),
        classes=classes,
        heterogeneous=bool(rng.random() < 0.3),
    )


def _volume(name, grid, modality, date):
    return VolumeInput(name, grid, modality, date)


def _scene(rng, cfg: TaskConfig, lesion: bool, target="brain"):
    """Phantom plus an optional lesion; returns (phantom, volumes per contrast, lesion or None)."""
    ph = make_phantom(rng, shape=cfg.shape, spacing=cfg.spacing, contrasts=cfg.contrasts, noise=cfg.noise)
    if not lesion:
        return ph, dict(ph.volumes), None
    les = synth_lesion(ph, _lesion_spec(rng, cfg, target), rng)
    return ph, les.volumes, les


def _roi_mask(name, ph, les) -> BinaryMask:
    return les.mask if name == "lesion" else ph.mask(name)


def _pick(rng, options):
    return options[int(rng.integers(len(options)))]


def build_task(kind: str, grammar: Grammar | None = None, rng: np.random.Generator | None = None, config: TaskConfig | None = None, seed: int | None = None) -> TaskInstance:
    """Assemble one instance of ``kind``; the expected answer comes from running phi* on the oracle masks."""
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}")
    grammar = grammar or default_grammar()
    cfg = config or TaskConfig()
    if rng is None:
        rng = np.random.default_rng(seed)
    con = _pick(rng, list(cfg.contrasts))
    label = None
    meta: dict = {"contrast": con}

    if kind in ("segment", "roi_metric"):
        roi = _pick(rng, list(cfg.rois))
        ph, vols, les = _scene(rng, cfg, roi == "lesion")
        volumes = [_volume("v1", vols[con], con, cfg.dates[0])]
        masks = [_roi_mask(roi, ph, les)]
        bindings = {"roi": [roi]}
        steps = [_encode_step(["v1"])]
        mods = [["v1"]]
        if kind == "segment":
            steps.append("m = segment(e, <MOD>)\nstop()")
            mods.append([roi])
        else:
            steps.append("m = segment(e, <MOD>)\nx = volume_of(m)\nread(x)")
            steps.append(f'respond("The {roi} volume is {{0}} mm3.", x)')
            mods += [[roi], []]
        label = roi
    elif kind == "compare_multi":
        rois = [r for r in cfg.rois if r != "lesion"]
        i, j = rng.choice(len(rois), size=2, replace=False)
        roi, roi2 = rois[int(i)], rois[int(j)]
        ph, vols, les = _scene(rng, cfg, False)
        volumes = [_volume("v1", vols[con], con, cfg.dates[0])]
        masks = [ph.mask(roi), ph.mask(roi2)]
        bindings = {"roi": [roi], "roi2": [roi2]}
        steps = [
            _encode_step(["v1"]),
            "m1 = segment(e, <MOD>)\nm2 = segment(e, <MOD>)\na = volume_of(m1)\nb = volume_of(m2)\nd = sub(a, b)\nread(d)",
            'respond("The volume difference is {0} mm3.", d)',
        ]
        mods = [["v1"], [roi, roi2], []]
        label = f"{roi}|{roi2}"
    elif kind == "longitudinal":
        ph, vols, les = _scene(rng, cfg, True)
        scale = float(rng.uniform(*cfg.growth))
        m2, vols2 = regrow(ph, les, scale, rng)
        volumes = [_volume("v1", vols[con], con, cfg.dates[0]), _volume("v2", vols2[con], con, cfg.dates[1])]
        masks = [les.mask, m2]
        bindings = {"roi": ["lesion"]}
        steps = [
            _encode_step(["v1", "v2"]),
            "m1 = segment(e1, <MOD>)\nm2 = segment(e2, <MOD>)\na = volume_of(m1)\nb = volume_of(m2)\ng = sub(b, a)\nread(g)",
            'respond("The lesion volume changed by {0} mm3.", g)',
        ]
        mods = [["v1", "v2"], ["lesion", "lesion"], []]
        meta["scale"] = scale
    elif kind == "classify_intensity":
        ph, vols, les = _scene(rng, cfg, True)
        volumes = [_volume("v1", vols[con], con, cfg.dates[0])]
        masks = []
        bindings = None
        label = les.attributes["classes"][con]
        steps = [_encode_step(["v1"]), f'respond("The lesion is {label}.")']
        mods = [["v1"], []]
    else:  # classify_location
        label = _pick(rng, list(HEMISPHERES))
        ph, vols, les = _scene(rng, cfg, True, target=label)
        volumes = [_volume("v1", vols[con], con, cfg.dates[0])]
        masks = []
        bindings = None
        steps = [_encode_step(["v1"]), f'respond("The lesion is in the {label}.")']
        mods = [["v1"], []]

    for s, m in zip(steps, mods):
        if _mods(s) != len(m):
            raise AssertionError(f"step {s!r} has {_mods(s)} <MOD> slots but {len(m)} targets")
    meta["bindings"] = bindings
    prompt = expand_prompt(kind, grammar, rng, bindings)
    inst = TaskInstance(kind, prompt, volumes, steps, mods, masks, None, label, seed, meta)
    inst.answer = oracle_answer(inst)
    return inst


def resample_prompt(inst: TaskInstance, rng: np.random.Generator, grammar: Grammar | None = None) -> str:
    """A fresh surface form for the same task semantics."""
    return expand_prompt(inst.kind, grammar or default_grammar(), rng, inst.meta.get("bindings"))


def oracle_run(inst: TaskInstance, vocab=None):
    """Replay phi* with the oracle masks; returns the transcript."""
    from ..agent import build_vocab

    vocab = vocab or build_vocab([inst.prompt] + inst.steps)
    policy = OraclePolicy(inst.steps, vocab)
    return agent_loop(inst.prompt, inst.volumes, policy, vocab, Executor(oracle_masks=inst.masks), max_steps=len(inst.steps), max_len=1 << 20)


def oracle_answer(inst: TaskInstance) -> str | None:
    tr = oracle_run(inst)
    if not tr.valid:
        bad = next((s for s in tr.steps if s.outcome != "ok"), None)
        raise AssertionError(f"ground-truth program failed: {bad.outcome if bad else 'incomplete'}")
    return tr.answer


def make_task(kind: str, seed: int, grammar: Grammar | None = None, config: TaskConfig | None = None) -> TaskInstance:
    """Pure function of (kind, seed, grammar, config)."""
    return build_task(kind, grammar, np.random.default_rng(seed), config, seed=seed)


def task_corpus(tasks: list[TaskInstance], grammar: Grammar | None = None) -> list[str]:
    """Texts the vocabulary should cover: prompts, programs, metadata and feedback renderings."""
    from ..agent import metadata_line

    texts = []
    for t in tasks:
        texts.append(t.prompt)
        texts.extend(t.steps)
        texts.extend(metadata_line(v.name, v.modality, v.date) for v in t.volumes)
        tr = oracle_run(t)
        for s in tr.steps:
            texts.extend(s.feedback)
    g = grammar or default_grammar()
    for opts in g.choices.values():
        texts.extend(opts)
    return texts
